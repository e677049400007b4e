"""Exponential quasi-likelihood: evaluation, analytic derivatives, fitting.

The log-likelihood is ``sum_i -(log psi_i + x_i / psi_i)`` with the filter
``psi_i = omega + alpha x_{i-1} + beta psi_{i-1}``. Derivatives come from the
filter-derivative recursions, so score and information are exact up to
floating point. Fitting maximizes over a compact box using a quasi-Newton
pass in transformed coordinates (log scale for omega, scaled logit for alpha
and beta) followed by Newton polishing with the analytic Hessian.

``fit_restricted`` optimizes over (omega, alpha) with beta tied to
``1 - alpha``, the unit-persistence restriction.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .errors import ConfigError, FilterOverflowError, NonConvergenceError
from .model import (
    DEFAULT_BOUNDS,
    ParamBounds,
    ParamTheta,
    beta_complement,
    psi_filter,
    _psi0_value,
)

#: 3 x 2 Jacobian of theta(phi) = (omega, alpha, 1 - alpha)
GAMMA_RESTRICTION = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

_SCHEMA_VERSION = "iacd-fit-1"


@dataclass(frozen=True)
class FitOptions:
    psi0_rule: str = "x0"
    bounds: ParamBounds = DEFAULT_BOUNDS
    n_starts: int = 5
    min_n: int = 10
    maxiter: int = 200
    #: converged requires sup|score| < grad_tol_factor * n ...
    grad_tol_factor: float = 1e-6
    #: ... and a final Newton step below this sup-norm
    step_tol: float = 1e-10
    polish_iters: int = 30
    #: observation indices at which the filter re-initializes (new trading
    #: days); empty means one uninterrupted filter pass
    reset_indices: tuple = ()


@dataclass
class FitResult:
    """Fitted parameters with the derivative matrices needed for inference."""

    theta_hat: ParamTheta
    loglik: float
    score: np.ndarray
    info: np.ndarray
    opg: np.ndarray
    residuals: np.ndarray
    sigma2_eps_hat: float
    n: int
    t_span: float
    restricted: bool
    converged: bool
    iterations: int
    psi0_rule: str
    diagnostics: list = field(default_factory=list)
    reset_indices: tuple = ()

    def to_dict(self):
        return {
            "schema_version": _SCHEMA_VERSION,
            "theta_hat": {
                "omega": self.theta_hat.omega,
                "alpha": self.theta_hat.alpha,
                "beta": self.theta_hat.beta,
            },
            "loglik": self.loglik,
            "score": list(self.score),
            "info_row_major": [float(v) for v in self.info.ravel(order="C")],
            "opg_row_major": [float(v) for v in self.opg.ravel(order="C")],
            "residuals": [float(v) for v in self.residuals],
            "sigma2_eps_hat": self.sigma2_eps_hat,
            "n": self.n,
            "t_span": self.t_span,
            "restricted": self.restricted,
            "converged": self.converged,
            "iterations": self.iterations,
            "psi0_rule": self.psi0_rule,
            "diagnostics": self.diagnostics,
            "reset_indices": list(self.reset_indices),
        }

    def to_json(self, path=None, indent=None):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != _SCHEMA_VERSION:
            raise ConfigError(f"unsupported fit schema {d.get('schema_version')!r}")
        th = d["theta_hat"]
        return cls(
            theta_hat=ParamTheta(th["omega"], th["alpha"], th["beta"]),
            loglik=d["loglik"],
            score=np.array(d["score"]),
            info=np.array(d["info_row_major"]).reshape(3, 3),
            opg=np.array(d["opg_row_major"]).reshape(3, 3),
            residuals=np.array(d["residuals"]),
            sigma2_eps_hat=d["sigma2_eps_hat"],
            n=d["n"],
            t_span=d["t_span"],
            restricted=d["restricted"],
            converged=d["converged"],
            iterations=d["iterations"],
            psi0_rule=d["psi0_rule"],
            diagnostics=d.get("diagnostics", []),
            reset_indices=tuple(d.get("reset_indices", ())),
        )


def _segments(n, resets):
    """Validated (lo, hi) observation blocks between filter resets."""
    if not resets:
        return [(0, n)]
    idx = sorted(int(r) for r in resets)
    if idx[0] <= 0 or idx[-1] >= n or len(set(idx)) != len(idx):
        raise ConfigError(f"reset indices must be unique and inside (0, {n})")
    bounds = [0, *idx, n]
    return list(zip(bounds[:-1], bounds[1:]))


def _segment_state(theta, series, psi0_rule, lo):
    """Initial (x_prev, psi0, dpsi0_omega) for the filter block at ``lo``."""
    x_prev = series.x0 if lo == 0 else float(series.x[lo - 1])
    if psi0_rule == "x0":
        return x_prev, x_prev, 0.0
    if psi0_rule == "omega":
        return x_prev, theta.omega, 1.0
    raise ConfigError(f"psi0_rule must be 'x0' or 'omega', got {psi0_rule!r}")


def loglik(theta, series, psi0_rule="x0", resets=()):
    """Exponential quasi-log-likelihood of a series under ``theta``.

    ``resets`` lists observation indices at which the filter starts afresh,
    e.g. the first trade of each new day when day boundaries should not
    carry conditioning information.
    """
    _psi0_value(theta, series, psi0_rule)
    total = 0.0
    for lo, hi in _segments(series.n, resets):
        x_prev, psi0, _ = _segment_state(theta, series, psi0_rule, lo)
        ll, ok = _kernels.loglik_kernel(
            theta.omega, theta.alpha, theta.beta, x_prev, psi0, series.x[lo:hi]
        )
        if not ok:
            raise FilterOverflowError(_first_bad_index(theta, series, psi0))
        total += ll
    return total


def score_and_info(theta, series, psi0_rule="x0", resets=()):
    """Analytic score, observed information and outer-product-of-gradients.

    Returns
    -------
    (score, info, opg)
        ``score`` is the gradient of the log-likelihood, ``info`` the
        negative Hessian, ``opg`` the sum of per-observation score outer
        products, all in (omega, alpha, beta) coordinates.
    """
    _psi0_value(theta, series, psi0_rule)
    score = np.zeros(3)
    info = np.zeros((3, 3))
    opg = np.zeros((3, 3))
    s_seg = np.empty(3)
    i_seg = np.empty((3, 3))
    o_seg = np.empty((3, 3))
    for lo, hi in _segments(series.n, resets):
        x_prev, psi0, dpsi0_w = _segment_state(theta, series, psi0_rule, lo)
        _, ok = _kernels.score_info_kernel(
            theta.omega, theta.alpha, theta.beta, x_prev, psi0, dpsi0_w,
            series.x[lo:hi], s_seg, i_seg, o_seg,
        )
        if not ok:
            raise FilterOverflowError(_first_bad_index(theta, series, psi0))
        score += s_seg
        info += i_seg
        opg += o_seg
    return score, info, opg


def _first_bad_index(theta, series, psi0):
    psi = _kernels.psi_recursion(theta.omega, theta.alpha, theta.beta, series.x0, psi0, series.x)
    finite = np.isfinite(psi) & (psi > 0)
    return int(np.argmin(finite)) + 1


def filtered_psi(theta, series, psi0_rule="x0", resets=()):
    """Conditional durations with optional filter restarts at ``resets``."""
    if not resets:
        return psi_filter(theta, series, psi0_rule)
    out = np.empty(series.n)
    for lo, hi in _segments(series.n, resets):
        x_prev, psi0, _ = _segment_state(theta, series, psi0_rule, lo)
        out[lo:hi] = _kernels.psi_recursion(
            theta.omega, theta.alpha, theta.beta, x_prev, psi0, series.x[lo:hi]
        )
    if not np.all(np.isfinite(out)):
        raise FilterOverflowError(int(np.argmin(np.isfinite(out))) + 1)
    return out


# ---------------------------------------------------------------------------
# box transforms: omega on log scale, alpha/beta on a scaled logit


def _to_unconstrained(values, boxes):
    z = np.empty(len(values))
    for j, (v, (lo, hi)) in enumerate(zip(values, boxes)):
        if j == 0:
            z[j] = math.log(min(max(v, lo), hi))
        else:
            width = hi - lo
            p = min(max((v - lo) / width, 1e-12), 1.0 - 1e-12)
            z[j] = math.log(p / (1.0 - p))
    return z


def _from_unconstrained(z, boxes):
    vals = np.empty(len(z))
    jac = np.empty(len(z))
    for j, (zj, (lo, hi)) in enumerate(zip(z, boxes)):
        if j == 0:
            vals[j] = math.exp(zj)
            jac[j] = vals[j]
        else:
            width = hi - lo
            p = 1.0 / (1.0 + math.exp(-zj))
            vals[j] = lo + width * p
            jac[j] = width * p * (1.0 - p)
    return vals, jac


def _z_bounds(boxes):
    out = [(math.log(boxes[0][0]), math.log(boxes[0][1]))]
    out.extend((-40.0, 40.0) for _ in boxes[1:])
    return out


def _default_starts(series, bounds, restricted):
    s = float(np.mean(series.x))
    lo_w, hi_w = bounds.omega
    if restricted:
        raw = [(0.1 * s, 0.2), (0.05 * s, 0.5), (0.3 * s, 0.1), (0.5 * s, 0.8), (0.02 * s, 0.35)]
        return [(min(max(w, lo_w), hi_w), a) for w, a in raw]
    raw = [
        (0.1 * s, 0.1, 0.8),
        (0.05 * s, 0.2, 0.7),
        (0.3 * s, 0.05, 0.9),
        (0.5 * s, 0.3, 0.5),
        (0.02 * s, 0.45, 0.45),
    ]
    return [bounds.clip(w, a, b) for w, a, b in raw]


class _Objective:
    """Negative log-likelihood and gradient in unconstrained coordinates."""

    def __init__(self, series, psi0_rule, boxes, restricted, resets=()):
        self.series = series
        self.psi0_rule = psi0_rule
        self.boxes = boxes
        self.restricted = restricted
        self.segments = _segments(series.n, resets)
        self.grad3 = np.empty(3)

    def theta_of(self, values):
        if self.restricted:
            return values[0], values[1], beta_complement(values[1])
        return values[0], values[1], values[2]

    def __call__(self, z):
        values, jac = _from_unconstrained(z, self.boxes)
        omega, alpha, beta = self.theta_of(values)
        x = self.series.x
        total = 0.0
        g3 = np.zeros(3)
        for lo, hi in self.segments:
            x_prev = self.series.x0 if lo == 0 else float(x[lo - 1])
            psi0 = x_prev if self.psi0_rule == "x0" else omega
            dpsi0_w = 0.0 if self.psi0_rule == "x0" else 1.0
            ll, ok = _kernels.loglik_grad_kernel(
                omega, alpha, beta, x_prev, psi0, dpsi0_w, x[lo:hi], self.grad3
            )
            if not ok or not math.isfinite(ll):
                return 1e300, np.zeros(len(z))
            total += ll
            g3 += self.grad3
        if self.restricted:
            g = np.array([g3[0], g3[1] - g3[2]])
        else:
            g = g3
        return -total, -(g * jac)


def _solve_ascent(hess, grad):
    """Newton direction ``hess^{-1} grad``, ridged until it is an ascent way."""
    ridge = 0.0
    scale = max(float(np.max(np.abs(np.diag(hess)))), 1e-300)
    for _ in range(8):
        try:
            step = np.linalg.solve(hess + ridge * scale * np.eye(len(grad)), grad)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.dot(step, grad) > 0 and np.all(np.isfinite(step)):
            return step
        ridge = 1e-8 if ridge == 0.0 else ridge * 100.0
    return grad / scale


def _bound_atol(lo, hi):
    return 1e-10 * (1.0 + min(abs(lo), abs(hi)))


def projected_gradient(grad, vals, boxes):
    """Gradient with components pointing out of the box zeroed.

    The maximizer of the likelihood over a compact box can sit on its edge;
    first-order optimality there is sup-norm smallness of this projection.
    """
    out = np.array(grad, dtype=float)
    for j, (lo, hi) in enumerate(boxes):
        atol = _bound_atol(lo, hi)
        if vals[j] <= lo + atol and out[j] < 0:
            out[j] = 0.0
        if vals[j] >= hi - atol and out[j] > 0:
            out[j] = 0.0
    return out


def _polish(theta_vals, objective_ll, score_hess, clip, boxes, step_tol, grad_tol, max_iters):
    """Active-set Newton iterations with backtracking inside the box."""
    vals = np.array(theta_vals, dtype=float)
    ll = objective_ll(vals)
    last_step = math.inf
    iters = 0
    for _ in range(max_iters):
        grad, hess = score_hess(vals)
        proj = projected_gradient(grad, vals, boxes)
        if float(np.max(np.abs(proj))) < grad_tol and last_step < step_tol:
            break
        free = proj != 0.0
        if not np.any(free):
            last_step = 0.0
            break
        direction = np.zeros_like(vals)
        direction[free] = _solve_ascent(hess[np.ix_(free, free)], grad[free])
        step = 1.0
        accepted = False
        while step >= 2.0**-40:
            cand = clip(vals + step * direction)
            ll_c = objective_ll(cand)
            if math.isfinite(ll_c) and ll_c >= ll:
                moved = float(np.max(np.abs(cand - vals)))
                if moved == 0.0:
                    break
                vals, ll, last_step = cand, ll_c, moved
                accepted = True
                break
            step *= 0.5
        iters += 1
        if not accepted:
            last_step = 0.0
            break
    return vals, ll, last_step if math.isfinite(last_step) else 0.0, iters


def _fit(series, options, restricted):
    if series.n < max(options.min_n, 2):
        raise ConfigError(f"series too short to fit: n={series.n} < {options.min_n}")
    if options.psi0_rule not in ("x0", "omega"):
        raise ConfigError(f"unknown psi0_rule {options.psi0_rule!r}")
    bounds = options.bounds
    if restricted:
        alpha_lo = max(bounds.alpha[0], 1.0 - bounds.beta[1])
        alpha_hi = min(bounds.alpha[1], 1.0 - 1e-9)
        boxes = [bounds.omega, (alpha_lo, alpha_hi)]
    else:
        boxes = [bounds.omega, bounds.alpha, bounds.beta]

    resets = tuple(options.reset_indices)
    objective = _Objective(series, options.psi0_rule, boxes, restricted, resets)
    n = series.n
    grad_tol = options.grad_tol_factor * n

    def full_eval(vals):
        theta = ParamTheta(*objective.theta_of(vals))
        score, info, opg = score_and_info(theta, series, options.psi0_rule, resets)
        if restricted:
            g = GAMMA_RESTRICTION.T @ score
            h = GAMMA_RESTRICTION.T @ info @ GAMMA_RESTRICTION
            return score, info, opg, g, h
        return score, info, opg, score, info

    def ll_of(vals):
        theta = ParamTheta(*objective.theta_of(vals))
        try:
            return loglik(theta, series, options.psi0_rule, resets)
        except FilterOverflowError:
            return -math.inf

    def clip(vals):
        out = vals.copy()
        for j, (lo, hi) in enumerate(boxes):
            out[j] = min(max(out[j], lo), hi)
        return out

    starts = _default_starts(series, bounds, restricted)[: max(options.n_starts, 1)]
    candidates = []
    failures = []
    for start in starts:
        z0 = _to_unconstrained(start, boxes)
        try:
            res = minimize(
                objective,
                z0,
                jac=True,
                method="L-BFGS-B",
                bounds=_z_bounds(boxes),
                options={"maxiter": options.maxiter, "ftol": 1e-13, "gtol": 1e-9},
            )
            vals, _ = _from_unconstrained(res.x, boxes)
            vals, ll, last_step, polish_n = _polish(
                clip(vals),
                ll_of,
                lambda v: full_eval(v)[3:],
                clip,
                boxes,
                options.step_tol,
                grad_tol,
                options.polish_iters,
            )
            if not math.isfinite(ll):
                raise NonConvergenceError("non-finite likelihood at optimum")
            score, info, opg, g_active, _ = full_eval(vals)
            gnorm = float(np.max(np.abs(projected_gradient(g_active, vals, boxes))))
            candidates.append(
                {
                    "start": tuple(start),
                    "vals": vals,
                    "loglik": ll,
                    "grad_sup": gnorm,
                    "last_step": last_step,
                    "iterations": int(res.nit) + polish_n,
                    "converged": gnorm < grad_tol and last_step < options.step_tol,
                }
            )
        except Exception as exc:  # noqa: BLE001 - per-start failures are data
            failures.append({"start": tuple(start), "error": repr(exc)})
    if not candidates:
        raise NonConvergenceError(f"all {len(starts)} starts failed: {failures}")

    # candidates within numerical noise of the top log-likelihood are ties;
    # prefer one that met the convergence criteria
    best_ll = max(c["loglik"] for c in candidates)
    noise = 1e-7 * (1.0 + abs(best_ll))
    tied = [c for c in candidates if best_ll - c["loglik"] <= noise]
    pool = [c for c in tied if c["converged"]] or tied
    best = max(pool, key=lambda c: (c["loglik"], -c["grad_sup"]))
    vals = best["vals"]
    theta = ParamTheta(*objective.theta_of(vals))
    score, info, opg = score_and_info(theta, series, options.psi0_rule, resets)
    psi = filtered_psi(theta, series, options.psi0_rule, resets)
    residuals = series.x / psi
    sigma2 = float(np.mean((residuals - residuals.mean()) ** 2))
    diagnostics = [
        {k: c[k] for k in ("start", "loglik", "grad_sup", "last_step", "converged")}
        for c in candidates
    ] + failures
    return FitResult(
        theta_hat=theta,
        loglik=float(best["loglik"]),
        score=score,
        info=info,
        opg=opg,
        residuals=residuals,
        sigma2_eps_hat=sigma2,
        n=n,
        t_span=series.t_span,
        restricted=restricted,
        converged=bool(best["converged"]),
        iterations=int(best["iterations"]),
        psi0_rule=options.psi0_rule,
        diagnostics=diagnostics,
        reset_indices=resets,
    )


def fit_unrestricted(series, options=FitOptions()):
    """Maximize the quasi-log-likelihood over the full (omega, alpha, beta) box.

    Runs a small multi-start (moment-flavored start plus fixed perturbations),
    keeps the best by log-likelihood, and reports convergence only when the
    score sup-norm falls below ``grad_tol_factor * n`` with a final Newton
    step below ``step_tol``. A fit that fails these criteria is returned with
    ``converged=False`` and per-start diagnostics, never silently.
    """
    return _fit(series, options, restricted=False)


def fit_restricted(series, options=FitOptions()):
    """Maximize the likelihood under ``alpha + beta = 1``.

    Optimizes over (omega, alpha); the reported parameter vector satisfies
    the restriction exactly and the first-order condition applies to the
    restricted gradient ``gamma' score``.
    """
    return _fit(series, options, restricted=True)
