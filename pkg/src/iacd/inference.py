"""Variance estimators, boundary test statistics, and test decisions.

The t-type statistic studentizes ``alpha_hat + beta_hat - 1`` at the
``sqrt(t / log t)`` rate that applies at the unit-persistence boundary. The
variance estimator carries the matching ``t / log t`` factor so that the two
rate factors cancel and the statistic reduces to the familiar
``(alpha_hat + beta_hat - 1) / se``; both forms are computed and must agree.

The quasi-likelihood-ratio statistic for the same restriction is chi-squared
with one degree of freedom after normalization by the residual variance.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from .errors import ConfigError, SingularInformationError, SolverError

_G = np.array([0.0, 1.0, 1.0])

SIGMA_METHODS = ("sandwich", "info")

_SCHEMA_VERSION = "iacd-test-1"


def gaussian_quantile(p):
    """Standard normal quantile, accurate to near machine precision."""
    if not (0.0 < p < 1.0):
        raise ConfigError(f"quantile probability must be in (0, 1), got {p}")
    return float(ndtri(p))


def gaussian_cdf(x):
    return float(ndtr(x))


def _rate_scale(t_span):
    if not (t_span > 1.0):
        raise ConfigError(f"t_span must exceed 1 so that log(t) > 0, got {t_span}")
    return t_span / math.log(t_span)


def sigma_hat(fit, method="sandwich"):
    """Variance estimator for the rate-scaled parameter estimator.

    Parameters
    ----------
    fit : FitResult
        A converged unrestricted fit.
    method : {"sandwich", "info"}
        ``"info"`` scales the inverse information by the residual variance;
        ``"sandwich"`` uses the outer-product-of-gradients filling. Both are
        multiplied by ``t / log t`` so the result estimates the asymptotic
        variance of ``sqrt(t / log t) (theta_hat - theta0)``.

    Returns
    -------
    ndarray
        Symmetric positive definite 3 x 3 matrix.
    """
    if fit.restricted:
        raise ConfigError("variance estimation uses the unrestricted fit")
    if not fit.converged:
        raise SolverError("refusing variance estimate from a non-converged fit")
    if method not in SIGMA_METHODS:
        raise ConfigError(f"method must be one of {SIGMA_METHODS}, got {method!r}")
    scale = _rate_scale(fit.t_span)
    info = np.asarray(fit.info, dtype=float)
    cond = np.linalg.cond(info)
    if not math.isfinite(cond) or cond > 1e14:
        raise SingularInformationError(
            f"information matrix is numerically singular (cond={cond:.3e})", cond=cond
        )
    inv_info = np.linalg.inv(info)
    if method == "info":
        sigma = scale * fit.sigma2_eps_hat * inv_info
    else:
        sigma = scale * inv_info @ np.asarray(fit.opg, dtype=float) @ inv_info
    sigma = 0.5 * (sigma + sigma.T)
    eigmin = float(np.linalg.eigvalsh(sigma)[0])
    if not (eigmin > 0):
        raise SingularInformationError(
            f"variance estimate not positive definite (min eigenvalue {eigmin:.3e})", cond=cond
        )
    return sigma


def tau_stat(fit, sigma):
    """Studentized statistic for ``alpha + beta - 1``.

    Computed literally as ``sqrt(t/log t) * (ahat + bhat - 1) / sqrt(g' S g)``
    with ``g = (0, 1, 1)'``; the rate factor cancels against the one inside
    the variance estimate, and the cancellation is verified numerically.
    """
    scale = _rate_scale(fit.t_span)
    diff = fit.theta_hat.alpha + fit.theta_hat.beta - 1.0
    quad_form = float(_G @ np.asarray(sigma) @ _G)
    if not (quad_form > 0):
        raise SingularInformationError(f"nonpositive quadratic form {quad_form:.3e}")
    tau = math.sqrt(scale) * diff / math.sqrt(quad_form)
    se = standard_error_sum(fit, sigma)
    tau_plain = diff / se
    if abs(tau - tau_plain) > 1e-8 * (1.0 + abs(tau)):
        raise SolverError(f"rate cancellation check failed: {tau} vs {tau_plain}")
    return tau


def standard_error_sum(fit, sigma):
    """Standard error of ``alpha_hat + beta_hat - 1`` on the data scale."""
    scale = _rate_scale(fit.t_span)
    return math.sqrt(float(_G @ np.asarray(sigma) @ _G) / scale)


def tau_from_fit(fit, method="sandwich"):
    """The studentized boundary statistic straight from a fit.

    Unlike ``tau_stat`` fed by ``sigma_hat``, this only requires the scalar
    quadratic form ``g' Sigma g`` to be positive, not the full matrix to be
    positive definite; small samples pinned at the parameter box edge often
    satisfy the former but not the latter. The Monte Carlo layer uses this
    route.
    """
    if fit.restricted:
        raise ConfigError("the boundary statistic uses the unrestricted fit")
    if not fit.converged:
        raise SolverError("refusing a test statistic from a non-converged fit")
    if method not in SIGMA_METHODS:
        raise ConfigError(f"method must be one of {SIGMA_METHODS}, got {method!r}")
    scale = _rate_scale(fit.t_span)
    info = np.asarray(fit.info, dtype=float)
    cond = np.linalg.cond(info)
    if not math.isfinite(cond) or cond > 1e14:
        raise SingularInformationError(
            f"information matrix is numerically singular (cond={cond:.3e})", cond=cond
        )
    inv_info = np.linalg.inv(info)
    if method == "info":
        quad_form = scale * fit.sigma2_eps_hat * float(_G @ inv_info @ _G)
    else:
        v = inv_info @ _G
        quad_form = scale * float(v @ np.asarray(fit.opg, dtype=float) @ v)
    if not (quad_form > 0):
        raise SingularInformationError(f"nonpositive quadratic form {quad_form:.3e}")
    diff = fit.theta_hat.alpha + fit.theta_hat.beta - 1.0
    return math.sqrt(scale) * diff / math.sqrt(quad_form)


def parameter_standard_errors(fit, sigma):
    """Per-coordinate standard errors of (omega, alpha, beta) on the data scale."""
    scale = _rate_scale(fit.t_span)
    return np.sqrt(np.diag(np.asarray(sigma)) / scale)


def qlr_stat(fit_u, fit_r, normalize=True):
    """Quasi-likelihood-ratio statistic for the unit-persistence restriction.

    ``2 [L(unrestricted) - L(restricted)]``, optionally divided by the
    unrestricted residual variance, after which its null limit is
    chi-squared(1). Tiny negative values from optimizer noise are clamped to
    zero; anything beyond the noise floor is an optimization inconsistency.
    """
    if fit_u.restricted or not fit_r.restricted:
        raise ConfigError("qlr_stat expects (unrestricted, restricted) fits in that order")
    if fit_u.n != fit_r.n or fit_u.t_span != fit_r.t_span or fit_u.psi0_rule != fit_r.psi0_rule:
        raise ConfigError("fits were not produced from the same series and psi0 rule")
    if tuple(fit_u.reset_indices) != tuple(fit_r.reset_indices):
        raise ConfigError("fits use different filter reset points")
    raw = 2.0 * (fit_u.loglik - fit_r.loglik)
    if raw < -1e-8 * abs(fit_u.loglik):
        raise SolverError(
            f"restricted likelihood exceeds unrestricted by {-raw / 2:.6g}; optimization inconsistent"
        )
    raw = max(raw, 0.0)
    if not normalize:
        return raw
    return raw / fit_u.sigma2_eps_hat


HYPOTHESES = ("IACD_two_sided_tau", "IACD_two_sided_qlr", "InfiniteMean_left", "FiniteSumLeq1_right")


@dataclass
class TestReport:
    """Statistics, p-values and decisions for the boundary hypotheses."""

    tau: float
    qlr: float
    qlr_normalized: float
    sigma_hat: np.ndarray
    sigma_method: str
    se_sum: float
    p_two_sided: float
    p_left: float
    p_right: float
    decisions: dict
    eta: float
    theta_hat: tuple
    theta_tilde: tuple
    param_se: np.ndarray
    n: int
    t_span: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": _SCHEMA_VERSION,
            "tau": self.tau,
            "qlr": self.qlr,
            "qlr_normalized": self.qlr_normalized,
            "sigma_hat_row_major": [float(v) for v in np.asarray(self.sigma_hat).ravel()],
            "sigma_method": self.sigma_method,
            "se_sum": self.se_sum,
            "p_two_sided": self.p_two_sided,
            "p_left": self.p_left,
            "p_right": self.p_right,
            "decisions": dict(self.decisions),
            "eta": self.eta,
            "theta_hat": list(self.theta_hat),
            "theta_tilde": list(self.theta_tilde),
            "param_se": [float(v) for v in self.param_se],
            "n": self.n,
            "t_span": self.t_span,
            "extras": self.extras,
        }

    def to_json(self, path=None, indent=None):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def decide(fit_u, fit_r, eta=0.05, method="sandwich"):
    """Assemble the full test report for one fitted series.

    Decision rules at level ``eta``:

    * unit persistence, two-sided: reject when ``|tau|`` exceeds the upper
      ``1 - eta/2`` normal quantile (also reported via the normalized QLR
      against the chi-squared(1) quantile);
    * infinite mean (persistence at or above one), one-sided: reject when
      ``tau`` falls below the lower ``eta`` normal quantile;
    * persistence at or below one, one-sided: reject when ``tau`` exceeds the
      ``1 - eta`` normal quantile.
    """
    if not (0.0 < eta < 1.0):
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    sigma = sigma_hat(fit_u, method=method)
    tau = tau_stat(fit_u, sigma)
    qlr_raw = qlr_stat(fit_u, fit_r, normalize=False)
    qlr_norm = qlr_raw / fit_u.sigma2_eps_hat
    p_left = gaussian_cdf(tau)
    p_right = 1.0 - p_left
    p_two = 2.0 * (1.0 - gaussian_cdf(abs(tau)))
    z_two = gaussian_quantile(1.0 - eta / 2.0)
    z_one = gaussian_quantile(1.0 - eta)
    chi_crit = float(chi2.ppf(1.0 - eta, df=1))
    decisions = {
        "IACD_two_sided_tau": bool(abs(tau) > z_two),
        "IACD_two_sided_qlr": bool(qlr_norm > chi_crit),
        "InfiniteMean_left": bool(tau < -z_one),
        "FiniteSumLeq1_right": bool(tau > z_one),
    }
    th = fit_u.theta_hat
    tr = fit_r.theta_hat
    return TestReport(
        tau=tau,
        qlr=qlr_raw,
        qlr_normalized=qlr_norm,
        sigma_hat=sigma,
        sigma_method=method,
        se_sum=standard_error_sum(fit_u, sigma),
        p_two_sided=p_two,
        p_left=p_left,
        p_right=p_right,
        decisions=decisions,
        eta=eta,
        theta_hat=(th.omega, th.alpha, th.beta),
        theta_tilde=(tr.omega, tr.alpha, tr.beta),
        param_se=parameter_standard_errors(fit_u, sigma),
        n=fit_u.n,
        t_span=fit_u.t_span,
        extras={"critical_two_sided": z_two, "critical_one_sided": z_one, "chi2_crit": chi_crit},
    )


def format_estimates_table(rows, omega_scale=3):
    """Fixed-width estimates table: omega, alpha, beta, their sum, tau, QLR.

    ``rows`` is a sequence of mappings with keys ``label``, ``omega``,
    ``alpha``, ``beta``, ``sum_ab``, ``tau``, ``qlr`` and the standard errors
    ``se_omega``, ``se_alpha``, ``se_beta``, ``se_sum``. Standard errors are
    printed in parentheses beneath the estimates; omega and its standard
    error are multiplied by ``10**omega_scale``.
    """
    scale = 10.0**omega_scale
    lines = [
        f"{'':<6}{'omega':>9}{'alpha':>9}{'beta':>9}{'alpha+beta':>12}{'tau':>9}{'QLR':>9}"
    ]
    for r in rows:
        lines.append(
            f"{r['label']:<6}"
            f"{r['omega'] * scale:>9.3f}"
            f"{r['alpha']:>9.3f}"
            f"{r['beta']:>9.3f}"
            f"{r['sum_ab']:>12.3f}"
            f"{r['tau']:>9.2f}"
            f"{r['qlr']:>9.2f}"
        )
        lines.append(
            f"{'':<6}"
            f"{'(' + format(r['se_omega'] * scale, '.3f') + ')':>9}"
            f"{'(' + format(r['se_alpha'], '.3f') + ')':>9}"
            f"{'(' + format(r['se_beta'], '.3f') + ')':>9}"
            f"{'(' + format(r['se_sum'], '.3f') + ')':>12}"
        )
    lines.append(f"omega scaled by 10^{omega_scale}")
    return "\n".join(lines) + "\n"


def report_table_row(report, label):
    """Map a TestReport onto one row of ``format_estimates_table``."""
    se = report.param_se
    return {
        "label": label,
        "omega": report.theta_hat[0],
        "alpha": report.theta_hat[1],
        "beta": report.theta_hat[2],
        "sum_ab": report.theta_hat[1] + report.theta_hat[2],
        "tau": report.tau,
        "qlr": report.qlr,
        "se_omega": float(se[0]),
        "se_alpha": float(se[1]),
        "se_beta": float(se[2]),
        "se_sum": report.se_sum,
    }
