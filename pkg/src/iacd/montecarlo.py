"""Monte Carlo studies: size tables, size-adjusted power curves, QQ data.

Every replication draws from a stream addressed by integer coordinates
``(study, cell..., replication, attempt)`` under one master seed, so results
are bit-identical for any worker count, and a subset of cells reproduces
exactly the numbers it would have inside the full grid.
"""

import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, EmptySeriesError, IacdError, SolverError
from .inference import gaussian_quantile, qlr_stat, tau_from_fit
from .likelihood import FitOptions, fit_restricted, fit_unrestricted
from .model import InnovationSpec, ParamTheta, stationarity_functional, weibull_shape_for_variance
from .rng import derive_seed, substream
from .simulate import calibrate_span, simulate_span_with_rng

from scipy.stats import chi2

_SIZE_STUDY = 1
_POWER_STUDY = 2
_CALIBRATION = 3

_CHUNK = 64
_MAX_ATTEMPTS = 4


def innovation_for_sigma2(sigma2):
    """Innovation law with the requested variance; 1.0 maps to exponential."""
    if abs(sigma2 - 1.0) < 1e-12:
        return InnovationSpec.exponential()
    return InnovationSpec.weibull(weibull_shape_for_variance(sigma2))


def _micro(x):
    return int(round(x * 1e6))


def _encode_c(c):
    # signed grid offsets packed into a nonnegative stream coordinate
    return _micro(c) + (1 << 21)


@dataclass
class PowerDesign:
    c_bounds: dict = field(default_factory=lambda: {0.15: 0.011, 0.5: 0.128, 0.85: 0.149})
    grid_points: int = 100
    median_n_targets: tuple = (500, 2500, 12500, 62500)


@dataclass
class ExperimentDesign:
    alpha0_grid: tuple = (0.15, 0.50, 0.85)
    sigma2_grid: tuple = (0.5, 1.0, 2.0)
    median_n_targets: tuple = (100, 500, 2500, 12500, 62500)
    replications: int = 10000
    eta: float = 0.05
    omega0: float = 1.0
    master_seed: int = 0
    sigma_method: str = "info"
    psi0_rule: str = "x0"
    burn_in: int = 1000
    pilot_reps: int = 200
    failure_budget: float = 0.01
    power: PowerDesign | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be positive")
        if not (0.0 < self.eta < 1.0):
            raise ConfigError("eta must lie in (0, 1)")
        for a0 in self.alpha0_grid:
            if not (0.0 < a0 <= 1.0):
                raise ConfigError(f"alpha0 grid values must lie in (0, 1], got {a0}")

    def to_dict(self):
        d = asdict(self)
        if self.power is not None:
            d["power"]["c_bounds"] = {str(k): v for k, v in self.power.c_bounds.items()}
        return d


class ErpTable:
    """Empirical rejection probabilities keyed by cell and statistic."""

    COLUMNS = ("sigma2", "med_n", "alpha0", "statistic", "sidedness", "erp", "mc_se")

    def __init__(self):
        self._rows = {}

    def add(self, sigma2, med_n, alpha0, statistic, sidedness, erp, mc_se):
        if not (0.0 <= erp <= 1.0):
            raise SolverError(f"rejection probability {erp} outside [0, 1]")
        key = (sigma2, med_n, alpha0, statistic, sidedness)
        self._rows[key] = (float(erp), float(mc_se))

    def erp(self, sigma2, med_n, alpha0, statistic, sidedness):
        return self._rows[(sigma2, med_n, alpha0, statistic, sidedness)][0]

    def rows(self):
        for key in sorted(self._rows):
            erp, se = self._rows[key]
            yield dict(zip(self.COLUMNS, (*key, erp, se)))

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.rows():
                fh.write(
                    f"{r['sigma2']:.17g},{r['med_n']},{r['alpha0']:.17g},"
                    f"{r['statistic']},{r['sidedness']},{r['erp']:.17g},{r['mc_se']:.17g}\n"
                )


def _replication_chunk(task):
    """Run replications [rep_lo, rep_hi) of one cell; returns sample arrays."""
    (master_seed, prefix, rep_lo, rep_hi, omega0, alpha, beta, law, nu, t_span,
     burn_in, psi0_rule, sigma_method) = task
    theta0 = ParamTheta(omega0, alpha, beta)
    innov = InnovationSpec(law, nu)
    m = rep_hi - rep_lo
    taus = np.full(m, np.nan)
    qlrs = np.full(m, np.nan)
    attempts = np.zeros(m, dtype=np.int64)
    empty_spans = 0
    fit_failures = 0
    lean = FitOptions(psi0_rule=psi0_rule, n_starts=1)
    full = FitOptions(psi0_rule=psi0_rule, n_starts=5)
    for j, rep in enumerate(range(rep_lo, rep_hi)):
        for attempt in range(_MAX_ATTEMPTS):
            attempts[j] = attempt + 1
            rng = substream(master_seed, *prefix, rep, attempt)
            try:
                series = simulate_span_with_rng(theta0, innov, t_span, burn_in, rng)
            except EmptySeriesError:
                empty_spans += 1
                continue
            try:
                fit_u = fit_unrestricted(series, lean)
                if not fit_u.converged:
                    fit_u = fit_unrestricted(series, full)
                fit_r = fit_restricted(series, lean)
                if not fit_r.converged:
                    fit_r = fit_restricted(series, full)
                if not (fit_u.converged and fit_r.converged):
                    raise SolverError("fit did not converge")
                taus[j] = tau_from_fit(fit_u, method=sigma_method)
                qlrs[j] = qlr_stat(fit_u, fit_r, normalize=True)
                break
            except IacdError:
                fit_failures += 1
                continue
    return rep_lo, taus, qlrs, attempts, empty_spans, fit_failures


def _map_ordered(fn, tasks, workers):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def _run_cell(design, prefix, theta_sim, innov, t_span, workers):
    """All replications of one cell; enforces the resampling budget."""
    m = design.replications
    tasks = [
        (
            design.master_seed, prefix, lo, min(lo + _CHUNK, m),
            theta_sim.omega, theta_sim.alpha, theta_sim.beta,
            innov.law, innov.nu, t_span, design.burn_in,
            design.psi0_rule, design.sigma_method,
        )
        for lo in range(0, m, _CHUNK)
    ]
    taus = np.full(m, np.nan)
    qlrs = np.full(m, np.nan)
    attempts = np.zeros(m, dtype=np.int64)
    empty_spans = 0
    fit_failures = 0
    for rep_lo, tau_c, qlr_c, att_c, emp, ff in _map_ordered(_replication_chunk, tasks, workers):
        taus[rep_lo : rep_lo + tau_c.size] = tau_c
        qlrs[rep_lo : rep_lo + qlr_c.size] = qlr_c
        attempts[rep_lo : rep_lo + att_c.size] = att_c
        empty_spans += emp
        fit_failures += ff
    resampled = int(np.sum(attempts - 1))
    budget = max(1, int(math.ceil(design.failure_budget * m)))
    unresolved = int(np.sum(~np.isfinite(taus)))
    if unresolved > 0 or resampled > budget:
        raise SolverError(
            f"cell {prefix} exceeded the failure budget: {resampled} resamples "
            f"({empty_spans} empty spans, {fit_failures} fit failures), "
            f"{unresolved} unresolved replications (budget {budget})"
        )
    return taus, qlrs, {"resampled": resampled, "empty_spans": empty_spans, "fit_failures": fit_failures}


@dataclass
class SizeStudyResult:
    design: ExperimentDesign
    erp: ErpTable
    tau_samples: dict
    qlr_samples: dict
    spans: dict
    resamples: dict

    def manifest(self):
        return _manifest("size", self.design, self.spans, self.resamples)

    def write(self, outdir):
        import pathlib

        out = pathlib.Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        self.erp.write_csv(out / "erp_table.csv")
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, default=str)
        return out


def _manifest(kind, design, spans, extra):
    import numba
    import scipy

    from . import __version__

    return {
        "study": kind,
        "design": design.to_dict(),
        "spans": {str(k): v for k, v in spans.items()},
        "extra": {str(k): v for k, v in extra.items()},
        "versions": {
            "iacd": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "python": sys.version.split()[0],
        },
    }


def calibrated_span(design, alpha0, sigma2, med_n):
    """Span with median event count ``med_n`` under the boundary null."""
    innov = innovation_for_sigma2(sigma2)
    theta0 = ParamTheta(design.omega0, alpha0, 1.0 - alpha0)
    seed = derive_seed(design.master_seed, _CALIBRATION, _micro(alpha0), _micro(sigma2), med_n)
    return calibrate_span(
        theta0, innov, med_n, pilot_reps=design.pilot_reps, seed=seed, burn_in=design.burn_in
    )


def run_size_study(design, workers=1, cells=None):
    """Rejection frequencies of the boundary tests under the null.

    Parameters
    ----------
    design : ExperimentDesign
    workers : int
        Process count for the replication map; results do not depend on it.
    cells : sequence of (sigma2, med_n, alpha0), optional
        Subset of the design grid to run; defaults to the full grid.

    Returns
    -------
    SizeStudyResult
        Rejection table plus the raw tau and normalized QLR samples per cell.
    """
    grid = [
        (s2, mn, a0)
        for s2 in design.sigma2_grid
        for a0 in design.alpha0_grid
        for mn in design.median_n_targets
    ]
    if cells is not None:
        wanted = {(float(s2), int(mn), float(a0)) for s2, mn, a0 in cells}
        grid = [c for c in grid if (float(c[0]), int(c[1]), float(c[2])) in wanted]
        if len(grid) != len(wanted):
            raise ConfigError(f"unknown cells requested: {wanted - set((float(a), int(b), float(c)) for a, b, c in grid)}")
    erp = ErpTable()
    tau_samples, qlr_samples, spans, resamples = {}, {}, {}, {}
    z_two = gaussian_quantile(1.0 - design.eta / 2.0)
    q_one = gaussian_quantile(1.0 - design.eta)
    chi_crit = float(chi2.ppf(1.0 - design.eta, df=1))
    m = design.replications
    for sigma2, med_n, alpha0 in grid:
        innov = innovation_for_sigma2(sigma2)
        theta0 = ParamTheta(design.omega0, alpha0, 1.0 - alpha0)
        t_span = calibrated_span(design, alpha0, sigma2, med_n)
        prefix = (_SIZE_STUDY, _micro(sigma2), _micro(alpha0), med_n)
        taus, qlrs, res = _run_cell(design, prefix, theta0, innov, t_span, workers)
        key = (sigma2, med_n, alpha0)
        tau_samples[key], qlr_samples[key] = taus, qlrs
        spans[key] = t_span
        resamples[key] = res
        for stat, side, hits in (
            ("tau", "two_sided", np.abs(taus) > z_two),
            ("qlr", "two_sided", qlrs > chi_crit),
            ("tau", "left", taus < -q_one),
            ("tau", "right", taus > q_one),
        ):
            p = float(np.mean(hits))
            erp.add(sigma2, med_n, alpha0, stat, side, p, math.sqrt(p * (1.0 - p) / m))
    return SizeStudyResult(design, erp, tau_samples, qlr_samples, spans, resamples)


@dataclass
class PowerStudyResult:
    design: ExperimentDesign
    rows: list
    null_quantiles: dict
    spans: dict
    skipped: list

    def manifest(self):
        man = _manifest("power", self.design, self.spans, {})
        man["skipped_nonstationary"] = self.skipped
        man["null_quantiles"] = {str(k): list(v) for k, v in self.null_quantiles.items()}
        return man

    def erp(self, alpha0, med_n, c, side):
        for r in self.rows:
            if (
                abs(r["alpha0"] - alpha0) < 1e-12
                and r["med_n"] == med_n
                and abs(r["c"] - c) < 1e-12
                and r["side"] == side
            ):
                return r["erp"]
        raise KeyError((alpha0, med_n, c, side))

    def write(self, outdir):
        import pathlib

        out = pathlib.Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "power_curve.csv", "w") as fh:
            fh.write("alpha0,med_n,c,side,erp\n")
            for r in self.rows:
                fh.write(f"{r['alpha0']:.17g},{r['med_n']},{r['c']:.17g},{r['side']},{r['erp']:.17g}\n")
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, default=str)
        return out


def run_power_study(design, workers=1, null_taus=None, median_n_targets=None,
                    alpha0_values=None, c_values=None):
    """Size-adjusted rejection frequencies along local departures from the null.

    For each ``alpha0``, durations are generated with ``alpha = alpha0 + c``
    and ``beta = 1 - alpha0`` over the span calibrated at ``c = 0``. Critical
    values are the ``eta`` and ``1 - eta`` empirical quantiles of the null
    tau sample, so the ``c = 0`` rejection frequency is ``eta`` by
    construction. Grid points violating strict stationarity are skipped and
    reported.

    ``null_taus`` may carry tau samples from ``run_size_study`` keyed by
    ``(1.0, med_n, alpha0)``; missing cells are simulated in place with the
    identical stream addresses, so provided and in-place samples agree.
    """
    if design.power is None:
        raise ConfigError("design.power must be set for a power study")
    pd = design.power
    sigma2 = 1.0
    innov = innovation_for_sigma2(sigma2)
    rows, skipped = [], []
    null_quantiles, spans = {}, {}
    targets = tuple(median_n_targets or pd.median_n_targets)
    alpha0s = tuple(alpha0_values or design.alpha0_grid)
    m = design.replications
    for alpha0 in alpha0s:
        c_bound = pd.c_bounds[alpha0]
        grid = np.asarray(c_values if c_values is not None else np.linspace(-c_bound, c_bound, pd.grid_points))
        for med_n in targets:
            t_span = calibrated_span(design, alpha0, sigma2, med_n)
            spans[(alpha0, med_n)] = t_span
            key = (sigma2, med_n, alpha0)
            if null_taus is not None and key in null_taus:
                null = np.asarray(null_taus[key])
            else:
                theta0 = ParamTheta(design.omega0, alpha0, 1.0 - alpha0)
                prefix = (_SIZE_STUDY, _micro(sigma2), _micro(alpha0), med_n)
                null, _, _ = _run_cell(design, prefix, theta0, innov, t_span, workers)
            q_lo, q_hi = np.quantile(null, [design.eta, 1.0 - design.eta])
            null_quantiles[(alpha0, med_n)] = (float(q_lo), float(q_hi))
            rows.append(dict(alpha0=alpha0, med_n=med_n, c=0.0, side="left",
                             erp=float(np.mean(null < q_lo))))
            rows.append(dict(alpha0=alpha0, med_n=med_n, c=0.0, side="right",
                             erp=float(np.mean(null > q_hi))))
            for c in grid:
                c = float(c)
                if c == 0.0:
                    continue
                alpha = alpha0 + c
                beta = 1.0 - alpha0
                if alpha <= 0 or stationarity_functional(alpha, beta, innov) >= 0:
                    skipped.append({"alpha0": alpha0, "med_n": med_n, "c": c})
                    warnings.warn(
                        f"power grid point c={c:.6g} at alpha0={alpha0} is not strictly "
                        f"stationary; skipped",
                        stacklevel=2,
                    )
                    continue
                theta_c = ParamTheta(design.omega0, alpha, beta)
                prefix = (_POWER_STUDY, _micro(sigma2), _micro(alpha0), med_n, _encode_c(c))
                taus, _, _ = _run_cell(design, prefix, theta_c, innov, t_span, workers)
                rows.append(dict(alpha0=alpha0, med_n=med_n, c=c, side="left",
                                 erp=float(np.mean(taus < q_lo))))
                rows.append(dict(alpha0=alpha0, med_n=med_n, c=c, side="right",
                                 erp=float(np.mean(taus > q_hi))))
    return PowerStudyResult(design, rows, null_quantiles, spans, skipped)


def qq_data(tau_samples):
    """Normal QQ pairs: plotting positions (i - 0.5)/M against sorted samples.

    Returns an ``(M, 2)`` array of (theoretical, empirical) quantiles.
    """
    taus = np.sort(np.asarray(tau_samples, dtype=float))
    m = taus.size
    if m < 100:
        raise ConfigError(f"need at least 100 samples for QQ data, got {m}")
    from scipy.special import ndtri

    theo = ndtri((np.arange(1, m + 1) - 0.5) / m)
    return np.column_stack([theo, taus])


def write_qq_csv(pairs, path):
    with open(path, "w") as fh:
        fh.write("theoretical,empirical\n")
        for a, b in pairs:
            fh.write(f"{a:.17g},{b:.17g}\n")
