"""Span-based simulation of duration series and span calibration.

A simulated span runs the duration recursion from zeroed pre-sample state
through a burn-in block, keeps the last burn-in duration as the series
initial value, then accumulates durations until the next one would push the
cumulative sum past the requested calendar span. The number of observations
is therefore random, exactly as in the model.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CalibrationError, ConfigError, EmptySeriesError, NonstationaryError
from .model import DurationSeries, InnovationSpec, ParamTheta, c0_constant, stationarity_functional
from .rng import substream

#: innovations are drawn in fixed-size blocks so that a longer span with the
#: same seed extends, rather than reshuffles, a shorter one
_SIM_BLOCK = 4096


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one simulated span."""

    theta0: ParamTheta
    innov: InnovationSpec
    t_span: float
    burn_in: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.t_span > 0) or not math.isfinite(self.t_span):
            raise ConfigError(f"t_span must be positive and finite, got {self.t_span}")
        if self.burn_in < 1:
            raise ConfigError("burn_in must be at least 1; the last burn-in duration seeds x0")
        s = stationarity_functional(self.theta0.alpha, self.theta0.beta, self.innov)
        if s >= 0:
            raise NonstationaryError(
                f"E[log(alpha*eps+beta)] = {s:.6g} >= 0 for theta0={self.theta0}; refusing to simulate"
            )


class _SpanState:
    """Recursion state plus cumulative duration sums, extendable on demand."""

    __slots__ = ("rng", "theta", "innov", "xprev", "psiprev", "cum", "total")

    def __init__(self, rng, theta, innov, burn_in):
        self.rng = rng
        self.theta = theta
        self.innov = innov
        eps = innov.sample(rng, burn_in)
        out = np.empty(burn_in)
        self.xprev, self.psiprev = _kernels.simulate_chunk(
            theta.omega, theta.alpha, theta.beta, eps, 0.0, 0.0, out
        )
        self.cum = np.empty(0)
        self.total = 0.0

    def extend_past(self, t):
        while self.total <= t:
            eps = self.innov.sample(self.rng, _SIM_BLOCK)
            out = np.empty(_SIM_BLOCK)
            self.xprev, self.psiprev = _kernels.simulate_chunk(
                self.theta.omega, self.theta.alpha, self.theta.beta, eps, self.xprev, self.psiprev, out
            )
            block = self.total + np.cumsum(out)
            self.total = block[-1]
            self.cum = np.concatenate((self.cum, block))

    def n_at(self, t):
        self.extend_past(t)
        return int(np.searchsorted(self.cum, t, side="right"))

    def durations_up_to(self, t):
        n = self.n_at(t)
        return np.diff(self.cum[:n], prepend=0.0)


def simulate_span_with_rng(theta0, innov, t_span, burn_in, rng):
    """Simulate one span drawing from an explicit generator; see simulate_span."""
    state = _SpanState(rng, theta0, innov, burn_in)
    x0 = state.xprev
    x = state.durations_up_to(t_span)
    if x.size == 0:
        raise EmptySeriesError(
            f"no event completed within t_span={t_span}; first duration was {state.cum[0]:.6g}"
        )
    return DurationSeries(x0=x0, x=x, t_span=t_span)


def simulate_span(cfg):
    """Simulate one duration series over the calendar span ``[0, t_span]``.

    Returns
    -------
    DurationSeries
        ``x0`` is the last burn-in duration; the observations are all the
        durations whose cumulative sum stays within the span. Appending the
        next simulated duration would exceed ``t_span`` strictly.

    Raises
    ------
    EmptySeriesError
        If not even the first duration fits inside the span.
    """
    return simulate_span_with_rng(cfg.theta0, cfg.innov, cfg.t_span, cfg.burn_in, substream(cfg.seed))


def _initial_span_guess(theta, innov, target):
    if theta.persistence < 1.0 - 1e-12:
        return max(target * theta.mean_duration(), 1e-6)
    c0 = c0_constant(theta.omega, theta.alpha, innov) if abs(theta.persistence - 1.0) < 1e-12 else None
    if c0 is None:
        # heavy-tailed region: no closed-form rate, start at the boundary guess
        c0 = c0_constant(theta.omega, min(theta.alpha, 1.0), innov)
    t = max(target * c0, 10.0)
    for _ in range(60):
        t_new = target * c0 * math.log(max(t, 3.0))
        if abs(t_new - t) <= 1e-9 * t:
            break
        t = t_new
    return t


def calibrate_span(theta0, innov, target_median_n, pilot_reps=200, seed=0, burn_in=1000, tol=0.02):
    """Find a span length whose median event count hits a target.

    Runs ``pilot_reps`` simulations under common random numbers, so the
    per-path event count is nondecreasing in ``t`` and the median can be
    bisected. The returned span satisfies
    ``|median(n(t)) - target| <= tol * target``.
    """
    if target_median_n < 1:
        raise ConfigError("target_median_n must be at least 1")
    if pilot_reps < 200:
        raise ConfigError("pilot_reps must be at least 200 for a stable median")
    s = stationarity_functional(theta0.alpha, theta0.beta, innov)
    if s >= 0:
        raise NonstationaryError(f"cannot calibrate a nonstationary configuration ({s:.6g} >= 0)")

    paths = [
        _SpanState(substream(seed, r), theta0, innov, burn_in) for r in range(pilot_reps)
    ]

    def median_at(t):
        return float(np.median([p.n_at(t) for p in paths]))

    target = float(target_median_n)
    window = tol * target
    lo = hi = _initial_span_guess(theta0, innov, target)
    m = median_at(hi)
    if abs(m - target) <= window:
        return hi
    steps = 0
    while median_at(hi) < target:
        lo = hi
        hi *= 1.7
        steps += 1
        if steps > 300:
            raise CalibrationError(f"median {median_at(hi)} never reached target {target}")
    while median_at(lo) > target:
        hi = lo
        lo /= 1.7
        steps += 1
        if steps > 600:
            raise CalibrationError(f"median {median_at(lo)} never fell below target {target}")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = median_at(mid)
        if abs(m - target) <= window:
            return mid
        if m < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            raise CalibrationError(
                f"bisection collapsed at t={mid:.6g} with median {m} (target {target})"
            )
    raise CalibrationError(f"calibration did not settle; last median {m} (target {target})")


def write_series_csv(series, path):
    """Write a series as ``i,x`` rows; row 0 carries the initial duration."""
    with open(path, "w") as fh:
        fh.write("i,x\n")
        fh.write(f"0,{series.x0:.17g}\n")
        for i, v in enumerate(series.x, start=1):
            fh.write(f"{i},{v:.17g}\n")


def read_series_csv(path, t_span):
    """Read ``i,x`` rows back into a DurationSeries.

    A row with index 0 supplies the initial duration; otherwise the first
    data row is used as the initial value and the rest as observations.
    """
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    if data.shape == ():
        data = data.reshape(1)
    idx = np.asarray(data["i"], dtype=int)
    values = np.asarray(data["x"], dtype=float)
    if values.size < 2:
        raise ConfigError("need at least an initial duration and one observation")
    order = np.argsort(idx, kind="stable")
    idx, values = idx[order], values[order]
    return DurationSeries(x0=float(values[0]), x=values[1:], t_span=float(t_span))
