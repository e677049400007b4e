"""Core duration-model types and analytic constants.

Implements the multiplicative conditional-duration model

    x_i = psi_i * eps_i,    psi_i = omega + alpha * x_{i-1} + beta * psi_{i-1},

with unit-mean innovations, together with the analytic quantities attached to
it: the strict stationarity functional ``E[log(alpha*eps + beta)]``, the tail
index of the stationary durations, the event-count growth constant of the
unit-persistence (``alpha + beta = 1``) boundary, and the scaled Weibull
innovation family.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from . import _kernels
from .errors import ConfigError, FilterOverflowError, NonstationaryError, SolverError
from .rng import unit_exponential

EULER_GAMMA = 0.5772156649015329

#: tolerance for treating alpha + beta as exactly one
_BOUNDARY_TOL = 1e-14

_QUAD_OPTS = dict(epsabs=1e-12, epsrel=1e-12, limit=400)

PSI0_RULES = ("x0", "omega")


@dataclass(frozen=True)
class InnovationSpec:
    """Unit-mean innovation law: exponential or scaled Weibull.

    The Weibull draw with shape ``nu`` is scaled by ``Gamma(1 + 1/nu)`` so its
    mean is exactly one; ``nu = 1`` coincides with the exponential law.
    """

    law: str = "exponential"
    nu: float | None = None

    def __post_init__(self):
        if self.law not in ("exponential", "weibull"):
            raise ConfigError(f"unknown innovation law {self.law!r}")
        if self.law == "weibull":
            if self.nu is None or not (self.nu > 0) or not math.isfinite(self.nu):
                raise ConfigError("weibull innovations need a positive finite shape nu")
        elif self.nu is not None:
            raise ConfigError("nu is only meaningful for the weibull law")

    @classmethod
    def exponential(cls):
        return cls("exponential")

    @classmethod
    def weibull(cls, nu):
        return cls("weibull", float(nu))

    @property
    def shape(self):
        """Weibull shape; the exponential law is shape one."""
        return 1.0 if self.law == "exponential" else self.nu

    def variance(self):
        """Variance of the unit-mean law; equals 1 for the exponential."""
        if self.law == "exponential":
            return 1.0
        nu = self.nu
        return math.exp(math.lgamma(1.0 + 2.0 / nu) - 2.0 * math.lgamma(1.0 + 1.0 / nu)) - 1.0

    def density(self, x):
        """Probability density of the unit-mean law at ``x >= 0``."""
        x = np.asarray(x, dtype=float)
        nu = self.shape
        c = math.gamma(1.0 + 1.0 / nu)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(
                x > 0,
                nu * c**nu * x ** (nu - 1.0) * np.exp(-((x * c) ** nu)),
                0.0,
            )
        return out

    def sample(self, rng, size=None):
        """Draw from the law using inversion of the shared uniform stream."""
        e = unit_exponential(rng, size)
        if self.law == "exponential":
            return e
        nu = self.nu
        return e ** (1.0 / nu) / math.gamma(1.0 + 1.0 / nu)

    def expectation(self, g):
        """E[g(eps)] by adaptive quadrature.

        Uses the substitution ``eps = u**(1/nu) / Gamma(1 + 1/nu)`` with
        ``u`` standard exponential, which keeps the integrand exponentially
        damped for both laws.
        """
        nu = self.shape
        c = math.gamma(1.0 + 1.0 / nu)
        val, err = quad(lambda u: g(u ** (1.0 / nu) / c) * math.exp(-u), 0.0, np.inf, **_QUAD_OPTS)
        if not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
            raise SolverError(f"expectation quadrature did not converge (value {val}, error {err})")
        return val


def sample_innovation(innov, rng, size=None):
    """Draw from a unit-mean innovation law; see ``InnovationSpec.sample``."""
    return innov.sample(rng, size)


@dataclass(frozen=True)
class ParamTheta:
    """Full parameter vector (omega, alpha, beta) of the duration recursion."""

    omega: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("omega", "alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
        if self.omega <= 0:
            raise ConfigError(f"omega must be positive, got {self.omega}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")

    def as_array(self):
        return np.array([self.omega, self.alpha, self.beta], dtype=float)

    @property
    def persistence(self):
        return self.alpha + self.beta

    def mean_duration(self):
        """Stationary mean omega / (1 - alpha - beta); infinite at the boundary."""
        if self.persistence >= 1.0:
            return math.inf
        return self.omega / (1.0 - self.persistence)


@dataclass(frozen=True)
class ParamPhi:
    """Restricted parameterization (omega, alpha) with beta tied to 1 - alpha."""

    omega: float
    alpha: float

    def __post_init__(self):
        if not (self.omega > 0) or not math.isfinite(self.omega):
            raise ConfigError(f"omega must be positive and finite, got {self.omega}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_theta(self):
        beta = beta_complement(self.alpha)
        return ParamTheta(self.omega, self.alpha, beta)


def beta_complement(alpha):
    """Largest float beta with ``alpha + beta == 1.0`` exactly."""
    beta = 1.0 - alpha
    # one or two rounding fixups suffice in double precision
    for _ in range(4):
        excess = (alpha + beta) - 1.0
        if excess == 0.0:
            return beta
        beta -= excess
    raise SolverError(f"could not complement alpha={alpha} to the boundary")


@dataclass(frozen=True)
class ParamBounds:
    """Compact box for the optimizer, coordinatewise [lo, hi]."""

    omega: tuple = (1e-8, 1e6)
    alpha: tuple = (1e-8, 10.0)
    beta: tuple = (0.0, 0.99999)

    def contains(self, theta, margin=0.0):
        for name in ("omega", "alpha", "beta"):
            lo, hi = getattr(self, name)
            v = getattr(theta, name)
            if v < lo - margin or v > hi + margin:
                return False
        return True

    def clip(self, omega, alpha, beta):
        return (
            min(max(omega, self.omega[0]), self.omega[1]),
            min(max(alpha, self.alpha[0]), self.alpha[1]),
            min(max(beta, self.beta[0]), self.beta[1]),
        )


DEFAULT_BOUNDS = ParamBounds()


@dataclass
class DurationSeries:
    """Observed or simulated durations over a calendar span ``[0, t_span]``.

    ``x0`` is the pre-sample duration used to initialize the likelihood
    filter; the ``n`` observations are ``x[0], ..., x[n-1]``.
    """

    x0: float
    x: np.ndarray
    t_span: float

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        if self.x.ndim != 1 or self.x.size == 0:
            raise ConfigError("x must be a nonempty 1-d array of durations")
        if not (self.x0 > 0) or not math.isfinite(self.x0):
            raise ConfigError(f"x0 must be positive and finite, got {self.x0}")
        if not np.all(self.x > 0) or not np.all(np.isfinite(self.x)):
            bad = int(np.argmin((self.x > 0) & np.isfinite(self.x)))
            raise ConfigError(f"durations must be positive and finite (first bad index {bad})")
        if not (self.t_span > 0):
            raise ConfigError(f"t_span must be positive, got {self.t_span}")

    @property
    def n(self):
        return int(self.x.size)

    def scaled(self, lam):
        """Series in rescaled time units: x -> lam*x, x0 -> lam*x0, t -> lam*t."""
        return DurationSeries(self.x0 * lam, self.x * lam, self.t_span * lam)


def _psi0_value(theta, series, psi0_rule):
    if psi0_rule == "x0":
        return series.x0
    if psi0_rule == "omega":
        return theta.omega
    raise ConfigError(f"psi0_rule must be one of {PSI0_RULES}, got {psi0_rule!r}")


def psi_filter(theta, series, psi0_rule="x0"):
    """Run the conditional-duration recursion over a series.

    Parameters
    ----------
    theta : ParamTheta
    series : DurationSeries
    psi0_rule : {"x0", "omega"}
        Initialization ``psi_0 = x_0`` or ``psi_0 = omega``.

    Returns
    -------
    ndarray
        ``psi_1, ..., psi_n``; every entry is at least ``omega``.
    """
    psi0 = _psi0_value(theta, series, psi0_rule)
    psi = _kernels.psi_recursion(theta.omega, theta.alpha, theta.beta, series.x0, psi0, series.x)
    if not np.all(np.isfinite(psi)):
        raise FilterOverflowError(int(np.argmin(np.isfinite(psi))) + 1)
    return psi


@lru_cache(maxsize=4096)
def _stationarity_cached(alpha, beta, law, nu):
    innov = InnovationSpec(law, nu)
    if alpha == 0.0:
        return math.log(beta)
    return innov.expectation(lambda e: np.log(alpha * e + beta))


def stationarity_functional(alpha, beta, innov):
    """``E[log(alpha*eps + beta)]``; strictly stationary solutions need < 0."""
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ConfigError("alpha and beta must be nonnegative and not both zero")
    return _stationarity_cached(float(alpha), float(beta), innov.law, innov.nu)


@lru_cache(maxsize=4096)
def _tail_index_cached(alpha, beta, law, nu):
    innov = InnovationSpec(law, nu)
    if abs(alpha + beta - 1.0) < _BOUNDARY_TOL:
        return 1.0
    if stationarity_functional(alpha, beta, innov) >= 0:
        raise NonstationaryError(
            f"E[log(alpha*eps+beta)] >= 0 at alpha={alpha}, beta={beta}; no tail index exists"
        )

    def moment_gap(k):
        # powers in log space, capped so huge trial exponents keep a usable sign
        def g(e):
            return np.exp(np.minimum(k * np.log(alpha * e + beta), 700.0))

        return innov.expectation(g) - 1.0

    if alpha + beta > 1.0:
        lo, hi = 1e-6, 1.0
        if moment_gap(lo) >= 0:
            raise SolverError(f"no sign change on [{lo}, 1]: E[(a*eps+b)^{lo}] >= 1")
    else:
        lo, hi = 1.0, 64.0
        while moment_gap(hi) < 0:
            hi *= 2.0
            if hi > 1024.0:
                raise SolverError(
                    f"tail index bracket expansion failed at alpha={alpha}, beta={beta}: "
                    f"E[(a*eps+b)^1024] still below 1"
                )
    kappa = brentq(moment_gap, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=300)
    resid = moment_gap(kappa)
    if abs(resid) > 1e-10:
        raise SolverError(f"tail index residual {resid:.3e} exceeds 1e-10 at kappa={kappa}")
    return float(kappa)


def tail_index(alpha, beta, innov):
    """Tail index of the stationary durations.

    Solves ``E[(alpha*eps + beta)^kappa] = 1`` for the unique positive root.
    At the boundary ``alpha + beta = 1`` the root is exactly one and is
    returned without iteration.
    """
    if alpha <= 0:
        raise ConfigError("tail index needs alpha > 0")
    return _tail_index_cached(float(alpha), float(beta), innov.law, innov.nu)


@lru_cache(maxsize=4096)
def _c0_cached(alpha, law, nu):
    innov = InnovationSpec(law, nu)

    def integrand(e):
        a = 1.0 + alpha * (e - 1.0)
        # a*log(a) -> 0 as a -> 0, so clamp the log argument safely
        return np.where(a > 0, a * np.log(np.maximum(a, 1e-300)), 0.0)

    denom = innov.expectation(integrand)
    if not (denom > 0) or not math.isfinite(denom):
        raise SolverError(f"event growth denominator {denom} not positive finite")
    return denom


def c0_constant(omega, alpha, innov):
    """Growth constant of the event count at the unit-persistence boundary.

    With ``beta = 1 - alpha``, the number of events over ``[0, t]`` scales
    like ``(t / log t) / c0`` where

        c0 = omega / E[(1 + alpha*(eps-1)) * log(1 + alpha*(eps-1))].

    Homogeneous of degree one in ``omega``.
    """
    if not (omega > 0):
        raise ConfigError("omega must be positive")
    if not (0.0 < alpha <= 1.0):
        raise ConfigError("the boundary parameterization needs 0 < alpha <= 1")
    return omega / _c0_cached(float(alpha), innov.law, innov.nu)


def _weibull_sigma2(nu):
    return math.exp(math.lgamma(1.0 + 2.0 / nu) - 2.0 * math.lgamma(1.0 + 1.0 / nu)) - 1.0


def weibull_shape_for_variance(target_sigma2):
    """Invert the Weibull variance map: find nu with variance ``target_sigma2``.

    The variance decreases monotonically in the shape, so a bracketed root
    search applies; the result satisfies ``|variance(nu) - target| < 1e-8``.
    """
    if not (target_sigma2 > 0) or not math.isfinite(target_sigma2):
        raise ConfigError(f"target variance must be positive and finite, got {target_sigma2}")
    lo, hi = 1e-2, 1e2
    while _weibull_sigma2(hi) > target_sigma2:
        hi *= 10.0
        if hi > 1e12:
            raise SolverError(f"no shape reaches variance {target_sigma2}")
    while _weibull_sigma2(lo) < target_sigma2:
        lo /= 10.0
        if lo < 1e-12:
            raise SolverError(f"no shape reaches variance {target_sigma2}")
    nu = brentq(lambda v: _weibull_sigma2(v) - target_sigma2, lo, hi, xtol=1e-13, rtol=8.9e-16)
    resid = _weibull_sigma2(nu) - target_sigma2
    if abs(resid) > 1e-8:
        raise SolverError(f"variance inversion residual {resid:.3e} at nu={nu}")
    return float(nu)
