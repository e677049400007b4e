"""Compiled inner loops for the sequential duration recursions.

The conditional-duration filter, its derivative recursions, and the
simulation step all carry state from one observation to the next, so they
are written as numba kernels. Everything here works on plain float64 scalars
and contiguous arrays; validation and shaping live in the calling modules.

The recursion is evaluated as ``(omega + alpha*xprev) + beta*psiprev`` in
every kernel so that simulated and filtered paths agree bit for bit.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def psi_recursion(omega, alpha, beta, x0, psi0, x):
    n = x.shape[0]
    psi = np.empty(n)
    xprev = x0
    prev = psi0
    for i in range(n):
        prev = omega + alpha * xprev + beta * prev
        psi[i] = prev
        xprev = x[i]
    return psi


@njit(cache=True)
def simulate_chunk(omega, alpha, beta, eps, xprev, psiprev, out):
    """Advance the recursion over one block of innovations.

    Writes durations into ``out`` and returns the updated ``(xprev, psiprev)``
    state, so spans of arbitrary length can be generated block by block.
    """
    m = eps.shape[0]
    for i in range(m):
        psiprev = omega + alpha * xprev + beta * psiprev
        xprev = psiprev * eps[i]
        out[i] = xprev
    return xprev, psiprev


@njit(cache=True)
def loglik_kernel(omega, alpha, beta, x0, psi0, x):
    """Exponential quasi-log-likelihood; returns (value, finite_flag)."""
    n = x.shape[0]
    ll = 0.0
    xprev = x0
    psi = psi0
    for i in range(n):
        psi = omega + alpha * xprev + beta * psi
        if not np.isfinite(psi) or psi <= 0.0:
            return 0.0, False
        ll -= np.log(psi) + x[i] / psi
        xprev = x[i]
    return ll, True


@njit(cache=True)
def loglik_grad_kernel(omega, alpha, beta, x0, psi0, dpsi0_omega, x, grad):
    """Log-likelihood and its gradient in (omega, alpha, beta).

    ``dpsi0_omega`` is 1.0 when psi_0 = omega and 0.0 when psi_0 is a fixed
    initial duration. Returns (value, finite_flag); the gradient is written
    into ``grad``.
    """
    n = x.shape[0]
    ll = 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    xprev = x0
    psi = psi0
    dw = dpsi0_omega
    da = 0.0
    db = 0.0
    for i in range(n):
        db = psi + beta * db
        dw = 1.0 + beta * dw
        da = xprev + beta * da
        psi = omega + alpha * xprev + beta * psi
        if not np.isfinite(psi) or psi <= 0.0:
            return 0.0, False
        xi = x[i]
        e = xi / psi
        ll -= np.log(psi) + e
        c = (e - 1.0) / psi
        g0 += c * dw
        g1 += c * da
        g2 += c * db
        xprev = xi
    grad[0] = g0
    grad[1] = g1
    grad[2] = g2
    return ll, True


@njit(cache=True)
def score_info_kernel(omega, alpha, beta, x0, psi0, dpsi0_omega, x, score, info, opg):
    """One pass collecting log-likelihood, score, information and OPG sums.

    The information is the negative Hessian of the log-likelihood. Second
    derivatives of the filter enter only through the (omega, beta),
    (alpha, beta) and (beta, beta) slots; all others are identically zero.
    Returns (value, finite_flag).
    """
    n = x.shape[0]
    ll = 0.0
    xprev = x0
    psi = psi0
    dw = dpsi0_omega
    da = 0.0
    db = 0.0
    hwb = 0.0
    hab = 0.0
    hbb = 0.0
    for k in range(3):
        score[k] = 0.0
        for j in range(3):
            info[k, j] = 0.0
            opg[k, j] = 0.0
    for i in range(n):
        hwb = dw + beta * hwb
        hab = da + beta * hab
        hbb = 2.0 * db + beta * hbb
        db = psi + beta * db
        dw = 1.0 + beta * dw
        da = xprev + beta * da
        psi = omega + alpha * xprev + beta * psi
        if not np.isfinite(psi) or psi <= 0.0:
            return 0.0, False
        xi = x[i]
        e = xi / psi
        ll -= np.log(psi) + e
        u = 1.0 / psi
        c = (e - 1.0) * u
        s0 = c * dw
        s1 = c * da
        s2 = c * db
        score[0] += s0
        score[1] += s1
        score[2] += s2
        opg[0, 0] += s0 * s0
        opg[0, 1] += s0 * s1
        opg[0, 2] += s0 * s2
        opg[1, 1] += s1 * s1
        opg[1, 2] += s1 * s2
        opg[2, 2] += s2 * s2
        w1 = (1.0 - e) * u
        w2 = (2.0 * e - 1.0) * u * u
        info[0, 0] += w2 * dw * dw
        info[0, 1] += w2 * dw * da
        info[0, 2] += w2 * dw * db + w1 * hwb
        info[1, 1] += w2 * da * da
        info[1, 2] += w2 * da * db + w1 * hab
        info[2, 2] += w2 * db * db + w1 * hbb
        xprev = xi
    for k in range(3):
        for j in range(k):
            info[k, j] = info[j, k]
            opg[k, j] = opg[j, k]
    return ll, True
