"""Negative binomial log-likelihood in the NB1 and NB2 parametrizations.

Both parametrizations are written in terms of the log mean ``eta`` and the
log dispersion ``zeta``:

* NB1 (linear):    variance = mu * (1 + phi), size = mu / phi, prob = 1 / (1 + phi)
* NB2 (quadratic): variance = mu + mu**2 / phi, size = phi

Internally both reduce to a common form in ``rho = log(size)`` and
``kappa = logit(prob)``, which are linear in ``(eta, zeta)``.  That keeps the
derivative code (needed up to third order by the Laplace gradient) in one
place.
"""

from __future__ import annotations

import math
from enum import Enum

import numba as nb
import numpy as np
from scipy.special import betaln, digamma, polygamma


class Parametrization(str, Enum):
    NB1 = "nb1"
    NB2 = "nb2"
    GAUSSIAN_AR1 = "gaussian_ar1"

    @classmethod
    def parse(cls, value) -> "Parametrization":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "nb1_linear": cls.NB1, "linear": cls.NB1,
            "nb2_quadratic": cls.NB2, "quadratic": cls.NB2,
        }
        if key in aliases:
            return aliases[key]
        return cls(key)


# d(rho, kappa) / d(eta, zeta)
_JACOBIANS = {
    Parametrization.NB1: np.array([[1.0, -1.0], [0.0, -1.0]]),
    Parametrization.NB2: np.array([[0.0, 1.0], [-1.0, 1.0]]),
}

# beyond this size the digamma differences switch to asymptotic forms
_LARGE_SIZE = 1e4


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _lgamma_ratio(y, r):
    """lgamma(y + r) - lgamma(r) - lgamma(y + 1), stable for huge r."""
    return -betaln(r, y + 1.0) - np.log(r + y)


def _psi_differences(y, r):
    """Return psi_k(y + r) - psi_k(r) for k = 0, 1, 2.

    For large ``r`` the naive differences lose all precision, so an
    asymptotic expansion written in cancellation-free form is used instead.
    """
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    a0 = np.empty(np.broadcast(y, r).shape)
    a1 = np.empty_like(a0)
    a2 = np.empty_like(a0)
    y, r = np.broadcast_arrays(y, r)
    big = r > _LARGE_SIZE
    small = ~big
    if small.any():
        ys, rs = y[small], r[small]
        a0[small] = digamma(ys + rs) - digamma(rs)
        a1[small] = polygamma(1, ys + rs) - polygamma(1, rs)
        a2[small] = polygamma(2, ys + rs) - polygamma(2, rs)
    if big.any():
        yb, rb = y[big], r[big]
        s = rb + yb
        # psi(x) ~ log x - 1/(2x) - 1/(12x^2)
        a0[big] = (np.log1p(yb / rb) + yb / (2.0 * rb * s)
                   + yb * (2.0 * rb + yb) / (12.0 * rb**2 * s**2))
        # psi1(x) ~ 1/x + 1/(2x^2) + 1/(6x^3)
        d1 = -yb / (rb * s)
        d2 = -yb * (2.0 * rb + yb) / (rb**2 * s**2)
        d3 = -yb * (3.0 * rb**2 + 3.0 * rb * yb + yb**2) / (rb**3 * s**3)
        a1[big] = d1 + 0.5 * d2 + d3 / 6.0
        # psi2(x) ~ -1/x^2 - 1/x^3 - 1/(2x^4)
        d4 = -yb * (2.0 * rb + yb) * (2.0 * rb**2 + 2.0 * rb * yb + yb**2) / (rb**4 * s**4)
        a2[big] = -d2 - d3 - 0.5 * d4
    return a0, a1, a2


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to negative binomial likelihood")


def nb_log_pmf(y, mu, phi, parametrization="nb1"):
    """Exact log probability mass of a negative binomial count.

    ``phi`` is the dispersion parameter of the chosen parametrization.
    """
    par = Parametrization.parse(parametrization)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    _check_finite(y, mu, phi)
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise ValueError("mu and phi must be positive")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("y must be a nonnegative integer")
    return loglik_terms(y, np.log(mu), np.log(phi), par)


def loglik_terms(y, eta, zeta, parametrization):
    """Per-observation log-likelihood given log mean and log dispersion."""
    par = Parametrization.parse(parametrization)
    y, eta, zeta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float), np.asarray(zeta, float))
    shape = y.shape
    y, eta, zeta = (np.ascontiguousarray(a.ravel()) for a in (y, eta, zeta))
    ll = np.empty(y.shape[0])
    _derivative_kernel(y, eta, zeta, _JACOBIANS[par], 0, ll, np.empty((0, 2)), np.empty((0, 2, 2)),
                       np.empty((0, 2, 2, 2)))
    return ll.reshape(shape)


def _to_rho_kappa(eta, zeta, par):
    J = _JACOBIANS[par]
    rho = J[0, 0] * eta + J[0, 1] * zeta
    kappa = J[1, 0] * eta + J[1, 1] * zeta
    return rho, kappa


def loglik_derivatives(y, eta, zeta, parametrization, order=3):
    """Log-likelihood and its derivatives with respect to (eta, zeta).

    Returns ``(ll, grad, hess, third)`` with shapes ``(n,)``, ``(n, 2)``,
    ``(n, 2, 2)`` and ``(n, 2, 2, 2)``; ``third`` is None when ``order < 3``.
    """
    par = Parametrization.parse(parametrization)
    y = np.ascontiguousarray(y, dtype=float)
    eta = np.ascontiguousarray(np.broadcast_to(eta, y.shape), dtype=float)
    zeta = np.ascontiguousarray(np.broadcast_to(zeta, y.shape), dtype=float)
    n = y.shape[0]
    ll = np.empty(n)
    grad = np.empty((n, 2))
    hess = np.empty((n, 2, 2))
    third = np.empty((n, 2, 2, 2)) if order >= 3 else np.empty((0, 2, 2, 2))
    _derivative_kernel(y, eta, zeta, _JACOBIANS[par], order, ll, grad, hess, third)
    return ll, grad, hess, (third if order >= 3 else None)


def loglik_derivatives_reference(y, eta, zeta, parametrization, order=3):
    """Same as :func:`loglik_derivatives`, computed with scipy special functions."""
    par = Parametrization.parse(parametrization)
    y = np.asarray(y, dtype=float)
    rho, kappa = _to_rho_kappa(np.asarray(eta, float), np.asarray(zeta, float), par)
    r = np.exp(rho)
    sig = np.exp(_log_sigmoid(kappa))
    one_m_sig = np.exp(_log_sigmoid(-kappa))
    logp = _log_sigmoid(kappa)

    a0, a1, a2 = _psi_differences(y, r)
    ll = _lgamma_ratio(y, r) + r * logp + y * _log_sigmoid(-kappa)

    n = y.shape[0]
    g = np.empty((n, 2))
    g[:, 0] = r * a0 + r * logp
    g[:, 1] = r * one_m_sig - y * sig

    pq = sig * one_m_sig
    h = np.empty((n, 2, 2))
    h[:, 0, 0] = r * a0 + r * r * a1 + r * logp
    h[:, 0, 1] = h[:, 1, 0] = r * one_m_sig
    h[:, 1, 1] = -(r + y) * pq

    J = _JACOBIANS[par]
    grad = g @ J
    hess = np.einsum("nij,ia,jb->nab", h, J, J)
    third = None
    if order >= 3:
        t = np.empty((n, 2, 2, 2))
        t[:, 0, 0, 0] = r * a0 + 3.0 * r * r * a1 + r**3 * a2 + r * logp
        t[:, 0, 0, 1] = t[:, 0, 1, 0] = t[:, 1, 0, 0] = r * one_m_sig
        t[:, 0, 1, 1] = t[:, 1, 0, 1] = t[:, 1, 1, 0] = -r * pq
        t[:, 1, 1, 1] = -(r + y) * pq * (one_m_sig - sig)
        third = np.einsum("nijk,ia,jb,kc->nabc", t, J, J, J)
    return ll, grad, hess, third


# polygamma recurrences shift the argument up to this value before the asymptotic series
_SHIFT = 10.0


@nb.njit(cache=True)
def _polygamma012(x):
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    while x < _SHIFT:
        ix = 1.0 / x
        a0 -= ix
        a1 += ix * ix
        a2 -= 2.0 * ix * ix * ix
        x += 1.0
    ix = 1.0 / x
    i2 = ix * ix
    p0 = math.log(x) - 0.5 * ix - i2 * (1.0 / 12 - i2 * (1.0 / 120 - i2 * (1.0 / 252 - i2 * (1.0 / 240 - i2 / 132))))
    p1 = ix + 0.5 * i2 + ix * i2 * (1.0 / 6 - i2 * (1.0 / 30 - i2 * (1.0 / 42 - i2 * (1.0 / 30 - i2 * 5.0 / 66))))
    p2 = -i2 - ix * i2 - i2 * i2 * (0.5 - i2 * (1.0 / 6 - i2 * (1.0 / 6 - i2 * (0.3 - i2 * 5.0 / 6))))
    return p0 + a0, p1 + a1, p2 + a2


@nb.njit(cache=True)
def _log_sig(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@nb.njit(cache=True)
def _derivative_kernel(y, eta, zeta, J, order, ll, grad, hess, third):
    n = y.shape[0]
    for i in range(n):
        yi = y[i]
        rho = J[0, 0] * eta[i] + J[0, 1] * zeta[i]
        kap = J[1, 0] * eta[i] + J[1, 1] * zeta[i]
        r = math.exp(rho)
        logp = _log_sig(kap)
        logq = _log_sig(-kap)
        sig = math.exp(logp)
        oms = math.exp(logq)
        s = r + yi
        if r > _LARGE_SIZE:
            # lgamma(y + r) - lgamma(r) by Stirling differences
            lgr = ((r - 0.5) * math.log1p(yi / r) + yi * math.log(s) - yi
                   + 1.0 / (12.0 * s) - 1.0 / (12.0 * r) - 1.0 / (360.0 * s ** 3) + 1.0 / (360.0 * r ** 3))
        else:
            lgr = math.lgamma(s) - math.lgamma(r)
        ll[i] = lgr - math.lgamma(yi + 1.0) + r * logp + yi * logq
        if order == 0:
            continue
        if r > _LARGE_SIZE:
            a0 = (math.log1p(yi / r) + yi / (2.0 * r * s) + yi * (2.0 * r + yi) / (12.0 * r * r * s * s))
            d1 = -yi / (r * s)
            d2 = -yi * (2.0 * r + yi) / (r * r * s * s)
            d3 = -yi * (3.0 * r * r + 3.0 * r * yi + yi * yi) / (r ** 3 * s ** 3)
            d4 = -yi * (2.0 * r + yi) * (2.0 * r * r + 2.0 * r * yi + yi * yi) / (r ** 4 * s ** 4)
            a1 = d1 + 0.5 * d2 + d3 / 6.0
            a2 = -d2 - d3 - 0.5 * d4
        else:
            p0s, p1s, p2s = _polygamma012(s)
            p0r, p1r, p2r = _polygamma012(r)
            a0 = p0s - p0r
            a1 = p1s - p1r
            a2 = p2s - p2r
        g0 = r * a0 + r * logp
        g1 = r * oms - yi * sig
        grad[i, 0] = g0 * J[0, 0] + g1 * J[1, 0]
        grad[i, 1] = g0 * J[0, 1] + g1 * J[1, 1]
        pq = sig * oms
        h00 = r * a0 + r * r * a1 + r * logp
        h01 = r * oms
        h11 = -s * pq
        for a in range(2):
            for b in range(a, 2):
                v = (J[0, a] * J[0, b] * h00 + (J[0, a] * J[1, b] + J[1, a] * J[0, b]) * h01
                     + J[1, a] * J[1, b] * h11)
                hess[i, a, b] = v
                hess[i, b, a] = v
        if order >= 3:
            t000 = r * a0 + 3.0 * r * r * a1 + r ** 3 * a2 + r * logp
            t001 = r * oms
            t011 = -r * pq
            t111 = -s * pq * (oms - sig)
            for a in range(2):
                ua, wa = J[0, a], J[1, a]
                for b in range(a, 2):
                    ub, wb = J[0, b], J[1, b]
                    for c in range(b, 2):
                        uc, wc = J[0, c], J[1, c]
                        v = (ua * ub * uc * t000
                             + (ua * ub * wc + ua * wb * uc + wa * ub * uc) * t001
                             + (ua * wb * wc + wa * ub * wc + wa * wb * uc) * t011
                             + wa * wb * wc * t111)
                        third[i, a, b, c] = v
                        third[i, a, c, b] = v
                        third[i, b, a, c] = v
                        third[i, b, c, a] = v
                        third[i, c, a, b] = v
                        third[i, c, b, a] = v


def variance(mu, phi, parametrization):
    """Conditional variance implied by mean and dispersion."""
    par = Parametrization.parse(parametrization)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if par is Parametrization.NB1:
        return mu * (1.0 + phi)
    if par is Parametrization.NB2:
        return mu + mu**2 / phi
    raise ValueError(f"no count variance for {par.value}")


def size_prob(mu, phi, parametrization):
    """Map (mu, phi) to the (size, success probability) of numpy's sampler."""
    par = Parametrization.parse(parametrization)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if par is Parametrization.NB1:
        return mu / phi, 1.0 / (1.0 + phi)
    if par is Parametrization.NB2:
        return phi, phi / (phi + mu)
    raise ValueError(f"no count distribution for {par.value}")
