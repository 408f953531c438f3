"""Closed-form and quadrature ground truths.

OU oracles refer to ``dX = -X dt + sqrt(2) dW`` with ``f = g = x``, whose
autocovariance is ``k(t) = exp(-|t|)`` and ``rho = 1``.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate as spi

from .errors import ConfigError, QuadratureError


def ou_k(t):
    return np.exp(-np.abs(t))


def ou_gk_bias(T):
    if T < 0:
        raise ConfigError(f"T must be non-negative, got {T}")
    return -float(np.exp(-T))


def ou_gk_variance(T):
    if T < 0:
        raise ConfigError(f"T must be non-negative, got {T}")
    return 2.0 * T - 1.0 + float(np.exp(-2.0 * T))


def _quad(fn, a, b, points=None, epsrel=1e-8):
    with warnings.catch_warnings():
        warnings.simplefilter("error", spi.IntegrationWarning)
        try:
            val, _ = spi.quad(fn, a, b, points=points, epsrel=epsrel, epsabs=1e-13, limit=500)
        except spi.IntegrationWarning as exc:
            raise QuadratureError(str(exc))
    return val


def ou_he_mean(T, w):
    """``E`` of the OU half-Einstein estimator at horizon ``T``."""
    if not T > 0:
        raise ConfigError(f"T must be positive, got {T}")
    pts = [0.5 * T] if T > 0 else None
    return _quad(lambda th: (1.0 - th / T) * float(w(th / T)) * np.exp(-th), 0.0, T, points=pts)


def ou_he_bias(T, w):
    return ou_he_mean(T, w) - 1.0


# ----------------------------------------------------------------------------
# Isserlis fourth moment in closed form


def _phi1(d):
    # int_0^1 exp(d t) dt for d <= 0
    small = np.abs(d) < 0.05
    out = np.empty_like(d)
    ds = d[small]
    out[small] = 1 + ds / 2 + ds**2 / 6 + ds**3 / 24 + ds**4 / 120 + ds**5 / 720 + ds**6 / 5040
    dl = d[~small]
    out[~small] = np.expm1(dl) / dl
    return out


def _phi2(d):
    # int_0^1 t exp(d t) dt for d <= 0
    small = np.abs(d) < 0.05
    out = np.empty_like(d)
    ds = d[small]
    out[small] = 0.5 + ds / 3 + ds**2 / 8 + ds**3 / 30 + ds**4 / 144 + ds**5 / 840 + ds**6 / 5760
    dl = d[~small]
    out[~small] = (np.exp(dl) * (dl - 1.0) + 1.0) / dl**2
    return out


def _overlap(r, a, b):
    # length of {s in [0, a] : s + r in [0, b]}
    return np.maximum(0.0, np.minimum(a, b - r) - np.maximum(0.0, -r))


def _pair_integral(a, b, c1, c2):
    """``int_{-a}^{b} overlap(r) exp(-|r + c1| - |r + c2|) dr``, elementwise.

    Both factors are piecewise linear in ``r``; each piece is integrated
    exactly.
    """
    lo, hi = -a, b
    bps = np.stack([lo, hi, np.zeros_like(a), b - a, -c1, -c2], axis=-1)
    bps = np.clip(bps, lo[..., None], hi[..., None])
    bps.sort(axis=-1)
    total = np.zeros_like(a)
    for i in range(bps.shape[-1] - 1):
        l, r = bps[..., i], bps[..., i + 1]
        h = r - l
        live = h > 0
        if not live.any():
            continue
        ml, mr = _overlap(l, a, b), _overlap(r, a, b)
        el = -np.abs(l + c1) - np.abs(l + c2)
        er = -np.abs(r + c1) - np.abs(r + c2)
        # integrate from the end with the larger exponent so the rate is <= 0
        flip = er > el
        e0 = np.where(flip, er, el)
        m0 = np.where(flip, mr, ml)
        m1 = np.where(flip, ml, mr)
        d = -np.abs(er - el)
        piece = h * np.exp(e0) * (m0 * _phi1(d) + (m1 - m0) * _phi2(d))
        total += np.where(live, piece, 0.0)
    return total


def ou_fourth_moment(u, v, T):
    """``I(u, v) = E[A(u) A(v)]`` with ``A(u) = int_0^{T-u} X_s X_{s+u} ds``."""
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    a, b = T - u, T - v
    zero = np.zeros_like(u)
    return a * b * np.exp(-u - v) + _pair_integral(a, b, v - u, zero) + _pair_integral(a, b, v, -u)


def _panels(breaks, n_per):
    """Composite Gauss-Legendre nodes on rows of sorted breakpoints.

    ``breaks`` is ``(m, p)``; every row gets ``n_per`` nodes on each of its
    ``p - 1`` panels (empty panels get zero weight).
    """
    z, wt = np.polynomial.legendre.leggauss(n_per)
    lo, hi = breaks[:, :-1, None], breaks[:, 1:, None]
    nodes = 0.5 * (hi - lo) * z + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * wt
    m = breaks.shape[0]
    return nodes.reshape(m, -1), weights.reshape(m, -1)


def _he_second_moment(T, w, n):
    cut = min(20.0, T)
    per = max(8, n // 3)
    ub = np.sort(np.array([[0.0, cut, 0.5 * T, T]]), axis=1)
    u, wu = _panels(ub, per)
    u, wu = u[0], wu[0]
    span = T - u
    cb = np.stack([np.zeros_like(u), np.minimum(cut, span), np.clip(0.5 * T - u, 0.0, span), span], axis=1)
    c, wc = _panels(np.sort(cb, axis=1), per)
    v = u[:, None] + c
    vals = w(v / T) * ou_fourth_moment(u[:, None], v, T)
    inner = np.sum(wc * vals, axis=1)
    return 2.0 * float(np.sum(wu * w(u / T) * inner)) / T**2


def ou_he_variance(T, w, n_nodes=200, rtol=1e-4):
    """Variance of the OU half-Einstein estimator (one replica) at horizon ``T``.

    ``(1/T^2) int int w(u/T) w(v/T) I(u, v) du dv - mean^2`` with ``I`` in
    closed form and the outer integral on composite Gauss-Legendre panels in
    ``(u, v - u)``.  The result is accepted when ``n_nodes`` and ``2 n_nodes``
    nodes per dimension agree to ``rtol``.
    """
    if not T > 0:
        raise ConfigError(f"T must be positive, got {T}")
    mean = ou_he_mean(T, w)
    coarse = _he_second_moment(T, w, n_nodes) - mean**2
    fine = _he_second_moment(T, w, 2 * n_nodes) - mean**2
    if not np.isfinite(fine) or abs(fine - coarse) > rtol * max(abs(fine), 1e-300):
        if abs(fine - coarse) > 1e-14:
            raise QuadratureError(
                f"HE variance quadrature not converged at T={T}: {coarse!r} vs {fine!r}"
            )
    return fine


# ----------------------------------------------------------------------------
# Change-of-variables identity


def cov_identity_check(test_f, T, scaled=False):
    """Residual of ``int_0^T int_0^t f(t-s) ds dt = int_0^T f(th) (T-th) dth``.

    With ``scaled`` the lag is measured in units of ``T``:
    ``int_0^T int_0^t f((t-s)/T) ds dt = T^2 int_0^1 f(v) (1-v) dv``.
    """
    if scaled:
        lhs = _dblquad(lambda s, t: test_f((t - s) / T), T)
        rhs = T**2 * _quad(lambda v: test_f(v) * (1.0 - v), 0.0, 1.0, epsrel=1e-13)
    else:
        lhs = _dblquad(lambda s, t: test_f(t - s), T)
        rhs = _quad(lambda th: test_f(th) * (T - th), 0.0, T, epsrel=1e-13)
    return abs(lhs - rhs)


def _dblquad(fn, T):
    val, _ = spi.dblquad(fn, 0.0, T, 0.0, lambda t: t, epsabs=1e-14, epsrel=1e-13)
    return val


# ----------------------------------------------------------------------------
# Homogenized coefficients of the fast/slow example


@dataclass(frozen=True)
class HomogenizedCoefficients:
    F: np.ndarray
    A0: np.ndarray
    AAt: np.ndarray


def _fast_dual(alpha):
    # -L^{-1}(c . y) = a . y with a = -D^{-T} c, where D is the fast drift matrix
    D = np.array([[-1.0, -alpha], [alpha, -1.0]])
    return lambda c: -np.linalg.solve(D.T, np.asarray(c, dtype=float))


def slow_coefficients(x):
    """Rows ``c_i`` with ``f_i(x, y) = c_i . y``."""
    x1, x2 = x[0], x[1]
    return np.array([[1.0, 0.0], [0.0, 1.0], [-x2, x1]])


def homogenized_oracle(alpha, x):
    """Effective drift ``F(x)`` and diffusion ``A0(x)`` of the slow variables.

    ``A0_ij = <f_i, -L^{-1} f_j>`` and ``F_i = sum_j <f_j, -L^{-1} h_ij>``
    with ``h_ij = d f_i / d x_j``, under ``mu = N(0, I/2)``.
    """
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=float)
    solve = _fast_dual(alpha)
    C = slow_coefficients(x)
    cov = 0.5 * np.eye(2)
    duals = np.array([solve(c) for c in C])
    A0 = C @ cov @ duals.T
    # only f_3 depends on x: d f_3/d x_1 = y_2, d f_3/d x_2 = -y_1
    H3 = np.array([[0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]])
    F = np.zeros(3)
    F[2] = sum(C[j] @ cov @ solve(H3[j]) for j in range(3))
    return HomogenizedCoefficients(F, A0, A0 + A0.T)


# ----------------------------------------------------------------------------
# Export


def oracle_csv(ts, values):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["T", "value"])
    for t, v in zip(ts, values):
        writer.writerow([repr(float(t)), repr(float(v))])
    return buf.getvalue()


def ou_oracle_curve(quantity, estimator, ts, w=None):
    """Oracle values on a grid of horizons: ``quantity`` in {bias, variance}."""
    if estimator == "gk":
        fn = ou_gk_bias if quantity == "bias" else ou_gk_variance
        return np.array([fn(t) for t in ts])
    if estimator == "he":
        if w is None:
            raise ConfigError("half-Einstein oracle needs a weight")
        fn = ou_he_bias if quantity == "bias" else ou_he_variance
        return np.array([fn(t, w) for t in ts])
    raise ConfigError(f"unknown estimator {estimator!r}")
