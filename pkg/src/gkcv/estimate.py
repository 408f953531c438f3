"""Green-Kubo and half-Einstein estimators, control-variate variants, static terms.

All estimators work on a :class:`~gkcv.integrate.TrajectoryBatch` and on named
observable series.  The conventions for series names are

``f``, ``g``
    the observables of ``rho = <f, -L^{-1} g>``;
``<g>_fwd``
    ``g + L^Delta psi_g`` (forward control variate), e.g. ``g_fwd``;
``<f>_adj``
    ``f + L*^Delta psi_f*`` (adjoint control variate), e.g. ``f_adj``; for
    Green-Kubo it is only needed at ``t = 0``.

A correction estimator only covers ``<f~, -L^{-1} g~>`` with the corrected
observables; the static part is added by the caller.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import integrate as spi

from .errors import ConfigError, MissingSeriesError, QuadratureError, ReplicaFailure
from .models import apply_adjoint_generator_fd, apply_generator_fd

VARIANCE_STRIDE = 10

ESTIMATORS = (
    "gk", "gk_forward", "gk_adjoint", "gk_combined",
    "he", "he_forward", "he_adjoint", "he_combined",
)

FWD = "_fwd"
ADJ = "_adj"

_CORRECTED = {
    "plain": (False, False),
    "forward": (False, True),
    "adjoint": (True, False),
    "combined": (True, True),
}


def series_names(variant, f="f", g="g"):
    """Series used by an estimator variant for the pair ``(f, g)``."""
    adj, fwd = _CORRECTED[variant]
    return (f + ADJ if adj else f), (g + FWD if fwd else g)


def split_name(name):
    family, _, variant = name.partition("_")
    if family not in ("gk", "he") or (variant or "plain") not in _CORRECTED:
        raise ConfigError(f"unknown estimator {name!r}")
    return family, variant or "plain"


# ----------------------------------------------------------------------------
# Weight functions


@dataclass(frozen=True)
class WeightFunction:
    """Lag weight ``w`` on ``[0, 1)``; zero outside."""

    name: str
    fn: object

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        inside = (u >= 0.0) & (u < 1.0)
        out = np.zeros(u.shape)
        out[inside] = self.fn(u[inside])
        return out if out.ndim else float(out)

    def eval(self, u):
        return self(u)


def _parzen(u):
    return np.where(u <= 0.5, 1.0 - 6.0 * u**2 + 6.0 * u**3, 2.0 * (1.0 - u) ** 3)


_CATALOG = {
    "constant": lambda u: np.ones_like(u),
    "bartlett": lambda u: 1.0 - u,
    "parzen": _parzen,
    "tukey_hanning": lambda u: 0.5 * (1.0 + np.cos(np.pi * u)),
    "parzen_riesz": lambda u: 1.0 - u**2,
    "parzen_geometric": lambda u: 1.0 / (1.0 + u),
    "parzen_cauchy": lambda u: 1.0 / (1.0 + u**2),
}


def weight_catalog():
    return [WeightFunction(name, fn) for name, fn in _CATALOG.items()]


def get_weight(name):
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in _CATALOG:
        raise ConfigError(f"unknown weight {name!r}; choose from {sorted(_CATALOG)}")
    return WeightFunction(key, _CATALOG[key])


def divergent_weight(clip=1e-6):
    """``1 / (1 - u)`` with the denominator clipped at ``clip``."""
    return WeightFunction("divergent", lambda u: 1.0 / np.maximum(1.0 - u, clip))


def zeta(w):
    """``int_0^1 (1 - v) w(v)^2 dv`` by adaptive quadrature (rel. tol 1e-8)."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", spi.IntegrationWarning)
        try:
            val, _ = spi.quad(lambda v: (1.0 - v) * w(v) ** 2, 0.0, 1.0,
                              points=[0.5], epsrel=1e-8, epsabs=1e-14, limit=200)
        except spi.IntegrationWarning as exc:
            raise QuadratureError(f"zeta quadrature failed for weight {getattr(w, 'name', w)!r}: {exc}")
    return val


# ----------------------------------------------------------------------------
# Reports


@dataclass
class EstimatorReport:
    estimator: str
    rho_hat: float
    variance_vs_time: np.ndarray
    runtime_seconds: float
    cost: float = field(init=False)
    replica_values: np.ndarray = field(default=None, repr=False)
    mean_vs_time: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.variance_vs_time = np.asarray(self.variance_vs_time, dtype=float).reshape(-1, 2)
        self.cost = self.runtime_seconds * self.final_variance

    @property
    def final_variance(self):
        return float(self.variance_vs_time[-1, 1]) if len(self.variance_vs_time) else float("nan")

    @property
    def n_replicas(self):
        return 0 if self.replica_values is None else len(self.replica_values)

    @property
    def std_error(self):
        return float(np.sqrt(self.final_variance / self.n_replicas)) if self.n_replicas > 1 else float("nan")

    def with_runtime(self, seconds):
        rep = EstimatorReport(self.estimator, self.rho_hat, self.variance_vs_time, float(seconds),
                              self.replica_values, self.mean_vs_time)
        return rep

    def shifted(self, offset, name=None):
        """Report for ``offset + estimator`` (adds a deterministic static term)."""
        mean = None if self.mean_vs_time is None else self.mean_vs_time + np.array([0.0, offset])
        values = None if self.replica_values is None else self.replica_values + offset
        return EstimatorReport(name or self.estimator, offset + self.rho_hat, self.variance_vs_time,
                               self.runtime_seconds, values, mean)

    def to_dict(self):
        def num(x):
            return None if not np.isfinite(x) else float(x)

        return {
            "estimator": self.estimator,
            "rho_hat": num(self.rho_hat),
            "variance_vs_time": [[float(t), num(v)] for t, v in self.variance_vs_time],
            "runtime_seconds": float(self.runtime_seconds),
            "cost": num(self.cost),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    def variance_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "variance"])
        for t, v in self.variance_vs_time:
            writer.writerow([repr(float(t)), repr(float(v)) if np.isfinite(v) else "undefined (K=1)"])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# Core accumulation


def checkpoints(n_points, stride=VARIANCE_STRIDE):
    last = n_points - 1
    idx = list(range(stride, last + 1, stride))
    if not idx or idx[-1] != last:
        idx.append(last)
    return np.array(idx, dtype=np.int64)


def _pairs(f, g, pairs):
    if pairs is None:
        return [(f, g)]
    return list(pairs)


def _need(trajs, name, at_zero=False):
    if name in trajs.series:
        arr = trajs.series[name][:, 0] if at_zero else trajs.series[name]
    elif at_zero and name in trajs.initial:
        arr = trajs.initial[name]
    else:
        arr = None
    if arr is not None:
        bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
        if bad.any():
            raise ReplicaFailure(int(np.flatnonzero(bad)[0]), name)
        return arr
    where = "initial value" if at_zero else "series"
    raise MissingSeriesError(f"trajectories carry no {where} {name!r}")


def _check_nonempty(trajs):
    if len(trajs) == 0:
        raise ConfigError("no replicas given")


def report_from_partials(name, dt, idx, partial, started=None):
    """Build a report from per-replica partial estimates ``(K, C)`` at checkpoints ``idx``."""
    started = time.perf_counter() if started is None else started
    K = partial.shape[0]
    times = idx * dt
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var = partial.var(axis=0, ddof=1) if K > 1 else np.full(len(idx), np.nan)
    values = partial[:, -1]
    return EstimatorReport(
        name,
        float(values.mean()),
        np.column_stack([times, var]),
        time.perf_counter() - started,
        values,
        np.column_stack([times, partial.mean(axis=0)]),
    )


def gk_partials(trajs, f="f", g="g", pairs=None, stride=VARIANCE_STRIDE):
    """Per-replica GK estimates truncated at each checkpoint time.

    ``f(X_0) * int_0^t g(X_s) ds`` with the trapezoidal rule; summed over
    ``pairs`` when several ``(f, g)`` names are given.
    """
    _check_nonempty(trajs)
    dt = trajs.dt
    out = None
    idx = None
    for fk, gk in _pairs(f, g, pairs):
        f0 = _need(trajs, fk, at_zero=True)
        gs = _need(trajs, gk)
        idx = checkpoints(gs.shape[1], stride)
        cum = np.cumsum(gs, axis=1)
        integ = dt * (cum[:, idx] - 0.5 * gs[:, :1] - 0.5 * gs[:, idx])
        part = f0[:, None] * integ
        out = part if out is None else out + part
    return idx, out


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _he_kernel(f_rev, g, dt, idx, wtab, woff, out):
    K, M = g.shape
    W = wtab.shape[0]
    C = idx.shape[0]
    S = np.empty(M)
    for k in range(K):
        for j in range(M):
            S[j] = 0.0
        c = 0
        for m in range(M):
            gm = g[k, m]
            base = M - 1 - m  # f[k, m - j] == f_rev[k, base + j]
            if m > 0:
                S[0] += 0.5 * f_rev[k, base] * gm
                for j in range(1, m):
                    S[j] += f_rev[k, base + j] * gm
                S[m] += 0.5 * f_rev[k, base + m] * gm
            if c < C and idx[c] == m:
                if m > 0:
                    scale = dt * dt / (m * dt)
                    off = woff[c]
                    for w in range(W):
                        acc = 0.0
                        # C_j = S_j - v_j / 2 removes the half weight of the last time point.
                        acc += wtab[w, off] * (S[0] - 0.25 * f_rev[k, base] * gm)
                        for j in range(1, m):
                            acc += wtab[w, off + j] * (S[j] - 0.5 * f_rev[k, base + j] * gm)
                        acc += wtab[w, off + m] * (S[m] - 0.25 * f_rev[k, base + m] * gm)
                        out[k, w, c] = acc * scale
                else:
                    for w in range(W):
                        out[k, w, c] = 0.0
                c += 1


def _weight_table(weights, idx):
    offsets = np.zeros(len(idx), dtype=np.int64)
    total = 0
    for c, m in enumerate(idx):
        offsets[c] = total
        total += int(m) + 1
    table = np.zeros((len(weights), total))
    for c, m in enumerate(idx):
        u = np.arange(m + 1) / max(int(m), 1)
        for wi, w in enumerate(weights):
            table[wi, offsets[c]:offsets[c] + m + 1] = w(u)
    return table, offsets


def he_partials(trajs, weights, f="f", g="g", pairs=None, stride=VARIANCE_STRIDE):
    """Per-replica HE estimates truncated at each checkpoint time.

    Returns ``(idx, partial)`` with ``partial`` of shape ``(K, W, C)`` for the
    ``W`` weights.  The double integral is accumulated in lag form: for every
    time ``t_m`` the lag sums ``S_j = sum_n d f(X_{n-j}) g(X_n)`` are updated
    in ``O(m)``, so all truncation times together cost ``O(N^2)`` per replica.
    The quadrature is the iterated trapezoidal rule of the nested integral.
    """
    _check_nonempty(trajs)
    single = not isinstance(weights, (list, tuple))
    weights = [weights] if single else list(weights)
    out = None
    idx = None
    for fk, gk in _pairs(f, g, pairs):
        fs = np.ascontiguousarray(_need(trajs, fk), dtype=np.float64)
        gs = np.ascontiguousarray(_need(trajs, gk), dtype=np.float64)
        idx = checkpoints(gs.shape[1], stride)
        table, offsets = _weight_table(weights, idx)
        part = np.empty((gs.shape[0], len(weights), len(idx)))
        _he_kernel(np.ascontiguousarray(fs[:, ::-1]), gs, float(trajs.dt), idx, table, offsets, part)
        out = part if out is None else out + part
    if single:
        return idx, out[:, 0, :]
    return idx, out


def warmup():
    """Compile the lag-sum kernel so that timed runs exclude JIT cost."""
    one = np.zeros((1, 3))
    _he_kernel(one, one, 1.0, np.array([2], dtype=np.int64), np.ones((1, 3)), np.zeros(1, dtype=np.int64),
               np.empty((1, 1, 1)))


def he_direct(f_series, g_series, dt, w):
    """Nested-loop evaluation of the HE double integral for one replica.

    ``(1/T) int_0^T g(t) int_0^t w((t-s)/T) f(s) ds dt`` with the iterated
    trapezoidal rule; O(N^2) Python loops, meant as a reference.
    """
    f_series = np.asarray(f_series, dtype=float)
    g_series = np.asarray(g_series, dtype=float)
    N = len(g_series) - 1
    T = N * dt
    total = 0.0
    for n in range(N + 1):
        inner = 0.0
        if n > 0:
            for i in range(n + 1):
                d = 0.5 if i in (0, n) else 1.0
                inner += d * float(w((n - i) * dt / T)) * f_series[i]
            inner *= dt
        c = 0.5 if n in (0, N) else 1.0
        total += c * g_series[n] * inner
    return total * dt / T


# ----------------------------------------------------------------------------
# Public estimators


def gk_estimate(trajs, f="f", g="g", pairs=None, name="gk", stride=VARIANCE_STRIDE):
    """``(1/K) sum_k f(X_0^k) int_0^T g(X_t^k) dt``."""
    started = time.perf_counter()
    idx, part = gk_partials(trajs, f, g, pairs, stride)
    return report_from_partials(name, trajs.dt, idx, part, started)


def he_estimate(trajs, w, f="f", g="g", pairs=None, name="he", stride=VARIANCE_STRIDE):
    """``(1/TK) sum_k int_0^T int_0^t w((t-s)/T) f(X_s^k) g(X_t^k) ds dt``."""
    started = time.perf_counter()
    idx, part = he_partials(trajs, w, f, g, pairs, stride)
    return report_from_partials(name, trajs.dt, idx, part, started)


def he_estimate_many(trajs, weights, f="f", g="g", pairs=None, names=None, stride=VARIANCE_STRIDE):
    """HE reports for several weights sharing one O(N^2) lag accumulation."""
    started = time.perf_counter()
    idx, part = he_partials(trajs, list(weights), f, g, pairs, stride)
    names = names or [f"he_{w.name}" for w in weights]
    reports = []
    elapsed = time.perf_counter() - started
    for i, name in enumerate(names):
        rep = report_from_partials(name, trajs.dt, idx, part[:, i, :], time.perf_counter())
        reports.append(rep.with_runtime(elapsed))
    return reports


def gk_cv_forward(trajs, f="f", g_fwd="g_fwd", **kw):
    return gk_estimate(trajs, f, g_fwd, name=kw.pop("name", "gk_forward"), **kw)


def gk_cv_adjoint(trajs, f_adj="f_adj", g="g", **kw):
    return gk_estimate(trajs, f_adj, g, name=kw.pop("name", "gk_adjoint"), **kw)


def gk_cv_combined(trajs, f_adj="f_adj", g_fwd="g_fwd", **kw):
    return gk_estimate(trajs, f_adj, g_fwd, name=kw.pop("name", "gk_combined"), **kw)


def he_cv_forward(trajs, w, f="f", g_fwd="g_fwd", **kw):
    return he_estimate(trajs, w, f, g_fwd, name=kw.pop("name", "he_forward"), **kw)


def he_cv_adjoint(trajs, w, f_adj="f_adj", g="g", **kw):
    return he_estimate(trajs, w, f_adj, g, name=kw.pop("name", "he_adjoint"), **kw)


def he_cv_combined(trajs, w, f_adj="f_adj", g_fwd="g_fwd", **kw):
    return he_estimate(trajs, w, f_adj, g_fwd, name=kw.pop("name", "he_combined"), **kw)


def run_estimator(name, trajs, w=None, pairs=None, stride=VARIANCE_STRIDE):
    """Dispatch by estimator name (``gk``, ``he_forward``, ...)."""
    family, variant = split_name(name)
    fk, gk = series_names(variant)
    if pairs is not None:
        pairs = [series_names(variant, pf, pg) for pf, pg in pairs]
    if family == "gk":
        return gk_estimate(trajs, fk, gk, pairs=pairs, name=name, stride=stride)
    if w is None:
        raise ConfigError("half-Einstein estimators need a weight function")
    return he_estimate(trajs, w, fk, gk, pairs=pairs, name=name, stride=stride)


# ----------------------------------------------------------------------------
# Observables with control variates


def cv_observables(model, f, g, psi_g=None, psi_f_star=None):
    """Observable callables for simulation: ``f``, ``g`` and the corrected pair.

    ``g_fwd`` is present when ``psi_g`` is given, ``f_adj`` when
    ``psi_f_star`` is.  Surrogates are any callables on ``(n, d)`` state batches.
    """
    obs = {"f": f, "g": g}
    if psi_g is not None:
        obs["g" + FWD] = lambda x: g(x) + apply_generator_fd(model, psi_g, x)
    if psi_f_star is not None:
        obs["f" + ADJ] = lambda x: f(x) + apply_adjoint_generator_fd(model, psi_f_star, x)
    return obs


def observables_for(name, obs, f="f", g="g"):
    """Split ``obs`` into (every-step, initial-only) dicts needed by one estimator."""
    family, variant = split_name(name)
    fk, gk = series_names(variant, f, g)
    for key in (fk, gk):
        if key not in obs:
            raise MissingSeriesError(f"estimator {name!r} needs observable {key!r}")
    if family == "gk":
        return {gk: obs[gk]}, {fk: obs[fk]}
    return {fk: obs[fk], gk: obs[gk]}, {}


# ----------------------------------------------------------------------------
# Static terms


def static_term_mc(trajs, a, b):
    """Time-and-replica average of ``a * b`` along the trajectories."""
    if len(trajs) == 0:
        raise ConfigError("static_term_mc needs at least one replica")
    sa, sb = _need(trajs, a), _need(trajs, b)
    prod = sa * sb
    T = (prod.shape[1] - 1) * trajs.dt
    if T <= 0:
        raise ConfigError("static_term_mc needs at least two grid points")
    integ = trajs.dt * (prod.sum(axis=1) - 0.5 * prod[:, 0] - 0.5 * prod[:, -1])
    return float(np.mean(integ / T))


def static_term_iid_samples(samples, a, b, block=50_000):
    """Mean of ``a * b`` over given ``mu``-samples, evaluated in blocks."""
    samples = np.asarray(samples, dtype=float)
    if len(samples) == 0:
        raise ConfigError("static term needs at least one sample")
    total = 0.0
    for start in range(0, len(samples), block):
        x = samples[start:start + block]
        total += float(np.sum(np.asarray(a(x)) * np.asarray(b(x))))
    return total / len(samples)


def static_term_iid(model, a, b, rng, n=200_000):
    """``<a, b>_mu`` from ``n`` i.i.d. samples of ``mu``."""
    return static_term_iid_samples(model.sample(rng, n), a, b)


def _gauss_hermite(model, a, b, n):
    z, wt = np.polynomial.hermite.hermgauss(n)
    z = np.sqrt(2.0) * z
    wt = wt / np.sqrt(np.pi)
    d = model.dim_state
    grids = np.meshgrid(*([z] * d), indexing="ij")
    pts = np.stack([gr.ravel() for gr in grids], axis=1)
    wgrid = np.prod(np.stack(np.meshgrid(*([wt] * d), indexing="ij")), axis=0).ravel()
    chol = np.linalg.cholesky(np.asarray(model.gaussian_cov, dtype=float))
    x = pts @ chol.T
    av, bv = np.asarray(a(x), dtype=float), np.asarray(b(x), dtype=float)
    scale = np.sqrt(np.sum(wgrid * av**2) * np.sum(wgrid * bv**2))
    return float(np.sum(wgrid * av * bv)), float(scale)


def static_term_quadrature(model, a, b, rtol=1e-6, max_nodes=160):
    """``<a, b>_mu`` by tensor Gauss-Hermite quadrature for Gaussian ``mu``, ``d <= 2``.

    The node count is doubled until two successive values agree to ``rtol``
    relative to ``max(|<a, b>|, ||a|| ||b||)``; the second scale keeps nearly
    orthogonal pairs from demanding digits beyond the integrands' accuracy.
    """
    if model.gaussian_cov is None or model.dim_state > 2:
        raise ConfigError(
            f"static_term_quadrature supports Gaussian models of dimension <= 2; "
            f"use static_term_mc for {model.name!r}"
        )
    n = 20
    prev, _ = _gauss_hermite(model, a, b, n)
    while n < max_nodes:
        n *= 2
        cur, scale = _gauss_hermite(model, a, b, n)
        if abs(cur - prev) <= rtol * max(abs(cur), scale, 1e-300) or cur == prev:
            return cur
        prev = cur
    raise QuadratureError(f"Gauss-Hermite quadrature did not reach rtol={rtol} with {n} nodes per dimension")


# ----------------------------------------------------------------------------
# Asymptotic variance predictions


def asymptotic_variance_prediction(kind, inner_products, zeta_w=None):
    """Predicted per-replica (K = 1) asymptotic variance.

    Green-Kubo kinds return the slope of variance in ``T``:
    ``2 * f_norm2 * g_energy``.  Half-Einstein kinds return the plateau
    ``4 * zeta_w * f_energy * g_energy``.  ``inner_products`` holds the values
    for the (corrected) observables of the requested kind: ``f_norm2`` is
    ``||f~||^2`` and ``*_energy`` is ``<h~, -L^{-1} h~>``.
    """
    family, _ = split_name(kind)
    ip = dict(inner_products)
    if family == "gk":
        return 2.0 * ip["f_norm2"] * ip["g_energy"]
    if zeta_w is None:
        raise ConfigError("half-Einstein predictions need zeta_w")
    return 4.0 * zeta_w * ip["f_energy"] * ip["g_energy"]
