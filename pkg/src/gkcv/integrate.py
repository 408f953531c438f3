"""Time integrators and stationary-start replica simulation."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ReplicaFailure
from .models import TWO_PI, grad_potential

# Fixed replica chunking keeps results bitwise independent of the worker count.
CHUNK_SIZE = 512


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 5.0
    n_replicas: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.horizon >= self.dt:
            raise ConfigError(f"horizon must be at least dt, got {self.horizon}")
        if int(self.n_replicas) < 1:
            raise ConfigError(f"n_replicas must be >= 1, got {self.n_replicas}")

    @property
    def n_steps(self):
        return int(math.floor(self.horizon / self.dt + 1e-9))


@dataclass
class Trajectory:
    """Observable streams of one replica on the grid ``n * dt``."""

    dt: float
    horizon: float
    series: dict
    initial: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.dt * np.arange(len(next(iter(self.series.values()))))

    @property
    def f_series(self):
        return self.series["f"]

    @property
    def g_series(self):
        return self.series["g"]

    @property
    def f_at_zero(self):
        if "f" in self.initial:
            return self.initial["f"]
        return self.series["f"][0]


@dataclass
class TrajectoryBatch:
    """K replicas stored as ``(K, N + 1)`` arrays, one per observable name.

    ``initial`` holds observables that were only evaluated at ``X_0``.
    Indexing returns a :class:`Trajectory` view of one replica.
    """

    dt: float
    horizon: float
    series: dict
    initial: dict = field(default_factory=dict)

    def __len__(self):
        arrays = list(self.series.values()) + list(self.initial.values())
        return len(arrays[0]) if arrays else 0

    def __getitem__(self, k):
        return Trajectory(
            self.dt,
            self.horizon,
            {name: arr[k] for name, arr in self.series.items()},
            {name: arr[k] for name, arr in self.initial.items()},
        )

    @property
    def n_points(self):
        return next(iter(self.series.values())).shape[1]

    @property
    def times(self):
        return self.dt * np.arange(self.n_points)

    def at_zero(self, name):
        if name in self.initial:
            return self.initial[name]
        if name in self.series:
            return self.series[name][:, 0]
        raise KeyError(name)

    @classmethod
    def from_trajectories(cls, trajs):
        trajs = list(trajs)
        if not trajs:
            raise ConfigError("no trajectories given")
        t0 = trajs[0]
        series = {k: np.stack([t.series[k] for t in trajs]) for k in t0.series}
        initial = {k: np.array([t.initial[k] for t in trajs]) for k in t0.initial}
        return cls(t0.dt, t0.horizon, series, initial)


# ----------------------------------------------------------------------------
# One-step schemes


def _momentum_ou_coeffs(params, dt):
    lam, q = np.linalg.eigh(params.mass)
    decay = np.exp(-params.gamma * dt / lam)
    damp = (q * decay) @ q.T
    noise = (q * np.sqrt((1.0 - decay**2) * lam / params.beta)) @ q.T
    return damp, noise


def baoab_step(params, q, p, dt, rng=None, noise=None, grad_potential_fn=None):
    """One BAOAB step for Langevin dynamics on the torus.

    ``noise`` (standard normals shaped like ``p``) overrides ``rng``;
    ``grad_potential_fn`` replaces the built-in cosine potential.
    """
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    single = q.ndim == 1
    q, p = np.atleast_2d(q), np.atleast_2d(p)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal(p.shape)
    noise = np.atleast_2d(noise)
    grad = grad_potential_fn or (lambda x: grad_potential(x, params.delta))
    minv = params.mass_inv
    damp, scale = _momentum_ou_coeffs(params, dt)
    h = 0.5 * dt
    p = p - h * grad(q)
    q = np.mod(q + h * _mat2(minv, p), TWO_PI)
    p = _mat2(damp, p) + _mat2(scale, noise)
    q = np.mod(q + h * _mat2(minv, p), TWO_PI)
    p = p - h * grad(q)
    if single:
        return q[0], p[0]
    return q, p


def _mat2(mat, v):
    # Row-wise 2x2 product written elementwise so results do not depend on batch size.
    return np.stack([mat[0, 0] * v[:, 0] + mat[0, 1] * v[:, 1], mat[1, 0] * v[:, 0] + mat[1, 1] * v[:, 1]], axis=1)


def make_baoab_stepper(params):
    cache = {}
    minv = params.mass_inv

    def step(states, dt, noise):
        if dt not in cache:
            cache[dt] = _momentum_ou_coeffs(params, dt)
        damp, scale = cache[dt]
        h = 0.5 * dt
        q, p = states[:, :2], states[:, 2:]
        p = p - h * grad_potential(q, params.delta)
        q = np.mod(q + h * _mat2(minv, p), TWO_PI)
        p = _mat2(damp, p) + _mat2(scale, noise)
        q = np.mod(q + h * _mat2(minv, p), TWO_PI)
        p = p - h * grad_potential(q, params.delta)
        return np.concatenate([q, p], axis=1)

    return step


def em_step(model, state, dt, rng=None, noise=None):
    """Euler-Maruyama: ``x + b(x) dt + sigma(x) sqrt(dt) xi``."""
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    single = x.ndim <= 1
    x = x.reshape(-1, model.dim_state)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal((len(x), model.noise_dim))
    noise = np.asarray(noise, dtype=float).reshape(len(x), model.noise_dim)
    out = x + model.drift(x) * dt + np.sqrt(dt) * np.einsum("nij,nj->ni", model.diffusion(x), noise)
    if single:
        return out.reshape(np.shape(state)) if np.ndim(state) else float(out[0, 0])
    return out


def _stepper(model):
    if model.stepper is not None:
        return model.stepper

    def step(states, dt, noise):
        return states + model.drift(states) * dt + np.sqrt(dt) * np.einsum(
            "nij,nj->ni", model.diffusion(states), noise
        )

    return step


# ----------------------------------------------------------------------------
# Replicas


def replica_rng(seed, k):
    """Independent stream for replica ``k``, derived from ``(seed, k)`` only."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(k),))))


def default_workers():
    env = os.environ.get("GKCV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"GKCV_THREADS must be an integer, got {env!r}")
    return 1


def _simulate_chunk(model, observables, initial_observables, cfg, replicas):
    n_steps = cfg.n_steps
    rngs = [replica_rng(cfg.seed, k) for k in replicas]
    x = np.concatenate([model.sample(r, 1) for r in rngs])
    noise = np.stack([r.standard_normal((n_steps, model.noise_dim)) for r in rngs], axis=1)
    step = _stepper(model)
    series = {name: np.empty((len(replicas), n_steps + 1)) for name in observables}
    initial = {name: np.asarray(fn(x), dtype=float).reshape(len(replicas)) for name, fn in initial_observables.items()}
    for name, fn in observables.items():
        series[name][:, 0] = fn(x)
    for n in range(n_steps):
        x = step(x, cfg.dt, noise[n])
        for name, fn in observables.items():
            series[name][:, n + 1] = fn(x)
    return series, initial


def simulate_replicas(model, observables, cfg: SimConfig, initial_observables=None, n_workers=None,
                      chunk_size=CHUNK_SIZE, replicas=None):
    """Simulate ``cfg.n_replicas`` stationary replicas and record observables.

    ``observables`` are evaluated at every grid time, ``initial_observables``
    only at ``X_0``.  Replica ``k`` draws its initial condition and all of its
    noise from :func:`replica_rng`, so the output does not depend on
    ``n_workers``.  ``replicas`` (a ``range``) restricts the run to a subset
    of replica indices; see :func:`iter_replica_blocks`.
    """
    initial_observables = dict(initial_observables or {})
    observables = dict(observables)
    n_workers = default_workers() if n_workers is None else max(1, int(n_workers))
    replicas = range(int(cfg.n_replicas)) if replicas is None else replicas
    K = len(replicas)
    if K == 0:
        raise ConfigError("no replicas to simulate")
    chunks = [replicas[s:s + chunk_size] for s in range(0, K, chunk_size)]

    def run(chunk):
        return _simulate_chunk(model, observables, initial_observables, cfg, chunk)

    if n_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]

    series = {name: np.concatenate([p[0][name] for p in parts]) for name in observables}
    initial = {name: np.concatenate([p[1][name] for p in parts]) for name in initial_observables}
    for store in (series, initial):
        for name, arr in store.items():
            bad = ~np.isfinite(arr.reshape(K, -1)).all(axis=1)
            if bad.any():
                raise ReplicaFailure(replicas[int(np.flatnonzero(bad)[0])], name)
    return TrajectoryBatch(cfg.dt, cfg.horizon, series, initial)


def iter_replica_blocks(model, observables, cfg: SimConfig, block=2048, initial_observables=None, n_workers=None):
    """Yield :class:`TrajectoryBatch` objects for consecutive replica ranges.

    Concatenating the blocks gives exactly the output of
    :func:`simulate_replicas`, while only one block is held in memory.
    """
    K = int(cfg.n_replicas)
    for start in range(0, K, block):
        yield simulate_replicas(model, observables, cfg, initial_observables, n_workers,
                                replicas=range(start, min(start + block, K)))
