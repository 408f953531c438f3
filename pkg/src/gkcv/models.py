"""Built-in stochastic dynamics, their generators and invariant samplers.

Three models are provided:

* the one-dimensional Ornstein-Uhlenbeck process ``dX = -X dt + sqrt(2) dW``;
* underdamped Langevin dynamics on the two-dimensional torus with a
  nonseparable cosine potential;
* the fast block of a fast/slow multiscale system, written in the rescaled
  time ``tau = t / eps**2`` so that ``eps`` disappears.

States are always handled in batches of shape ``(n, dim_state)``.  Generators
are applied with centered finite differences (:func:`apply_generator_fd`), and
adjoint generators use the closed-form adjoint drift carried by each model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NoAdjointError

EPS_MACH = np.finfo(np.float64).eps
FIRST_STEP = EPS_MACH ** (1.0 / 3.0)
SECOND_STEP = EPS_MACH ** (1.0 / 4.0)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DynamicsModel:
    """Drift, diffusion and invariant sampler of one SDE ``dX = b dt + sigma dW``.

    ``drift`` and ``adjoint_drift`` map ``(n, d)`` states to ``(n, d)``;
    ``diffusion`` maps them to ``(n, d, noise_dim)``.  ``stepper`` advances a
    batch by one timestep given standard normal increments; when it is left
    empty the Euler-Maruyama scheme is used.
    """

    name: str
    dim_state: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    periodic_mask: tuple
    invariant_sampler: Callable[[np.random.Generator, int], np.ndarray]
    noise_dim: int
    analytic_generator: Optional[Callable] = None
    adjoint_drift: Optional[Callable[[np.ndarray], np.ndarray]] = None
    stepper: Optional[Callable] = None
    gaussian_cov: Optional[np.ndarray] = None
    observables: dict = field(default_factory=dict)
    params: object = None

    def sample(self, rng, n):
        return np.asarray(self.invariant_sampler(rng, n), dtype=float).reshape(n, self.dim_state)

    def diffusion_diag(self, states):
        """Diagonal of ``sigma sigma^T``; off-diagonal couplings are rejected."""
        sig = self.diffusion(states)
        a = np.einsum("nik,njk->nij", sig, sig)
        diag = np.einsum("nii->ni", a)
        off = a - diag[:, :, None] * np.eye(self.dim_state)[None]
        if np.any(off != 0.0):
            raise ConfigError(f"model {self.name!r} has non-diagonal diffusion; mixed FD stencils are not supported")
        return diag

    def diffusive_coords(self):
        probe = self.sample(np.random.default_rng(0), 4)
        return np.any(self.diffusion_diag(probe) != 0.0, axis=0)


# ----------------------------------------------------------------------------
# Parameter records


@dataclass(frozen=True)
class LangevinParams:
    beta: float = 1.0
    gamma: float = 1.0
    mass: np.ndarray = field(default_factory=lambda: np.eye(2))
    delta: float = 0.5
    e: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float)
        e = np.array(self.e, dtype=float)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "e", e)
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        # gamma = 0 is allowed here so that BAOAB can run as velocity Verlet;
        # make_langevin rejects it.
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if mass.shape != (2, 2) or not np.allclose(mass, mass.T):
            raise ConfigError("mass must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(mass).min() <= 0:
            raise ConfigError("mass must be positive definite")
        if e.shape != (2,) or abs(np.linalg.norm(e) - 1.0) > 1e-12:
            raise ConfigError("direction e must be a unit 2-vector")

    @property
    def mass_inv(self):
        return np.linalg.inv(self.mass)


@dataclass(frozen=True)
class MultiscaleParams:
    alpha: float = 1.0
    x_frozen: np.ndarray = field(default_factory=lambda: np.array([-0.0057, 1.73, -1.04]))
    nu_cube_halfwidth: float = 4.0

    def __post_init__(self):
        x = np.array(self.x_frozen, dtype=float)
        object.__setattr__(self, "x_frozen", x)
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if x.shape != (3,):
            raise ConfigError("x_frozen must be a 3-vector")
        if not self.nu_cube_halfwidth > 0:
            raise ConfigError("nu_cube_halfwidth must be positive")


# ----------------------------------------------------------------------------
# Ornstein-Uhlenbeck


def make_ou():
    """1-D stationary OU process ``dX = -X dt + sqrt(2) dW`` with ``mu = N(0, 1)``."""

    def drift(x):
        return -np.asarray(x, dtype=float)

    def diffusion(x):
        return np.full((len(x), 1, 1), np.sqrt(2.0))

    def sampler(rng, n):
        return rng.standard_normal((n, 1))

    def generator(states, grad, hess):
        return -states[:, 0] * grad[:, 0] + hess[:, 0, 0]

    return DynamicsModel(
        name="ou",
        dim_state=1,
        drift=drift,
        diffusion=diffusion,
        periodic_mask=(False,),
        invariant_sampler=sampler,
        noise_dim=1,
        analytic_generator=generator,
        adjoint_drift=drift,
        gaussian_cov=np.eye(1),
        observables={"x": lambda s: s[:, 0]},
    )


# ----------------------------------------------------------------------------
# Langevin dynamics on the 2-torus


def potential(q, delta):
    q = np.atleast_2d(q)
    return -(np.cos(2 * q[:, 0]) + np.cos(q[:, 1])) / 2 - delta * np.cos(q[:, 0]) * np.cos(q[:, 1])


def grad_potential(q, delta):
    q = np.atleast_2d(q)
    d1 = np.sin(2 * q[:, 0]) + delta * np.sin(q[:, 0]) * np.cos(q[:, 1])
    d2 = 0.5 * np.sin(q[:, 1]) + delta * np.cos(q[:, 0]) * np.sin(q[:, 1])
    return np.stack([d1, d2], axis=1)


def _potential_min(delta, grid=200):
    g = np.arange(grid) * (TWO_PI / grid)
    q1, q2 = np.meshgrid(g, g, indexing="ij")
    return float(potential(np.stack([q1.ravel(), q2.ravel()], axis=1), delta).min())


def make_langevin(params: LangevinParams):
    """Underdamped Langevin dynamics on T^2 x R^2, state ``(q1, q2, p1, p2)``."""
    if not params.gamma > 0:
        raise ConfigError(f"gamma must be positive, got {params.gamma}")
    from .integrate import make_baoab_stepper

    minv = params.mass_inv
    beta, gamma, delta = params.beta, params.gamma, params.delta
    noise_scale = np.sqrt(2.0 * gamma / beta)
    v_min = _potential_min(delta)
    chol_p = np.linalg.cholesky(params.mass / beta)
    e_vel = minv.T @ params.e

    def drift(x):
        q, p = x[:, :2], x[:, 2:]
        v = p @ minv.T
        return np.concatenate([v, -grad_potential(q, delta) - gamma * v], axis=1)

    def adjoint_drift(x):
        q, p = x[:, :2], x[:, 2:]
        v = p @ minv.T
        return np.concatenate([-v, grad_potential(q, delta) - gamma * v], axis=1)

    def diffusion(x):
        sig = np.zeros((len(x), 4, 2))
        sig[:, 2, 0] = noise_scale
        sig[:, 3, 1] = noise_scale
        return sig

    def sample_positions(rng, n):
        out = np.empty((n, 2))
        filled = 0
        while filled < n:
            want = max(2 * (n - filled), 16)
            q = rng.uniform(0.0, TWO_PI, size=(want, 2))
            accept = rng.uniform(size=want) < np.exp(-beta * (potential(q, delta) - v_min))
            q = q[accept][: n - filled]
            out[filled:filled + len(q)] = q
            filled += len(q)
        return out

    def sampler(rng, n):
        q = sample_positions(rng, n)
        p = rng.standard_normal((n, 2)) @ chol_p.T
        return np.concatenate([q, p], axis=1)

    def generator(states, grad, hess):
        q, p = states[:, :2], states[:, 2:]
        v = p @ minv.T
        gq, gp = grad[:, :2], grad[:, 2:]
        lap_p = hess[:, 2, 2] + hess[:, 3, 3]
        return (
            np.einsum("ni,ni->n", v, gq)
            - np.einsum("ni,ni->n", grad_potential(q, delta), gp)
            + gamma * (-np.einsum("ni,ni->n", v, gp) + lap_p / beta)
        )

    return DynamicsModel(
        name="langevin",
        dim_state=4,
        drift=drift,
        diffusion=diffusion,
        periodic_mask=(True, True, False, False),
        invariant_sampler=sampler,
        noise_dim=2,
        analytic_generator=generator,
        adjoint_drift=adjoint_drift,
        stepper=make_baoab_stepper(params),
        observables={"f_e": lambda s: s[:, 2:] @ e_vel},
        params=params,
    )


# ----------------------------------------------------------------------------
# Fast block of the multiscale system


def slow_drift(x, y):
    """Slow drift ``(y1, y2, x1 y2 - x2 y1)`` for per-row slow variables ``x``."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (len(y), 3))
    return np.stack([y[:, 0], y[:, 1], x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0]], axis=1)


def slow_drift_x_jacobian(y):
    """``h_ij = d f_i / d x_j``; only ``h_31 = y2`` and ``h_32 = -y1`` are nonzero."""
    h = np.zeros((len(y), 3, 3))
    h[:, 2, 0] = y[:, 1]
    h[:, 2, 1] = -y[:, 0]
    return h


def make_multiscale_fast(params: MultiscaleParams):
    """Fast OU block ``dY = (-Y + alpha J Y) dtau + dW`` with ``mu = N(0, I/2)``."""
    alpha = params.alpha
    x = params.x_frozen

    def drift(y):
        return np.stack([-y[:, 0] - alpha * y[:, 1], -y[:, 1] + alpha * y[:, 0]], axis=1)

    def adjoint_drift(y):
        return np.stack([-y[:, 0] + alpha * y[:, 1], -y[:, 1] - alpha * y[:, 0]], axis=1)

    def diffusion(y):
        return np.broadcast_to(np.eye(2), (len(y), 2, 2)).copy()

    def sampler(rng, n):
        return np.sqrt(0.5) * rng.standard_normal((n, 2))

    def generator(states, grad, hess):
        return np.einsum("ni,ni->n", drift(states), grad) + 0.5 * (hess[:, 0, 0] + hess[:, 1, 1])

    observables = {
        "f1": lambda y: y[:, 0],
        "f2": lambda y: y[:, 1],
        "f3": lambda y: x[0] * y[:, 1] - x[1] * y[:, 0],
    }
    return DynamicsModel(
        name="multiscale_fast",
        dim_state=2,
        drift=drift,
        diffusion=diffusion,
        periodic_mask=(False, False),
        invariant_sampler=sampler,
        noise_dim=2,
        analytic_generator=generator,
        adjoint_drift=adjoint_drift,
        gaussian_cov=0.5 * np.eye(2),
        observables=observables,
        params=params,
    )


# ----------------------------------------------------------------------------
# Finite-difference generators


def _relative_steps(x, base):
    h = base * np.maximum(1.0, np.abs(x))
    up = x + h
    down = x - h
    return up, down, up - x, x - down


@dataclass
class Stencil:
    """Centered FD stencil of ``L`` (or ``L*``) around a batch of states.

    ``points`` has shape ``(S, n, d)``.  :meth:`apply` turns function values
    at those points into ``L^Delta phi``; :meth:`coefficients` returns the
    equivalent linear weights, used to chain parameter gradients through the
    stencil.
    """

    points: np.ndarray
    first: list   # (index_plus, index_minus, weight) with weight = b_j / (h+ + h-)
    second: list  # (index_plus, index_minus, w_plus, w_minus, w_center)
    has_center: bool

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        vals = values.reshape(self.points.shape[:2] + values.shape[1:])
        extra = (slice(None),) + (None,) * (vals.ndim - 2)
        out = np.zeros(vals.shape[1:])
        for ip, im, wt in self.first:
            out += wt[extra] * (vals[ip] - vals[im])
        if self.has_center:
            c = vals[0]
            for ip, im, wp, wm, _ in self.second:
                out += wp[extra] * (vals[ip] - c) - wm[extra] * (c - vals[im])
        return out

    def coefficients(self):
        coef = np.zeros(self.points.shape[:2])
        for ip, im, wt in self.first:
            coef[ip] += wt
            coef[im] -= wt
        for ip, im, wp, wm, wc in self.second:
            coef[ip] += wp
            coef[im] += wm
            coef[0] += wc
        return coef


def fd_stencil(model, states, adjoint=False):
    x = np.atleast_2d(np.asarray(states, dtype=float))
    if x.shape[1] != model.dim_state:
        x = x.reshape(-1, model.dim_state)
    if adjoint:
        if model.adjoint_drift is None:
            raise NoAdjointError(f"no adjoint available for model {model.name!r}")
        b = model.adjoint_drift(x)
    else:
        b = model.drift(x)
    a = model.diffusion_diag(x)
    diffusive = np.any(a != 0.0, axis=0)
    points = []
    has_center = bool(diffusive.any())
    if has_center:
        points.append(x)
    first, second = [], []
    for j in range(model.dim_state):
        up, down, hp, hm = _relative_steps(x[:, j], FIRST_STEP)
        xp, xm = x.copy(), x.copy()
        xp[:, j], xm[:, j] = up, down
        points += [xp, xm]
        first.append((len(points) - 2, len(points) - 1, b[:, j] / (hp + hm)))
    for j in np.flatnonzero(diffusive):
        up, down, hp, hm = _relative_steps(x[:, j], SECOND_STEP)
        xp, xm = x.copy(), x.copy()
        xp[:, j], xm[:, j] = up, down
        points += [xp, xm]
        scale = a[:, j] / (hp + hm)  # (1/2) a_jj * 2 / (h+ + h-)
        second.append((len(points) - 2, len(points) - 1, scale / hp, scale / hm, -scale / hp - scale / hm))
    return Stencil(np.stack(points), first, second, has_center)


def _eval_on_stencil(phi, stencil, context=None):
    s, n, d = stencil.points.shape
    pts = stencil.points.reshape(s * n, d)
    if context is not None:
        ctx = np.tile(np.atleast_2d(context), (s, 1))
        pts = np.concatenate([ctx, pts], axis=1)
    return np.asarray(phi(pts), dtype=float)


def apply_generator_fd(model, phi, states, adjoint=False, context=None):
    """``L^Delta phi`` at each state (``L*`` when ``adjoint``).

    ``phi`` maps an ``(m, d)`` batch to ``(m,)`` or ``(m, k)``.  When
    ``context`` is given (one row per state) it is prepended to every stencil
    point, so ``phi`` receives ``(m, k + d)`` inputs while derivatives act
    only on the state coordinates.
    """
    scalar = np.ndim(states) == 0 or (np.ndim(states) == 1 and model.dim_state != 1 and len(states) == model.dim_state)
    stencil = fd_stencil(model, states, adjoint=adjoint)
    out = stencil.apply(_eval_on_stencil(phi, stencil, context))
    if scalar:
        return out[0]
    return out


def apply_adjoint_generator_fd(model, phi, states, context=None):
    return apply_generator_fd(model, phi, states, adjoint=True, context=context)


def recenter(model, fn, rng, n=10**6):
    """Return ``fn - E_mu[fn]`` with the mean estimated from ``n`` mu-samples."""
    mean = float(np.mean(fn(model.sample(rng, n))))

    def centered(states):
        return fn(states) - mean

    centered.mean = mean
    return centered
