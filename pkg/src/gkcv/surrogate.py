"""Dense tanh surrogates for Poisson solutions, trained on the FD residual loss.

The network is ``featurize -> affine+tanh -> affine+tanh -> affine``.  Only the
parameter gradient is computed by backpropagation; derivatives in the state
variables enter through the finite-difference generator, whose stencil is
linear in the network values, so the loss gradient chains through it exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError, TrainingDiverged
from .models import FIRST_STEP, _eval_on_stencil, fd_stencil, make_multiscale_fast

MAGIC = b"GKCV"
FORMAT_VERSION = 1
DIVERGENCE_LIMIT = 1e6


# ----------------------------------------------------------------------------
# Featurizations


def langevin_featurize(q1, q2=None, p1=None, p2=None):
    """``(sin q1, cos q1, sin q2, cos q2, p1, p2, |p|^2 / 2)``.

    Accepts four scalars/arrays or a single ``(..., 4)`` array.
    """
    if q2 is None:
        x = np.asarray(q1, dtype=float)
        q1, q2, p1, p2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    q1, q2, p1, p2 = (np.asarray(a, dtype=float) for a in (q1, q2, p1, p2))
    return np.stack(
        [np.sin(q1), np.cos(q1), np.sin(q2), np.cos(q2), p1, p2, 0.5 * (p1**2 + p2**2)], axis=-1
    )


def identity_featurize(x):
    return np.asarray(x, dtype=float)


FEATURIZATIONS = {
    "langevin": (langevin_featurize, 4, 7),
    "identity": (identity_featurize, None, None),
}


# ----------------------------------------------------------------------------
# Network


class Surrogate:
    """Dense MLP with a fixed featurization layer.

    ``layer_dims`` lists feature, hidden and output widths.  Parameters are
    ``(W, b)`` pairs with ``W`` of shape ``(out, in)``.
    """

    def __init__(self, layer_dims, featurization="identity", params=None, rng=None):
        if featurization not in FEATURIZATIONS:
            raise ConfigError(f"unknown featurization {featurization!r}")
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"invalid layer_dims {layer_dims}")
        self.featurization = featurization
        fn, raw, feat = FEATURIZATIONS[featurization]
        if feat is not None and feat != self.layer_dims[0]:
            raise ConfigError(f"featurization {featurization!r} yields {feat} features, net expects {self.layer_dims[0]}")
        self._featurize = fn
        self.input_dim = raw if raw is not None else self.layer_dims[0]
        if params is None:
            params = glorot_init(self.layer_dims, rng if rng is not None else np.random.default_rng())
        self.params = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in params]
        for (W, b), din, dout in zip(self.params, self.layer_dims[:-1], self.layer_dims[1:]):
            if W.shape != (dout, din) or b.shape != (dout,):
                raise ConfigError("parameter shapes do not match layer_dims")

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def n_params(self):
        return sum((i + 1) * o for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def copy(self):
        return Surrogate(self.layer_dims, self.featurization, [(W.copy(), b.copy()) for W, b in self.params])

    def get_flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.params])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, pos = [], 0
        for din, dout in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = theta[pos:pos + din * dout].reshape(dout, din)
            pos += din * dout
            b = theta[pos:pos + dout]
            pos += dout
            out.append((W.copy(), b.copy()))
        self.params = out

    def _inputs(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1 and not (self.input_dim == 1 and x.ndim == 1 and x.size != 1)
        if self.input_dim == 1 and x.ndim == 1:
            x = x[:, None]
        x = np.atleast_2d(x)
        if x.shape[-1] != self.input_dim:
            raise ConfigError(f"network expects inputs of width {self.input_dim}, got {x.shape[-1]}")
        return x, single

    def _run(self, x):
        acts = [self._featurize(x)]
        h = acts[0]
        n = len(self.params)
        for i, (W, b) in enumerate(self.params):
            z = h @ W.T + b
            h = np.tanh(z) if i < n - 1 else z
            acts.append(h)
        return acts

    def forward(self, x):
        """Network output: ``(n,)`` for scalar nets, ``(n, k)`` otherwise."""
        x, single = self._inputs(x)
        out = self._run(x)[-1]
        if self.output_dim == 1:
            out = out[:, 0]
        return out[0] if single else out

    __call__ = forward

    def vjp(self, x, cotangent):
        """``sum_n cotangent_n . d out_n / d theta`` as a flat vector."""
        x, _ = self._inputs(x)
        acts = self._run(x)
        delta = np.asarray(cotangent, dtype=float).reshape(len(x), self.output_dim)
        grads = []
        for i in range(len(self.params) - 1, -1, -1):
            W, _ = self.params[i]
            h_in = acts[i]
            grads.append((delta.T @ h_in, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W) * (1.0 - h_in**2)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def input_jvp(self, x, direction):
        """Exact derivative of the outputs along ``direction`` in raw-input space.

        Forward-mode through the layers; only for the identity featurization.
        """
        if self.featurization != "identity":
            raise ConfigError("input_jvp needs the identity featurization")
        x, single = self._inputs(x)
        h = x
        dh = np.broadcast_to(np.asarray(direction, dtype=float), x.shape)
        n = len(self.params)
        for i, (W, b) in enumerate(self.params):
            z = h @ W.T + b
            dz = dh @ W.T
            if i < n - 1:
                h = np.tanh(z)
                dh = (1.0 - h**2) * dz
            else:
                h, dh = z, dz
        out = dh[:, 0] if self.output_dim == 1 else dh
        return out[0] if single else out

    def param_gradient(self, x):
        """Per-input gradients of the outputs: ``(n, P)`` or ``(n, k, P)``."""
        x, single = self._inputs(x)
        k = self.output_dim
        rows = np.empty((len(x), k, self.n_params))
        for n in range(len(x)):
            for j in range(k):
                cot = np.zeros((1, k))
                cot[0, j] = 1.0
                rows[n, j] = self.vjp(x[n:n + 1], cot)
        out = rows[:, 0, :] if k == 1 else rows
        return out[0] if single else out


def glorot_init(layer_dims, rng):
    params = []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / (din + dout))
        params.append((rng.uniform(-lim, lim, size=(dout, din)), np.zeros(dout)))
    return params


def langevin_net(rng=None, width=15):
    return Surrogate([7, width, width, 1], "langevin", rng=rng)


def multiscale_net(rng=None, width=12):
    return Surrogate([5, width, width, 3], "identity", rng=rng)


# ----------------------------------------------------------------------------
# Serialization


def save_surrogate(net, path, metadata=None):
    """Binary parameter file plus a ``.json`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(net.layer_dims)))
        fh.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        for W, b in net.params:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    side = {"featurization": net.featurization, "layer_dims": net.layer_dims, "format_version": FORMAT_VERSION}
    if metadata:
        side.update(metadata)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_surrogate(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path} is not a surrogate file")
    version, n_dims = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported surrogate format version {version}")
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, 12))
    pos = 12 + 4 * n_dims
    params = []
    for din, dout in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(raw, dtype="<f8", count=din * dout, offset=pos).reshape(dout, din)
        pos += 8 * din * dout
        b = np.frombuffer(raw, dtype="<f8", count=dout, offset=pos)
        pos += 8 * dout
        params.append((W.astype(float), b.astype(float)))
    if pos != len(raw):
        raise ConfigError(f"{path} has trailing bytes")
    side = Path(str(path) + ".json")
    feat = json.loads(side.read_text())["featurization"] if side.exists() else "identity"
    return Surrogate(dims, feat, params)


# ----------------------------------------------------------------------------
# PINN loss


def _rhs_values(rhs, inputs, n, k):
    vals = np.asarray(rhs(inputs), dtype=float)
    return vals.reshape(n, k)


def _residuals(net, model, rhs, states, adjoint, context):
    stencil = fd_stencil(model, states, adjoint=adjoint)
    n = stencil.points.shape[1]
    k = net.output_dim
    vals = _eval_on_stencil(net, stencil, context).reshape(-1, k)
    lphi = stencil.apply(vals.reshape(stencil.points.shape[0] * n, k)).reshape(n, k)
    x = np.atleast_2d(np.asarray(states, dtype=float)).reshape(n, -1)
    inputs = x if context is None else np.concatenate([np.atleast_2d(context), x], axis=1)
    r = lphi + _rhs_values(rhs, inputs, n, k)
    bad = ~np.isfinite(r).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite PINN residual at point {inputs[i].tolist()}")
    return r, stencil


def pinn_loss(net, model, rhs, batch, adjoint=False, context=None):
    """``(1/N) sum_n |L^Delta phi(x_n) + rhs(x_n)|^2`` (``L*`` when ``adjoint``).

    With ``context`` (one row per point) the network receives
    ``[context, state]`` and the generator acts on the state part only.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.size == 0:
        raise ConfigError("empty batch")
    r, _ = _residuals(net, model, rhs, batch, adjoint, context)
    return float(np.mean(np.sum(r**2, axis=1)))


def pinn_loss_gradient(net, model, rhs, batch, adjoint=False, context=None, return_loss=False):
    """Exact parameter gradient of :func:`pinn_loss`.

    ``(2/N) sum_n r_n . sum_s c_{s,n} grad_theta phi(x_{s,n})`` where
    ``c_{s,n}`` are the stencil coefficients of ``L^Delta``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.size == 0:
        raise ConfigError("empty batch")
    r, stencil = _residuals(net, model, rhs, batch, adjoint, context)
    S, n, d = stencil.points.shape
    coef = stencil.coefficients()
    cot = (2.0 / n) * coef[:, :, None] * r[None, :, :]
    pts = stencil.points.reshape(S * n, d)
    if context is not None:
        pts = np.concatenate([np.tile(np.atleast_2d(context), (S, 1)), pts], axis=1)
    grad = net.vjp(pts, cot.reshape(S * n, -1))
    if return_loss:
        return grad, float(np.mean(np.sum(r**2, axis=1)))
    return grad


# ----------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    batch_size: int = 500
    n_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.n_steps) < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")

    def to_dict(self):
        return asdict(self)


LANGEVIN_TRAIN = TrainConfig(learning_rate=0.002, batch_size=500, n_steps=2000)
MULTISCALE_TRAIN = TrainConfig(learning_rate=0.002, batch_size=1000, n_steps=1000)


@dataclass
class LossHistory:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, loss):
        self.steps.append(int(step))
        self.losses.append(float(loss))

    def __len__(self):
        return len(self.losses)

    def as_array(self):
        return np.column_stack([np.array(self.steps, dtype=float), np.array(self.losses)])

    def smoothed(self, window=100):
        loss = np.asarray(self.losses)
        window = max(1, min(window, len(loss)))
        return np.convolve(loss, np.ones(window) / window, mode="valid")


def _split(draw):
    if isinstance(draw, tuple):
        return draw
    return None, draw


def adam_train(net, model, rhs, cfg: TrainConfig, sampler=None, adjoint=False, checkpoint_path=None,
               metadata=None):
    """Adam on the PINN loss with a fresh batch at every step.

    ``sampler(rng, n)`` returns states, or ``(context, states)``; it defaults
    to the model's invariant sampler.  The loss recorded at each step is the
    raw loss of that step's batch before the update.
    """
    rng = np.random.default_rng(cfg.seed)
    sampler = sampler or model.sample
    net = net.copy()
    theta = net.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    history = LossHistory()
    for step in range(1, int(cfg.n_steps) + 1):
        context, states = _split(sampler(rng, int(cfg.batch_size)))
        try:
            grad, loss = pinn_loss_gradient(net, model, rhs, states, adjoint, context, return_loss=True)
        except NumericalError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", history)
        if not np.isfinite(loss) or loss >= DIVERGENCE_LIMIT:
            history.append(step, loss)
            raise TrainingDiverged(f"loss diverged at step {step}: {loss}", history)
        history.append(step, loss)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        net.set_flat(theta)
        if checkpoint_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            meta = {"train": cfg.to_dict(), "step": step}
            meta.update(metadata or {})
            save_surrogate(net, checkpoint_path, meta)
    return net, history


# ----------------------------------------------------------------------------
# Multiscale: x-parametrized vector surrogate


def multiscale_rhs(xy):
    """``(f_1, f_2, f_3)(x, y) = (y_1, y_2, x_1 y_2 - x_2 y_1)`` on ``[x, y]`` rows."""
    xy = np.atleast_2d(xy)
    x1, x2, y1, y2 = xy[:, 0], xy[:, 1], xy[:, 3], xy[:, 4]
    return np.stack([y1, y2, x1 * y2 - x2 * y1], axis=1)


def multiscale_sampler(params):
    model = make_multiscale_fast(params)
    half = params.nu_cube_halfwidth

    def draw(rng, n):
        x = rng.uniform(-half, half, size=(n, 3))
        y = model.sample(rng, n)
        return x, y

    return draw


def multiscale_train(net, params, cfg: TrainConfig = MULTISCALE_TRAIN, adjoint=False, checkpoint_path=None):
    """Train ``F(x, y)`` with ``-L_y F_i = f_i`` for ``x ~ U(cube)``, ``y ~ N(0, I/2)``."""
    if net.input_dim != 5 or net.output_dim != 3:
        raise ConfigError("multiscale surrogates map 5 inputs to 3 outputs")
    model = make_multiscale_fast(params)
    return adam_train(net, model, multiscale_rhs, cfg, multiscale_sampler(params), adjoint, checkpoint_path)


def x_gradient(net, x, y):
    """``d F_i / d x_j`` by centered differences: ``(3, 3)`` or ``(n, 3, 3)``."""
    if net.input_dim != 5 or net.output_dim != 3:
        raise ConfigError("x_gradient needs a multiscale (5-input, 3-output) net")
    x = np.asarray(x, dtype=float).reshape(3)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    n = len(y)
    out = np.empty((n, 3, 3))
    for j in range(3):
        h = FIRST_STEP * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        hp, hm = xp[j] - x[j], x[j] - xm[j]
        fp = net(np.concatenate([np.tile(xp, (n, 1)), y], axis=1))
        fm = net(np.concatenate([np.tile(xm, (n, 1)), y], axis=1))
        out[:, :, j] = (fp - fm) / (hp + hm)
    return out[0] if single else out


def frozen(net, x, output=None):
    """``y -> F(x, y)`` (component ``output`` if given) as a plain callable."""
    x = np.asarray(x, dtype=float).reshape(1, -1)

    def fn(y):
        y = np.atleast_2d(y)
        vals = net(np.concatenate([np.repeat(x, len(y), axis=0), y], axis=1))
        return vals if output is None else vals[:, output]

    return fn


def frozen_x_derivative(net, x, output, j):
    """``y -> d F_output / d x_j (x, y)`` as a plain callable.

    Uses the exact input derivative of the network, so the result can be fed
    to the finite-difference generator without nesting difference quotients.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    direction = np.zeros(x.shape[1] + 2)
    direction[j] = 1.0

    def fn(y):
        y = np.atleast_2d(y)
        inputs = np.concatenate([np.repeat(x, len(y), axis=0), y], axis=1)
        return net.input_jvp(inputs, direction)[:, output]

    return fn
