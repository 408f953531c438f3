from pathlib import Path

import numpy as np
import pytest

from gkcv.bench import build_config, parse_config_text, train_langevin, train_multiscale
from gkcv.estimate import cv_observables
from gkcv.integrate import SimConfig, TrajectoryBatch, simulate_replicas
from gkcv.models import make_langevin, make_multiscale_fast, make_ou


def identity(x):
    return x[:, 0]


def scaled_identity(c):
    return lambda x: c * x[:, 0]


def zero_fn(x):
    return np.zeros(len(x))


def batch_from(dt, **series):
    """TrajectoryBatch from ``name=(K, N+1) array`` keyword arguments."""
    arrays = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in series.items()}
    n = next(iter(arrays.values())).shape[1]
    return TrajectoryBatch(dt, dt * (n - 1), arrays)


def ou_cv_batch(scale, n_replicas, horizon, seed, dt=0.01):
    """OU replicas carrying f, g and both corrected series for ``psi = scale * x``."""
    model = make_ou()
    psi = zero_fn if scale == 0 else scaled_identity(scale)
    obs = cv_observables(model, identity, identity, psi_g=psi, psi_f_star=psi)
    return simulate_replicas(model, obs, SimConfig(dt, horizon, n_replicas, seed))


@pytest.fixture(scope="session")
def ou_model():
    return make_ou()


@pytest.fixture(scope="session")
def ou_small():
    """Modest OU batch for identity checks: f, g, zero-surrogate CV series."""
    return ou_cv_batch(0, 200, 2.0, 3)


@pytest.fixture(scope="session")
def ou_exact():
    """OU replicas with the exact Poisson solution as surrogate."""
    return ou_cv_batch(1.0, 500, 5.0, 4)


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
_TRAINED = {}


def experiment_config(name, **overrides):
    """Shipped example config with ``overrides`` (dotted keys) applied, no output dir."""
    raw = parse_config_text((CONFIG_DIR / f"{name}.conf").read_text())
    cfg = build_config(raw, {k.replace("__", "."): v for k, v in overrides.items()})
    cfg.output_dir = None
    return cfg


def trained_surrogates(experiment, seed):
    """Surrogates and loss histories trained with the shipped config, cached per session."""
    key = (experiment, seed)
    if key not in _TRAINED:
        cfg = experiment_config(experiment, train__seed=seed)
        if experiment == "langevin_mobility":
            _TRAINED[key] = train_langevin(cfg, make_langevin(cfg.langevin))
        else:
            _TRAINED[key] = train_multiscale(cfg, make_multiscale_fast(cfg.multiscale))
    return _TRAINED[key]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
