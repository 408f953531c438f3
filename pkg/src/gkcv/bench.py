"""Config-driven experiment runner and report emission."""

from __future__ import annotations

import csv
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimate as est
from . import oracle
from .errors import ConfigError, TrainingDiverged
from .integrate import SimConfig, simulate_replicas
from .models import (
    LangevinParams,
    MultiscaleParams,
    apply_adjoint_generator_fd,
    apply_generator_fd,
    make_langevin,
    make_multiscale_fast,
    make_ou,
)
from .surrogate import (
    LANGEVIN_TRAIN,
    MULTISCALE_TRAIN,
    Surrogate,
    TrainConfig,
    adam_train,
    frozen,
    frozen_x_derivative,
    langevin_net,
    load_surrogate,
    multiscale_net,
    multiscale_train,
    save_surrogate,
)

EXPERIMENTS = ("ou_weights", "langevin_mobility", "multiscale_coeffs")
UNDEFINED = "undefined (K=1)"

# ----------------------------------------------------------------------------
# Config file


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*", key):
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _floats(value, n=None, key=""):
    try:
        vals = [float(v) for v in _list(value)]
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {value!r}")
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _num(raw, key, kind=float):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}")


_DEFAULT_ESTIMATORS = {
    "ou_weights": ["gk", "he"],
    "langevin_mobility": list(est.ESTIMATORS),
    "multiscale_coeffs": list(est.ESTIMATORS),
}

_KNOWN = {
    "experiment", "output_dir", "weights", "estimators",
    "sim.dt", "sim.horizon", "sim.horizon_gk", "sim.horizon_he", "sim.n_replicas", "sim.seed",
    "ou.horizons",
    "langevin.beta", "langevin.gamma", "langevin.delta", "langevin.mass", "langevin.e",
    "multiscale.alpha", "multiscale.x", "multiscale.nu_halfwidth", "multiscale.coefficients",
    "train.learning_rate", "train.batch_size", "train.n_steps", "train.seed", "train.checkpoint_every",
    "surrogates.dir", "static.n_samples",
    "accept.cv_variance_ratio", "accept.combined_variance_ratio",
}


@dataclass
class ExperimentConfig:
    experiment: str
    sim: SimConfig
    horizon_gk: float
    horizon_he: float
    train: TrainConfig | None
    weights: list
    estimators: list
    output_dir: str
    raw: dict = field(default_factory=dict)
    ou_horizons: list = field(default_factory=list)
    langevin: LangevinParams | None = None
    multiscale: MultiscaleParams | None = None
    coefficients: list = field(default_factory=list)
    surrogates_dir: str | None = None
    static_samples: int = 1_000_000
    zero_surrogates: bool = False
    thresholds: dict = field(default_factory=dict)

    @property
    def needs_surrogates(self):
        return any(est.split_name(e)[1] != "plain" for e in self.estimators)


def load_config(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return build_config(parse_config_text(text), overrides)


def build_config(raw, overrides=None):
    """Validate a parsed key/value dict; ``overrides`` (same keys) win."""
    raw = dict(raw)
    zero = False
    for key, value in (overrides or {}).items():
        if key == "zero_surrogates":
            zero = bool(value)
        elif value is not None:
            raw[key] = str(value)
    unknown = sorted(set(raw) - _KNOWN)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")

    dt = _num(raw.get("sim.dt", "0.01"), "sim.dt")
    default_h = {"ou_weights": 10.0, "langevin_mobility": 5.0, "multiscale_coeffs": 5.0}[exp]
    horizon = _num(raw.get("sim.horizon", str(default_h)), "sim.horizon")
    h_gk = _num(raw.get("sim.horizon_gk", str(horizon)), "sim.horizon_gk")
    h_he_default = "10" if exp == "langevin_mobility" and "sim.horizon" not in raw else str(horizon)
    h_he = _num(raw.get("sim.horizon_he", h_he_default), "sim.horizon_he")
    K = _num(raw.get("sim.n_replicas", "1000"), "sim.n_replicas", int)
    seed = _num(raw.get("sim.seed", "0"), "sim.seed", int)
    sim = SimConfig(dt=dt, horizon=max(horizon, h_gk, h_he), n_replicas=K, seed=seed)
    for h in (h_gk, h_he):
        SimConfig(dt=dt, horizon=h, n_replicas=K, seed=seed)

    estimators = _list(raw.get("estimators", ",".join(_DEFAULT_ESTIMATORS[exp])))
    for name in estimators:
        est.split_name(name)
    if len(set(estimators)) != len(estimators):
        raise ConfigError("estimators must not repeat")

    default_w = ",".join(w.name for w in est.weight_catalog()) if exp == "ou_weights" else "constant"
    weights = [est.get_weight(w).name for w in _list(raw.get("weights", default_w))]
    if not weights and any(e.startswith("he") for e in estimators):
        raise ConfigError("half-Einstein estimators need at least one weight")

    train = None
    if any(k.startswith("train.") for k in raw):
        base = MULTISCALE_TRAIN if exp == "multiscale_coeffs" else LANGEVIN_TRAIN
        train = TrainConfig(
            learning_rate=_num(raw.get("train.learning_rate", str(base.learning_rate)), "train.learning_rate"),
            batch_size=_num(raw.get("train.batch_size", str(base.batch_size)), "train.batch_size", int),
            n_steps=_num(raw.get("train.n_steps", str(base.n_steps)), "train.n_steps", int),
            seed=_num(raw.get("train.seed", "0"), "train.seed", int),
            checkpoint_every=_num(raw.get("train.checkpoint_every", "100"), "train.checkpoint_every", int),
        )

    cfg = ExperimentConfig(
        experiment=exp,
        sim=sim,
        horizon_gk=h_gk,
        horizon_he=h_he,
        train=train,
        weights=weights,
        estimators=estimators,
        output_dir=raw.get("output_dir", "gkcv_out"),
        raw=raw,
        surrogates_dir=raw.get("surrogates.dir"),
        static_samples=_num(raw.get("static.n_samples", "1000000"), "static.n_samples", int),
        zero_surrogates=zero,
        thresholds={
            "cv_variance_ratio": _num(raw.get("accept.cv_variance_ratio", "0.2"), "accept.cv_variance_ratio"),
            "combined_variance_ratio": _num(
                raw.get("accept.combined_variance_ratio", "0.05"), "accept.combined_variance_ratio"
            ),
        },
    )

    if exp == "ou_weights":
        bad = [e for e in estimators if e not in ("gk", "he")]
        if bad:
            raise ConfigError(f"ou_weights runs plain estimators only, got {bad}")
        cfg.ou_horizons = _floats(raw.get("ou.horizons", "1,2,3,4,5,6,7,8,9,10"), key="ou.horizons")
        if not cfg.ou_horizons or max(cfg.ou_horizons) > sim.horizon + 1e-9 or min(cfg.ou_horizons) < dt:
            raise ConfigError("ou.horizons must lie in [sim.dt, sim.horizon]")
    elif exp == "langevin_mobility":
        mass = _floats(raw.get("langevin.mass", "1,0,0,1"), 4, "langevin.mass")
        cfg.langevin = LangevinParams(
            beta=_num(raw.get("langevin.beta", "1"), "langevin.beta"),
            gamma=_num(raw.get("langevin.gamma", "1"), "langevin.gamma"),
            mass=np.array(mass).reshape(2, 2),
            delta=_num(raw.get("langevin.delta", "0.5"), "langevin.delta"),
            e=tuple(_floats(raw.get("langevin.e", "1,0"), 2, "langevin.e")),
        )
        if not cfg.langevin.gamma > 0:
            raise ConfigError("langevin.gamma must be positive")
    else:
        cfg.multiscale = MultiscaleParams(
            alpha=_num(raw.get("multiscale.alpha", "1"), "multiscale.alpha"),
            x_frozen=tuple(_floats(raw.get("multiscale.x", "-0.0057,1.73,-1.04"), 3, "multiscale.x")),
            nu_cube_halfwidth=_num(raw.get("multiscale.nu_halfwidth", "4"), "multiscale.nu_halfwidth"),
        )
        cfg.coefficients = _list(raw.get("multiscale.coefficients", "A0_11,F_3"))
        for c in cfg.coefficients:
            coefficient_pairs(c)

    if exp != "ou_weights" and len(weights) != 1 and any(e.startswith("he") for e in estimators):
        raise ConfigError(f"{exp} uses exactly one half-Einstein weight, got {weights}")
    if cfg.needs_surrogates and train is None and cfg.surrogates_dir is None and not zero:
        raise ConfigError("control-variate estimators need a train section, surrogates.dir or --zero-surrogates")
    return cfg


# ----------------------------------------------------------------------------
# Manifest and report emission


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    reports: list
    oracle: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    status: str = "ok"
    summary_reference: str | None = None

    def to_dict(self):
        return {
            "status": self.status,
            "config": self.config,
            "seeds": self.seeds,
            "reports": [r.to_dict() for r in self.reports],
            "oracle": self.oracle,
            "timing": self.timing,
            "extra": {k: v for k, v in self.extra.items() if not k.startswith("_")},
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def file_stem(name):
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name).strip("-")


def _fmt(v):
    return repr(float(v)) if np.isfinite(v) else UNDEFINED


def _normalizer(report, reports):
    """Plain row of the same family (and bracketed tag) as ``report``."""
    base, _, tag = report.estimator.partition("[")
    family = base.split("_")[0]
    for cand in reports:
        cb, _, ctag = cand.estimator.partition("[")
        if cb == family and ctag == tag:
            return cand
    for cand in reports:
        cb, _, ctag = cand.estimator.partition("[")
        if cb.split("_")[0] == family and ctag == tag:
            return cand
    return report


def summary_rows(reports, reference=None):
    """``(estimator, runtime_ratio, variance_ratio, cost_ratio)`` per report.

    Rows are normalized by the plain estimator of their family (``gk`` or
    ``he``, per coefficient tag), or by the row named ``reference``.
    """
    by_name = {r.estimator: r for r in reports}
    rows = []
    for rep in reports:
        ref = by_name[reference] if reference in by_name else _normalizer(rep, reports)
        rr = rep.runtime_seconds / ref.runtime_seconds if ref.runtime_seconds > 0 else float("nan")
        vr = rep.final_variance / ref.final_variance if ref.final_variance > 0 else float("nan")
        if rep is ref:
            rr = 1.0 if np.isfinite(rr) else rr
            vr = 1.0 if np.isfinite(rep.final_variance) and rep.final_variance > 0 else vr
        rows.append((rep.estimator, rr, vr, rr * vr))
    return rows


def emit_reports(manifest, output_dir):
    """Write ``manifest.json``, ``variance_<estimator>.csv`` and ``summary.csv``."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(manifest.to_json() + "\n")
        written = [out / "manifest.json"]
        if not manifest.reports:
            return written
        for rep in manifest.reports:
            path = out / f"variance_{file_stem(rep.estimator)}.csv"
            path.write_text(rep.variance_csv())
            written.append(path)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["estimator", "runtime_ratio", "variance_ratio", "cost_ratio"])
            for name, rr, vr, cr in summary_rows(manifest.reports, manifest.summary_reference):
                writer.writerow([name, _fmt(rr), _fmt(vr), _fmt(cr)])
        written.append(out / "summary.csv")
        for name, text in manifest.extra.get("_files", {}).items():
            (out / name).write_text(text)
            written.append(out / name)
        return written
    except OSError as exc:
        raise ConfigError(f"cannot write reports to {out}: {exc}")


# ----------------------------------------------------------------------------
# Helpers


def _static_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(2**32 - 1,))))


def _zero_like(net):
    return Surrogate(net.layer_dims, net.featurization, [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params])


def _simulate_and_estimate(name, model, obs, cfg, horizon, w=None, pairs=None):
    """Run one estimator on its own simulation; runtime covers both phases."""
    sim = SimConfig(cfg.sim.dt, horizon, cfg.sim.n_replicas, cfg.sim.seed)
    needed_series, needed_initial = {}, {}
    for pf, pg in pairs or [("f", "g")]:
        s, i = est.observables_for(name.split("[")[0], obs, pf, pg)
        needed_series.update(s)
        needed_initial.update(i)
    needed_initial = {k: v for k, v in needed_initial.items() if k not in needed_series}
    started = time.perf_counter()
    batch = simulate_replicas(model, needed_series, sim, needed_initial)
    t_sim = time.perf_counter() - started
    rep = est.run_estimator(name.split("[")[0], batch, w, pairs=pairs)
    total = time.perf_counter() - started
    return rep, t_sim, total - t_sim


# ----------------------------------------------------------------------------
# OU weight study


def run_ou_weights(cfg):
    model = make_ou()
    x = model.observables["x"]
    timing = {"train": 0.0, "simulate": 0.0, "estimate": 0.0}
    started = time.perf_counter()
    batch = simulate_replicas(model, {"f": x, "g": x}, cfg.sim)
    timing["simulate"] = time.perf_counter() - started

    reports, files, oracle_out = [], {}, {}
    horizons = np.array(cfg.ou_horizons, dtype=float)
    K = cfg.sim.n_replicas

    def at_horizons(report):
        t = report.variance_vs_time[:, 0]
        pick = [int(np.argmin(np.abs(t - h))) for h in horizons]
        return report.mean_vs_time[pick, 1] - 1.0, report.variance_vs_time[pick, 1]

    def table(bias, var, obias, ovar):
        lines = ["T,empirical_bias,oracle_bias,empirical_variance,oracle_variance"]
        for row in zip(horizons, bias, obias, var, ovar):
            lines.append(",".join([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])),
                                   _fmt(row[3]), repr(float(row[4]))]))
        return "\n".join(lines) + "\n"

    if "gk" in cfg.estimators:
        t0 = time.perf_counter()
        rep = est.gk_estimate(batch, name="gk")
        rep = rep.with_runtime(time.perf_counter() - t0 + timing["simulate"])
        timing["estimate"] += rep.runtime_seconds - timing["simulate"]
        reports.append(rep)
        bias, var = at_horizons(rep)
        obias = [oracle.ou_gk_bias(h) for h in horizons]
        ovar = [oracle.ou_gk_variance(h) for h in horizons]
        files["ou_gk.csv"] = table(bias, var, obias, ovar)
        oracle_out["gk"] = {"T": horizons, "bias": obias, "variance": ovar}
    if "he" in cfg.estimators:
        ws = [est.get_weight(n) for n in cfg.weights]
        t0 = time.perf_counter()
        many = est.he_estimate_many(batch, ws, names=[f"he[{w.name}]" for w in ws])
        elapsed = time.perf_counter() - t0
        timing["estimate"] += elapsed
        for w, rep in zip(ws, many):
            rep = rep.with_runtime(elapsed / len(ws) + timing["simulate"])
            reports.append(rep)
            bias, var = at_horizons(rep)
            obias = [oracle.ou_he_bias(h, w) for h in horizons]
            ovar = [oracle.ou_he_variance(h, w) for h in horizons]
            files[f"ou_{w.name}.csv"] = table(bias, var, obias, ovar)
            oracle_out[f"he[{w.name}]"] = {"T": horizons, "bias": obias, "variance": ovar,
                                           "asymptote": 4.0 * est.zeta(w)}
    return RunManifest(
        config=cfg.raw,
        seeds={"sim": cfg.sim.seed},
        reports=reports,
        oracle=oracle_out,
        timing=timing,
        extra={"n_replicas": K, "_files": files},
        summary_reference="gk",
    )


# ----------------------------------------------------------------------------
# Langevin mobility


def train_langevin(cfg, model):
    """Forward and adjoint surrogates: ``-L psi_g = f_e``, ``-L* psi_f* = beta f_e``."""
    fe = model.observables["f_e"]
    beta = cfg.langevin.beta
    tc = cfg.train
    histories = {}
    nets = {}
    for role, rhs, adjoint, offset in (("psi_g", fe, False, 0), ("psi_f_star", lambda s: beta * fe(s), True, 1)):
        tcr = TrainConfig(tc.learning_rate, tc.batch_size, tc.n_steps, tc.adam_beta1, tc.adam_beta2,
                          tc.adam_eps, tc.seed + offset, tc.checkpoint_every)
        net0 = langevin_net(np.random.default_rng([tc.seed, offset]))
        ckpt = None
        if cfg.output_dir:
            Path(cfg.output_dir, "surrogates").mkdir(parents=True, exist_ok=True)
            ckpt = Path(cfg.output_dir, "surrogates", f"{role}.bin")
        nets[role], histories[role] = adam_train(net0, model, rhs, tcr, adjoint=adjoint, checkpoint_path=ckpt,
                                                 metadata={"role": role})
        if ckpt is not None:
            save_surrogate(nets[role], ckpt, {"role": role, "train": tcr.to_dict()})
    return nets, histories


def _get_surrogates(cfg, model, trainer, zero_factory):
    histories = {}
    if cfg.surrogates_dir:
        nets = {role: load_surrogate(Path(cfg.surrogates_dir, f"{role}.bin")) for role in ("psi_g", "psi_f_star")}
    elif cfg.train is not None and cfg.needs_surrogates and not cfg.zero_surrogates:
        nets, histories = trainer(cfg, model)
    else:
        nets = {role: zero_factory() for role in ("psi_g", "psi_f_star")}
    if cfg.zero_surrogates:
        nets = {role: _zero_like(net) for role, net in nets.items()}
    return nets, histories


def run_langevin_mobility(cfg):
    model = make_langevin(cfg.langevin)
    fe = model.observables["f_e"]
    beta = cfg.langevin.beta
    timing = {"train": 0.0, "simulate": 0.0, "estimate": 0.0}
    t0 = time.perf_counter()
    try:
        nets, histories = _get_surrogates(cfg, model, train_langevin, lambda: _zero_like(langevin_net(np.random.default_rng(0))))
    except TrainingDiverged as exc:
        exc.manifest = RunManifest(cfg.raw, {"sim": cfg.sim.seed}, [], status="training_diverged",
                                   extra={"loss_history": exc.history.as_array() if exc.history else []})
        raise
    timing["train"] = time.perf_counter() - t0

    f = lambda s: beta * fe(s)
    psi_g, psi_f = nets["psi_g"], nets["psi_f_star"]
    obs = est.cv_observables(model, f, fe, psi_g, psi_f)

    rng = _static_rng(cfg.sim.seed)
    xs = model.sample(rng, cfg.static_samples)
    zero = cfg.zero_surrogates
    s_fwd = 0.0 if zero else est.static_term_iid_samples(xs, f, psi_g)
    s_adj = 0.0 if zero else est.static_term_iid_samples(xs, psi_f, fe)
    s_cross = 0.0 if zero else est.static_term_iid_samples(xs, psi_f, lambda s: apply_generator_fd(model, psi_g, s))
    statics = {"plain": 0.0, "forward": s_fwd, "adjoint": s_adj, "combined": s_adj + s_fwd + s_cross}

    reports = []
    w = est.get_weight(cfg.weights[0]) if cfg.weights else None
    for name in cfg.estimators:
        family, variant = est.split_name(name)
        horizon = cfg.horizon_gk if family == "gk" else cfg.horizon_he
        rep, ts, te = _simulate_and_estimate(name, model, obs, cfg, horizon, w)
        timing["simulate"] += ts
        timing["estimate"] += te
        reports.append(rep.shifted(statics[variant]))
    extra = {
        "static_terms": statics,
        "mobility_estimates": {r.estimator: r.rho_hat for r in reports},
        "std_errors": {r.estimator: r.std_error for r in reports},
        "loss_history": {k: h.as_array() for k, h in histories.items()},
        "thresholds": cfg.thresholds,
    }
    return RunManifest(cfg.raw, {"sim": cfg.sim.seed, "train": cfg.train.seed if cfg.train else None},
                       reports, timing=timing, extra=extra)


# ----------------------------------------------------------------------------
# Multiscale homogenized coefficients


def coefficient_pairs(name):
    """Observable pairs ``(f, g)`` whose summed transport coefficients give ``name``."""
    m = re.fullmatch(r"A0_([123])([123])", name)
    if m:
        return [(f"f{m.group(1)}", f"f{m.group(2)}")]
    if name == "F_3":
        return [("f1", "h31"), ("f2", "h32")]
    raise ConfigError(f"unknown coefficient {name!r}; use A0_ij (i, j in 1..3) or F_3")


def coefficient_oracle(name, coeffs):
    m = re.fullmatch(r"A0_([123])([123])", name)
    if m:
        return float(coeffs.A0[int(m.group(1)) - 1, int(m.group(2)) - 1])
    return float(coeffs.F[2])


def train_multiscale(cfg, model):
    tc = cfg.train
    nets, histories = {}, {}
    for role, adjoint, offset in (("psi_g", False, 0), ("psi_f_star", True, 1)):
        tcr = TrainConfig(tc.learning_rate, tc.batch_size, tc.n_steps, tc.adam_beta1, tc.adam_beta2,
                          tc.adam_eps, tc.seed + offset, tc.checkpoint_every)
        ckpt = None
        if cfg.output_dir:
            Path(cfg.output_dir, "surrogates").mkdir(parents=True, exist_ok=True)
            ckpt = Path(cfg.output_dir, "surrogates", f"{role}.bin")
        net0 = multiscale_net(np.random.default_rng([tc.seed, offset]))
        nets[role], histories[role] = multiscale_train(net0, cfg.multiscale, tcr, adjoint=adjoint, checkpoint_path=ckpt)
        if ckpt is not None:
            save_surrogate(nets[role], ckpt, {"role": role, "train": tcr.to_dict()})
    return nets, histories


def multiscale_observables(model, params, net, net_adj):
    """Plain and corrected series for all ``f_i`` and ``h_3j``, plus the matching surrogates."""
    x = np.asarray(params.x_frozen, dtype=float)
    base = dict(model.observables)
    base["h31"] = lambda y: y[:, 1]
    base["h32"] = lambda y: -y[:, 0]
    fwd_psi = {f"f{i + 1}": frozen(net, x, i) for i in range(3)}
    fwd_psi["h31"] = frozen_x_derivative(net, x, 2, 0)
    fwd_psi["h32"] = frozen_x_derivative(net, x, 2, 1)
    adj_psi = {f"f{i + 1}": frozen(net_adj, x, i) for i in range(3)}
    obs = dict(base)
    for key, psi in fwd_psi.items():
        obs[key + est.FWD] = _corrected(base[key], model, psi, False)
    for key, psi in adj_psi.items():
        obs[key + est.ADJ] = _corrected(base[key], model, psi, True)
    return obs, base, fwd_psi, adj_psi


def _corrected(fn, model, psi, adjoint):
    if adjoint:
        return lambda y: fn(y) + apply_adjoint_generator_fd(model, psi, y)
    return lambda y: fn(y) + apply_generator_fd(model, psi, y)


def run_multiscale_coeffs(cfg):
    params = cfg.multiscale
    model = make_multiscale_fast(params)
    timing = {"train": 0.0, "simulate": 0.0, "estimate": 0.0}
    t0 = time.perf_counter()
    try:
        nets, histories = _get_surrogates(cfg, model, train_multiscale,
                                          lambda: _zero_like(multiscale_net(np.random.default_rng(0))))
    except TrainingDiverged as exc:
        exc.manifest = RunManifest(cfg.raw, {"sim": cfg.sim.seed}, [], status="training_diverged",
                                   extra={"loss_history": exc.history.as_array() if exc.history else []})
        raise
    timing["train"] = time.perf_counter() - t0
    obs, base, fwd_psi, adj_psi = multiscale_observables(model, params, nets["psi_g"], nets["psi_f_star"])
    truth = oracle.homogenized_oracle(params.alpha, params.x_frozen)
    w = est.get_weight(cfg.weights[0]) if cfg.weights else None

    reports, statics, comparisons = [], {}, {}
    for coef in cfg.coefficients:
        pairs = coefficient_pairs(coef)
        stat = {"plain": 0.0, "forward": 0.0, "adjoint": 0.0, "combined": 0.0}
        if not cfg.zero_surrogates:
            q = lambda a, b: est.static_term_quadrature(model, a, b)
            for pf, pg in pairs:
                fwd = q(base[pf], fwd_psi[pg])
                adj = q(adj_psi[pf], base[pg])
                cross = q(adj_psi[pf], lambda y, p=fwd_psi[pg]: apply_generator_fd(model, p, y))
                stat["forward"] += fwd
                stat["adjoint"] += adj
                stat["combined"] += fwd + adj + cross
        statics[coef] = stat
        for name in cfg.estimators:
            family, variant = est.split_name(name)
            horizon = cfg.horizon_gk if family == "gk" else cfg.horizon_he
            rep, ts, te = _simulate_and_estimate(f"{name}[{coef}]", model, obs, cfg, horizon, w, pairs)
            timing["simulate"] += ts
            timing["estimate"] += te
            rep = rep.shifted(stat[variant], name=f"{name}[{coef}]")
            reports.append(rep)
            ref = coefficient_oracle(coef, truth)
            se = rep.std_error
            comparisons[rep.estimator] = {
                "estimate": rep.rho_hat,
                "oracle": ref,
                "std_error": se,
                "z": (rep.rho_hat - ref) / se if se > 0 else float("nan"),
            }
    oracle_out = {"F": truth.F, "A0": truth.A0, "AAt": truth.AAt, "comparisons": comparisons}
    extra = {"static_terms": statics, "loss_history": {k: h.as_array() for k, h in histories.items()},
             "thresholds": cfg.thresholds}
    return RunManifest(cfg.raw, {"sim": cfg.sim.seed, "train": cfg.train.seed if cfg.train else None},
                       reports, oracle=oracle_out, timing=timing, extra=extra)


RUNNERS = {
    "ou_weights": run_ou_weights,
    "langevin_mobility": run_langevin_mobility,
    "multiscale_coeffs": run_multiscale_coeffs,
}


def run_experiment(cfg):
    est.warmup()
    return RUNNERS[cfg.experiment](cfg)


def train_only(cfg):
    """Train and save surrogates without running estimators."""
    if cfg.experiment == "ou_weights":
        raise ConfigError("ou_weights has no surrogates to train")
    if cfg.train is None:
        raise ConfigError("train needs a train section in the config")
    if cfg.experiment == "langevin_mobility":
        model = make_langevin(cfg.langevin)
        nets, histories = train_langevin(cfg, model)
    else:
        model = make_multiscale_fast(cfg.multiscale)
        nets, histories = train_multiscale(cfg, model)
    out = Path(cfg.output_dir, "surrogates")
    for role, hist in histories.items():
        np.savetxt(out / f"{role}_loss.csv", hist.as_array(), delimiter=",", header="step,loss", comments="")
    return nets, histories


__all__ = [
    "ExperimentConfig", "RunManifest", "build_config", "load_config", "parse_config_text",
    "emit_reports", "run_experiment", "run_ou_weights", "run_langevin_mobility",
    "run_multiscale_coeffs", "summary_rows", "train_only",
]
