"""Command line entry point: ``gkcv run | oracle | train``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, oracle
from .errors import ConfigError, GkcvError, NumericalError
from .estimate import get_weight

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parser():
    p = argparse.ArgumentParser(prog="gkcv", description="Transport-coefficient estimators with control variates.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override sim.seed")
    run.add_argument("--out", help="override output_dir")
    run.add_argument("--estimators", help="comma-separated estimator list, e.g. gk,he_combined")
    run.add_argument("--zero-surrogates", action="store_true", help="use identically zero surrogates")

    orc = sub.add_parser("oracle", help="dump closed-form oracle curves as CSV")
    orc.add_argument("model", choices=["ou"])
    orc.add_argument("--weight", default="bartlett")
    orc.add_argument("--tmax", type=float, required=True)
    orc.add_argument("--n-points", type=int, default=10)
    orc.add_argument("--quantity", choices=["variance", "bias"], default="variance")
    orc.add_argument("--estimator", choices=["he", "gk"], default="he")
    orc.add_argument("--out", help="write CSV here instead of stdout")

    tr = sub.add_parser("train", help="train and save surrogates")
    tr.add_argument("config")
    tr.add_argument("--seed", type=int, help="override train.seed")
    tr.add_argument("--out", help="override output_dir")
    return p


def _cmd_run(args):
    overrides = {"sim.seed": args.seed, "output_dir": args.out, "estimators": args.estimators,
                 "zero_surrogates": args.zero_surrogates}
    cfg = bench.load_config(args.config, overrides)
    try:
        manifest = bench.run_experiment(cfg)
    except NumericalError as exc:
        partial = getattr(exc, "manifest", None)
        if partial is not None:
            bench.emit_reports(partial, cfg.output_dir)
        raise
    bench.emit_reports(manifest, cfg.output_dir)
    for name, rr, vr, cr in bench.summary_rows(manifest.reports, manifest.summary_reference):
        print(f"{name:24s} runtime_ratio={rr:.4g} variance_ratio={vr:.4g} cost_ratio={cr:.4g}")
    print(f"reports written to {cfg.output_dir}")


def _cmd_oracle(args):
    if not args.tmax > 0 or args.n_points < 1:
        raise ConfigError("--tmax must be positive and --n-points at least 1")
    ts = np.linspace(args.tmax / args.n_points, args.tmax, args.n_points)
    w = get_weight(args.weight) if args.estimator == "he" else None
    text = oracle.oracle_csv(ts, oracle.ou_oracle_curve(args.quantity, args.estimator, ts, w))
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {args.out}: {exc}")
    else:
        sys.stdout.write(text)


def _cmd_train(args):
    cfg = bench.load_config(args.config, {"train.seed": args.seed, "output_dir": args.out})
    _, histories = bench.train_only(cfg)
    for role, hist in histories.items():
        print(f"{role}: loss {hist.losses[0]:.4g} -> {np.mean(hist.losses[-100:]):.4g}")
    print(f"surrogates written to {Path(cfg.output_dir, 'surrogates')}")


def main(argv=None):
    args = _parser().parse_args(argv)
    handlers = {"run": _cmd_run, "oracle": _cmd_oracle, "train": _cmd_train}
    try:
        handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GkcvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
