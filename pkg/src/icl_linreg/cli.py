"""Command-line entry points.

Subcommands: train, eval, oracle-eval, interpolate, sweep, threshold, export.
Every run-like subcommand takes ``--config <path>`` plus targeted overrides.
Exit codes: 0 success, 2 config error, 3 numerical failure, 4 export with
missing series.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .errors import ConfigError, MissingSeriesError, NumericalError
from .evaluation import find_threshold
from .harness import (
    INFINITE,
    ExperimentConfig,
    collect_delta_curves,
    evaluate_run,
    export_plot_data,
    interpolation_eval,
    oracle_eval,
    run_experiment,
    run_sweep,
    sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_MISSING_DATA = 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to an experiment config JSON")
    p.add_argument("--m", help='override task diversity M (integer or "infinite")')
    p.add_argument("--batch-size", type=int, help="override training batch size")
    p.add_argument("--steps", type=int, help="override number of training steps")
    p.add_argument("--weight-decay", type=float, help="override weight decay")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the results root directory")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    try:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if args.m is not None:
        m = args.m if args.m == INFINITE else int(args.m)
        cfg = replace(cfg, M=m)
    if args.batch_size is not None:
        cfg = replace(cfg, train=replace(cfg.train, batch_size=args.batch_size))
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, n_steps=args.steps))
    if args.weight_decay is not None:
        cfg = replace(cfg, train=replace(cfg.train, weight_decay=args.weight_decay))
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _parse_sweep_value(text: str):
    if text == INFINITE:
        return text
    try:
        return int(text)
    except ValueError:
        return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icl-linreg",
        description="Train and evaluate in-context learners of noisy linear "
        "regression against exact Bayesian baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full pipeline: probe, train, evaluate")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate existing checkpoints of a run")
    _add_config_args(p)

    p = sub.add_parser("oracle-eval", help="evaluate the closed-form estimators only")
    _add_config_args(p)

    p = sub.add_parser("interpolate", help="loss curves along task interpolation paths")
    _add_config_args(p)
    p.add_argument("--no-pt", action="store_true", help="skip the transformer predictor")

    p = sub.add_parser("sweep", help="enqueue (and optionally execute) a sweep")
    _add_config_args(p)
    p.add_argument("--axis", required=True,
                   help="M | batch_size | n_steps | weight_decay | d_embed | D | constant_data")
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--name", required=True, help="sweep name (manifest key)")
    p.add_argument("--oracle-only", action="store_true", help="no training, oracles only")
    p.add_argument("--execute", action="store_true", help="run the sweep after enqueueing")

    p = sub.add_parser("threshold", help="locate the divergence-curve crossover")
    p.add_argument("--store", required=True, help="results root directory")
    p.add_argument("--pair", default="pt-ridge", help="divergence pair (default pt-ridge)")
    p.add_argument("--distribution", default="true", choices=["true", "pretrain"])
    p.add_argument("--group-by", default="B", help="record column holding the two curves")
    p.add_argument("--groups", help="comma-separated pair of group values (e.g. 256,512)")

    p = sub.add_parser("export", help="emit tidy plot-data CSVs for a figure preset")
    p.add_argument("--store", required=True, help="results root directory")
    p.add_argument("--preset", required=True,
                   help="fig2 | fig3 | fig4 | fig5 | fig6 | fig7")
    p.add_argument("--out", required=True, help="directory for the emitted CSVs")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            print(run_experiment(_load_config(args)))
        elif args.command == "eval":
            print(evaluate_run(_load_config(args)))
        elif args.command == "oracle-eval":
            print(oracle_eval(_load_config(args)))
        elif args.command == "interpolate":
            print(interpolation_eval(_load_config(args), include_pt=not args.no_pt))
        elif args.command == "sweep":
            cfg = _load_config(args)
            values = [_parse_sweep_value(v) for v in args.values.split(",") if v]
            manifest = sweep(cfg, args.axis, values, args.name, oracle_only=args.oracle_only)
            print(manifest)
            if args.execute:
                for run_dir in run_sweep(manifest):
                    print(run_dir)
        elif args.command == "threshold":
            groups = args.groups.split(",") if args.groups else None
            curves = collect_delta_curves(
                args.store, args.pair, args.distribution, args.group_by, groups
            )
            if len(curves) != 2:
                raise ConfigError(
                    f"need exactly two curves to bracket a crossover, found "
                    f"{sorted(curves)} (narrow with --groups)"
                )
            bracket = find_threshold(curves)
            if bracket is None:
                print(json.dumps({"crossed": False}))
            else:
                print(json.dumps({"crossed": True, "m_low": bracket[0], "m_high": bracket[1]}))
        elif args.command == "export":
            paths, gaps = export_plot_data(args.store, args.preset, args.out)
            for path in paths:
                print(path)
            if gaps:
                print(f"{len(gaps)} missing series (see gap report)", file=sys.stderr)
                return EXIT_MISSING_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MissingSeriesError as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_MISSING_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
