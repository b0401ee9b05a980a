"""Command line entry point: ``acrl run | report | validate``.

Exit codes: 0 success, 1 configuration error, 2 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .core import ConfigError, DomainError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seeds.run = args.seed
        cfg.seeds.model = args.seed
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    result = harness.run_experiment(cfg, out)
    if result.diverged:
        print(f"diverged: {result.diverged}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.rows[-1] if result.rows else {}
    print(f"{len(result.rows)} episodes -> {out / 'metrics.csv'}  "
          f"oracle_queries={last.get('oracle_queries', 0)} model_queries={last.get('model_queries', 0)}")
    return EXIT_OK


def _cmd_report(args) -> int:
    paths = []
    for p in args.inputs:
        p = Path(p)
        paths.append(p / "metrics.csv" if p.is_dir() else p)
    try:
        table = harness.compare_report(paths, args.out, args.fraction)
    except (DomainError, FileNotFoundError) as exc:
        raise ConfigError("--inputs", str(exc)) from None
    print(f"{len(table)} rows -> {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = harness.load_config(args.config)
    print(json.dumps(harness.config_to_dict(cfg), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acrl", description="Actively learned reward models for RL.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one agent from a JSON config")
    run.add_argument("--config", required=True, help="path to the run config (JSON)")
    run.add_argument("--seed", type=int, help="override the run and model seeds")
    run.add_argument("--out", help="output directory (default: output_dir from the config)")
    run.set_defaults(func=_cmd_run)

    report = sub.add_parser("report", help="summarize metrics files into one CSV table")
    report.add_argument("--inputs", nargs="+", required=True, help="run directories or metrics.csv files")
    report.add_argument("--out", required=True, help="summary CSV path")
    report.add_argument("--fraction", type=float, default=0.1, help="final-window share of episodes")
    report.set_defaults(func=_cmd_report)

    val = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    val.add_argument("--config", required=True)
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
