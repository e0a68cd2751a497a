"""Command line entry point: ``bench run`` and ``bench sweep``.

Exit codes: 0 success, 1 usage/config error, 2 safety violation,
3 cluster failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .bench import ClusterStartFailure, run_median, sweep
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .safety import SafetyViolation


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _load(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_experiment_config(path)


def _print_report(r) -> None:
    print(f"{r.label:<28} {r.throughput_txns_per_s:>10.0f} txns/s "
          f"{r.throughput_ops_per_s:>10.0f} ops/s  "
          f"p50 {r.latency_p50_ms:7.1f} ms  p99 {r.latency_p99_ms:7.1f} ms  "
          f"completed {r.completed}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench", description="run local consensus benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", help="path to a .json or .toml experiment config")
    p_run.add_argument("--out", default="results", help="output root directory")
    p_run.add_argument("--name", default=None, help="experiment name (directory label)")
    p_run.add_argument("--reps", type=int, default=None,
                       help="override the config's repetition count")

    p_sweep = sub.add_parser("sweep", help="sweep one parameter over a value list")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values, e.g. 1,10,100")
    p_sweep.add_argument("--config", help="base experiment config")
    p_sweep.add_argument("--out", default="results")
    p_sweep.add_argument("--name", default=None)

    args = parser.parse_args(argv)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    try:
        cfg = _load(args.config)
        if args.command == "run":
            name = args.name or f"run-{stamp}"
            out = Path(args.out) / name
            median, reports = run_median(cfg, out, repetitions=args.reps)
            for r in reports:
                _print_report(r)
            print(f"median -> {out}/runs.csv")
            _print_report(median)
        else:
            name = args.name or f"sweep-{args.param}-{stamp}"
            out = Path(args.out) / name
            values = [_parse_value(v) for v in args.values.split(",") if v != ""]
            rows = sweep(args.param, values, cfg, out)
            for r in rows:
                _print_report(r)
            print(f"rows -> {out}/sweep.csv")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SafetyViolation as exc:
        print(f"SAFETY VIOLATION: {exc}", file=sys.stderr)
        return 2
    except ClusterStartFailure as exc:
        print(f"cluster failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
