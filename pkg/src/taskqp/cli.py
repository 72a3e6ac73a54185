"""Command-line entry point.

Subcommands:
  run        execute an experiment config and write result CSVs
  gradcheck  finite-difference audit of every analytic gradient path
  plotdata   aggregate a results CSV into per-method plotting rows

Exit codes: 0 success, 1 configuration/usage error, 2 a method run failed
(decision subproblems systematically unsolvable), 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from taskqp.config import ConfigError, load_config
from taskqp.experiment import (aggregate_rows, run_experiment, summarize,
                               write_results, write_timing, CSV_COLUMNS)
from taskqp.gradcheck import SCOPES, run_scope

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN_FAILED = 2
EXIT_GRADCHECK = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskqp",
        description="Task-based learning benchmarks on differentiable QPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", type=Path, help="YAML experiment config")
    p_run.add_argument("--out", type=Path, default=Path("results.csv"),
                       help="results CSV path (timing goes to a "
                            "*.timing.csv sidecar)")
    p_run.add_argument("--jobs", type=int, default=None,
                       help="parallel fold workers (default: $TASKQP_JOBS "
                            "or 1)")

    p_gc = sub.add_parser("gradcheck",
                          help="finite-difference gradient audit")
    p_gc.add_argument("--scope", choices=["all", *SCOPES],
                      default="all", help="which gradient paths to audit")
    p_gc.add_argument("--seeds", type=int, default=20,
                      help="independent random instances per path")
    p_gc.add_argument("--seed", type=int, default=0, help="base seed")
    p_gc.add_argument("--corrupt", type=float, default=0.0,
                      help=argparse.SUPPRESS)

    p_pd = sub.add_parser("plotdata",
                          help="aggregate results CSV for plotting")
    p_pd.add_argument("results", type=Path, help="CSV written by `run`")
    p_pd.add_argument("--out", type=Path, default=Path("plotdata.csv"),
                      help="aggregated CSV path")
    return parser


def _timing_path(out: Path) -> Path:
    return out.with_name(out.stem + ".timing.csv")


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reports, failures = run_experiment(config, jobs=args.jobs)
    write_results(reports, config.task, args.out)
    write_timing(reports, config.task, _timing_path(args.out))
    print(summarize(reports, config.task))
    print(f"wrote {len(reports)} rows to {args.out}")
    if failures:
        for f in failures:
            print(f"failed: method={f.method} fold={f.fold} "
                  f"train_size={f.train_size}: {f.error}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_scope(args.scope, seed=args.seed, n_seeds=args.seeds,
                        corrupt=args.corrupt)
    failed = 0
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status} {name}: max rel err {rep.max_rel_err:.3e}, "
              f"max abs err {rep.max_abs_err:.3e}, step {rep.step:.1e}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def _cmd_plotdata(args) -> int:
    try:
        with open(args.results, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        print(f"cannot read results: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not rows or not set(CSV_COLUMNS).issubset(rows[0]):
        print("results file does not match the run CSV schema",
              file=sys.stderr)
        return EXIT_CONFIG
    aggregated = aggregate_rows(rows)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("task", "method", "train_size", "folds",
                         "mean_task_loss", "std_task_loss", "mean_rmse"))
        for row in aggregated:
            writer.writerow([row["task"], row["method"], row["train_size"],
                             row["folds"], repr(row["mean_task_loss"]),
                             repr(row["std_task_loss"]),
                             repr(row["mean_rmse"])])
    print(f"wrote {len(aggregated)} aggregated rows to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "gradcheck": _cmd_gradcheck,
                "plotdata": _cmd_plotdata}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
