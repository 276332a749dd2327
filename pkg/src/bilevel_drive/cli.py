"""Command-line benchmark harness.

Subcommands: ``bench`` runs a suite from a YAML config and writes
metrics/timings/manifest files; ``trace`` emits per-iteration convergence
data on the canonical static-obstacle scene; ``time`` measures the
bi-level loop across batch sizes and iteration counts; ``replay`` flattens
an episode log into plot-ready CSV.  Exits nonzero when any episode hits a
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import (
    emit_convergence_trace,
    emit_timing,
    load_suite,
    replay_to_csv,
    run_suite,
    write_outputs,
)
from .planners import PlannerEnvConfig


def _env_from_args(args: argparse.Namespace) -> PlannerEnvConfig:
    overrides = {}
    if getattr(args, "batch_size", None):
        overrides["batch_size"] = args.batch_size
    if getattr(args, "proj_iters", None):
        overrides["proj_iters"] = args.proj_iters
    return PlannerEnvConfig(**overrides)


def _cmd_bench(args: argparse.Namespace) -> int:
    suite = load_suite(args.config, workers=args.workers)
    if args.seeds is not None:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        suite = type(suite)(
            scenarios=suite.scenarios,
            planners=suite.planners,
            episodes_per_cell=len(seeds),
            seeds=seeds,
            env=suite.env,
            replan_stride=suite.replan_stride,
            workers=suite.workers,
        )
    rows, cell_wall, numerical_failure = run_suite(suite)
    paths = write_outputs(suite, rows, cell_wall, args.output)
    for row in rows:
        print(row.metrics_csv())
    print(f"wrote {paths['metrics']}")
    return 1 if numerical_failure else 0


def _cmd_trace(args: argparse.Namespace) -> int:
    records = emit_convergence_trace(_env_from_args(args), seed=args.seed, iterations=args.iterations)
    with open(args.output, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(records)} iteration records to {args.output}")
    return 0


def _cmd_time(args: argparse.Namespace) -> int:
    batches = tuple(int(v) for v in args.batch_sizes.split(","))
    iters = tuple(int(v) for v in args.iterations.split(","))
    rows = emit_timing(_env_from_args(args), batch_sizes=batches, iteration_counts=iters, seed=args.seed)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("batch,iterations,total_s,per_iteration_s,factorizations_during_solve\n")
        for row in rows:
            fh.write(
                f"{row['batch']},{row['iterations']},{row['total_s']!r},"
                f"{row['per_iteration_s']!r},{row['factorizations_during_solve']}\n"
            )
            print(row)
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    replay_to_csv(args.log, args.output)
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-drive", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run a benchmark suite from a YAML config")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--output", required=True, help="output directory")
    p_bench.add_argument("--seeds", default=None, help="comma-separated seed override")
    p_bench.add_argument("--workers", type=int, default=None)
    p_bench.set_defaults(func=_cmd_bench)

    p_trace = sub.add_parser("trace", help="emit per-iteration convergence data")
    p_trace.add_argument("--output", required=True)
    p_trace.add_argument("--seed", type=int, default=0)
    p_trace.add_argument("--iterations", type=int, default=None)
    p_trace.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p_trace.set_defaults(func=_cmd_trace)

    p_time = sub.add_parser("time", help="measure the bi-level loop wall time")
    p_time.add_argument("--output", required=True)
    p_time.add_argument("--batch-sizes", default="250,1000")
    p_time.add_argument("--iterations", default="2,5")
    p_time.add_argument("--seed", type=int, default=0)
    p_time.set_defaults(func=_cmd_time)

    p_replay = sub.add_parser("replay", help="dump an episode log to plot-ready CSV")
    p_replay.add_argument("--log", required=True)
    p_replay.add_argument("--output", required=True)
    p_replay.set_defaults(func=_cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
