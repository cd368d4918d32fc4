"""Command-line front end: dataset synthesis, shuffling, query runs,
convergence traces, Monte Carlo coverage checks and overhead benchmarks.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import PlanError
from .engine import Engine, EngineConfig, FaultPlan
from .estimation import BoundsUnavailable
from .harness import (
    ExperimentSpec,
    GeneratorSpec,
    monte_carlo_coverage,
    overhead_benchmark,
    run_trace,
    write_coverage_csv,
)
from .io import read_partitions, read_table, write_partitions, write_table
from .plan import EstimationModel, plan_from_json
from .randomizer import globally_randomize

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _parse_node_arg(value: str, flag: str) -> tuple[int, float]:
    node, _, amount = value.partition(":")
    try:
        return int(node), float(amount)
    except ValueError:
        raise PlanError(f"--{flag} expects NODE:NUMBER, got {value!r}") from None


def _fault_plan(args) -> FaultPlan | None:
    delays = dict(_parse_node_arg(v, "delay-node") for v in args.delay_node or [])
    kills = dict(_parse_node_arg(v, "kill-node") for v in args.kill_node or [])
    if not delays and not kills:
        return None
    return FaultPlan(delays, kills)


def _generator(args) -> GeneratorSpec:
    return GeneratorSpec(
        kind=args.kind,
        n=args.n,
        domain_size=args.domain,
        skew=args.skew,
        k_outliers=args.k_outliers,
        magnitude=args.magnitude,
    )


def _load_plan(path: str):
    with open(path) as fh:
        return plan_from_json(fh.read())


def _add_fault_args(parser) -> None:
    parser.add_argument("--delay-node", action="append", metavar="ID:MS",
                        help="sleep MS per chunk on node ID (repeatable)")
    parser.add_argument("--kill-node", action="append", metavar="ID:FRAC",
                        help="kill node ID at progress fraction FRAC (repeatable)")


def _add_generator_args(parser) -> None:
    parser.add_argument("--kind", choices=["zipf", "outlier", "lineitem"], default="zipf")
    parser.add_argument("--n", type=int, default=1_000_000)
    parser.add_argument("--domain", type=int, default=1000)
    parser.add_argument("--skew", type=float, default=0.0)
    parser.add_argument("--k-outliers", type=int, default=1)
    parser.add_argument("--magnitude", type=float, default=1e9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="olagg",
        description="Online aggregation: estimates with confidence bounds while the query runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a dataset CSV")
    _add_generator_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("shuffle", help="globally randomize a dataset into partitions")
    p.add_argument("--input", required=True, help="dataset CSV (header + rows)")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--local", action="store_true",
                   help="local-only randomization (permute contiguous blocks)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("run", help="run a query to completion and print the exact result")
    p.add_argument("--data", required=True, help="partition directory from `shuffle`")
    p.add_argument("--plan", required=True, help="query plan JSON file")
    p.add_argument("--model", choices=[m.value for m in EstimationModel])
    p.add_argument("--confidence", type=float)
    p.add_argument("--chunk-capacity", type=int, default=4096)
    _add_fault_args(p)

    p = sub.add_parser("trace", help="run a query and emit a convergence trace CSV")
    _add_generator_args(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--model", choices=[m.value for m in EstimationModel])
    p.add_argument("--confidence", type=float)
    p.add_argument("--snapshot-ms", type=float, default=None,
                   help="snapshot on this wall-clock cadence instead of "
                        "sample-fraction deciles")
    p.add_argument("--pacing-ms", type=float, default=0.5,
                   help="uniform per-chunk delay so snapshots land between chunks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_fault_args(p)

    p = sub.add_parser("mc", help="Monte Carlo coverage of the confidence bounds")
    _add_generator_args(p)
    p.add_argument("--plan", help="query plan JSON file (default: flat SUM of `value`)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--model", choices=[m.value for m in EstimationModel], default="single")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--pacing-ms", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_fault_args(p)

    p = sub.add_parser("bench", help="estimation overhead benchmark")
    _add_generator_args(p)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--sync-reps", type=int, default=0,
                   help="also time the synchronized model this many times")
    p.add_argument("--snapshot-ms", type=float, default=1000.0)
    p.add_argument("--chunk-capacity", type=int, default=65536)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("serve", help="start the HTTP/WebSocket service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    p.add_argument("--data", help="partition directory served by default")

    return parser


def _default_plan():
    return plan_from_json({"f": {"col": "value"}})


def cmd_gen(args) -> int:
    table = _generator(args).build(args.seed)
    write_table(table, Path(args.out))
    print(f"wrote {len(table)} rows to {args.out}")
    return 0


def cmd_shuffle(args) -> int:
    table = read_table(Path(args.input))
    partitions, meta = globally_randomize(table, args.nodes, args.seed,
                                          local_only=args.local)
    write_partitions(partitions, Path(args.out))
    sizes = [p.cardinality for p in meta.partitions]
    print(f"wrote {args.nodes} partitions to {args.out} (sizes {sizes})")
    return 0


def cmd_run(args) -> int:
    partitions, meta = read_partitions(Path(args.data))
    plan = _load_plan(args.plan)
    model = EstimationModel(args.model) if args.model else None
    engine = Engine(EngineConfig(chunk_capacity=args.chunk_capacity))
    handle = engine.submit_query(plan, partitions, meta, model=model,
                                 fault_plan=_fault_plan(args))
    result, lost = engine.run_to_completion(handle)
    if isinstance(result, dict):
        payload = {"|".join(map(str, k)): v for k, v in sorted(result.items())}
    else:
        payload = result
    print(json.dumps({"result": payload, "lost_partitions": lost}))
    return 0


def _spec_from_args(args, **extra) -> ExperimentSpec:
    return ExperimentSpec(
        generator=_generator(args),
        n_nodes=args.nodes,
        model=EstimationModel(args.model) if getattr(args, "model", None) else EstimationModel.SINGLE,
        confidence=args.confidence if getattr(args, "confidence", None) else 0.95,
        snapshot_period_ms=getattr(args, "snapshot_ms", None) or 1000.0,
        seed=args.seed,
        fault_plan=_fault_plan(args) if hasattr(args, "delay_node") else None,
        **extra,
    )


def cmd_trace(args) -> int:
    plan = _load_plan(args.plan) if args.plan else _default_plan()
    spec = _spec_from_args(args, pacing_ms=args.pacing_ms, out=args.out)
    points = run_trace(spec, plan, wall_clock_ms=args.snapshot_ms)
    print(f"wrote {len(points)} trace points to {args.out}")
    return 0


def cmd_mc(args) -> int:
    plan = _load_plan(args.plan) if args.plan else _default_plan()
    spec = _spec_from_args(args, trials=args.trials, pacing_ms=args.pacing_ms)
    rows = monte_carlo_coverage(spec, plan)
    for row in rows:
        print(f"fraction {row.fraction:4.1f}  coverage {row.coverage:.4f}  "
              f"({row.trials_counted} trials)")
    if args.out:
        write_coverage_csv(rows, Path(args.out))
    return 0


def cmd_bench(args) -> int:
    spec = ExperimentSpec(
        generator=_generator(args),
        n_nodes=args.nodes,
        snapshot_period_ms=args.snapshot_ms,
        seed=args.seed,
        chunk_capacity=args.chunk_capacity,
    )
    report = overhead_benchmark(spec, _default_plan(), reps=args.reps,
                                sync_reps=args.sync_reps)
    doc = {
        "median_with_snapshots_s": report.median_with_snapshots_s,
        "median_without_snapshots_s": report.median_without_snapshots_s,
        "overhead_ratio": report.overhead_ratio,
        "median_synchronized_s": report.median_synchronized_s,
        "reps": report.reps,
    }
    print(json.dumps(doc, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "shuffle": cmd_shuffle,
    "run": cmd_run,
    "trace": cmd_trace,
    "mc": cmd_mc,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (PlanError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BoundsUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures get a distinct exit code
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
