"""Experiment runner: convergence traces, Monte Carlo coverage of the
confidence bounds, and estimation-overhead benchmarks.

Checkpoints are taken at sample-fraction deciles rather than wall-clock
intervals so results are machine-independent; the truth used for coverage is
computed once per dataset by a single-threaded compensated-sum pass.
"""

from __future__ import annotations

import csv
import math
import statistics
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .core import PlanError, Table
from .engine import Engine, EngineConfig, FaultPlan, QueryHandle
from .estimation import BoundsUnavailable, Estimate
from .expr import eval_expr, eval_pred
from .plan import EstimationModel, QueryPlan
from .randomizer import gen_lineitem_like, gen_outlier, gen_zipf, globally_randomize

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class GeneratorSpec:
    """Which synthetic dataset to run on."""

    kind: str = "zipf"               # zipf | outlier | lineitem
    n: int = 1_000_000
    domain_size: int = 1000
    skew: float = 0.0
    k_outliers: int = 1
    magnitude: float = 1e9

    def build(self, seed: int) -> Table:
        if self.kind == "zipf":
            return gen_zipf(self.n, self.domain_size, self.skew, seed)
        if self.kind == "outlier":
            return gen_outlier(self.n, self.k_outliers, self.magnitude, seed)
        if self.kind == "lineitem":
            return gen_lineitem_like(self.n, seed)
        raise PlanError(f"unknown generator kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    n_nodes: int = 8
    model: EstimationModel = EstimationModel.SINGLE
    confidence: float = 0.95
    trials: int = 100
    snapshot_period_ms: float = 1000.0
    seed: int = 0
    chunk_capacity: int = 4096
    slots_per_node: int = 2
    fault_plan: Optional[FaultPlan] = None
    pacing_ms: float = 0.0           # uniform per-chunk delay on every node
    local_randomization: bool = False
    out: Optional[str] = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise PlanError("trials must be >= 1")
        if self.snapshot_period_ms <= 0:
            raise PlanError("snapshot period must be positive")
        # Quantiles degenerate as confidence approaches 1; reject silly levels.
        if not 0.0 < self.confidence <= 0.9999:
            raise PlanError(
                f"confidence must be in (0, 0.9999], got {self.confidence}"
            )

    def engine(self) -> Engine:
        return Engine(
            EngineConfig(
                chunk_capacity=self.chunk_capacity, slots_per_node=self.slots_per_node
            )
        )

    def effective_faults(self) -> Optional[FaultPlan]:
        if self.pacing_ms <= 0:
            return self.fault_plan
        delays = {i: self.pacing_ms for i in range(self.n_nodes)}
        if self.fault_plan is not None:
            delays.update(self.fault_plan.delay_ms)
            return FaultPlan(delays, dict(self.fault_plan.kill_after_fraction))
        return FaultPlan(delays, {})


@dataclass(frozen=True)
class TracePoint:
    time_ms: float
    group: str
    estimator: float
    lower: float
    upper: float
    relative_width: float
    sample_fraction: float
    covered: Optional[bool]


def exact_truth(table: Table, plan: QueryPlan) -> dict:
    """Single-threaded compensated-sum pass over the raw dataset."""
    if plan.dimension is not None:
        raise PlanError("truth oracle for join plans needs the joined dataset")
    f = plan.aggs[0]
    if not plan.group_by:
        total = math.fsum(
            eval_expr(f, row) for row in table.rows() if eval_pred(plan.predicate, row)
        )
        return {None: total}
    sums: dict = {}
    for row in table.rows():
        if not eval_pred(plan.predicate, row):
            continue
        key = tuple(row[g] for g in plan.group_by)
        sums.setdefault(key, []).append(eval_expr(f, row))
    return {key: math.fsum(vals) for key, vals in sums.items()}


def group_label(key) -> str:
    if key is None:
        return ""
    return "|".join(str(part) for part in key)


def covers(est: Estimate, truth: float) -> bool:
    """Truth-in-bounds with the 1e-9 relative slack all oracle-vs-engine
    comparisons use; exact float equality would spuriously fail at the
    zero-width final snapshot, where engine and oracle sum in different
    orders."""
    slack = 1e-9 * max(abs(est.estimator), abs(truth), 1.0)
    return est.lower - slack <= truth <= est.upper + slack


def poll_snapshots(
    engine: Engine,
    handle: QueryHandle,
    targets: Sequence[float] = DECILES,
    poll_interval_s: float = 0.0002,
) -> list[tuple[float, dict]]:
    """Request partial results as progress crosses each target fraction.

    Returns (actual_fraction, estimates) pairs; actual fractions come from
    the merged snapshot itself, so they are exact even when progress moved
    during assembly. Ends with the exact final snapshot at fraction 1.
    """
    remaining = list(targets)
    snapshots: list[tuple[float, dict]] = []
    while not handle.all_nodes_settled():
        fraction = handle.progress_fraction()
        if remaining and fraction >= remaining[0]:
            try:
                estimates = engine.request_partial(handle)
            except BoundsUnavailable:
                time.sleep(poll_interval_s)
                continue
            if estimates:
                actual = next(iter(estimates.values())).sample_fraction
                snapshots.append((actual, estimates))
                while remaining and actual >= remaining[0]:
                    remaining.pop(0)
        else:
            time.sleep(poll_interval_s)
    engine.run_to_completion(handle)
    try:
        final = engine.request_partial(handle)
        if final:
            snapshots.append((next(iter(final.values())).sample_fraction, final))
    except BoundsUnavailable:
        pass
    return snapshots


def nearest_snapshot(
    snapshots: Sequence[tuple[float, dict]], target: float
) -> Optional[tuple[float, dict]]:
    if not snapshots:
        return None
    return min(snapshots, key=lambda pair: abs(pair[0] - target))


def wall_clock_snapshots(
    engine: Engine, handle: QueryHandle, period_ms: float
) -> list[tuple[float, dict]]:
    """Request partial results on a fixed wall-clock cadence instead of the
    decile grid, ending with the exact final snapshot."""
    snapshots: list[tuple[float, dict]] = []
    while not handle.all_nodes_settled():
        try:
            estimates = engine.request_partial(handle)
            if estimates:
                snapshots.append(
                    (next(iter(estimates.values())).sample_fraction, estimates)
                )
        except BoundsUnavailable:
            pass
        time.sleep(period_ms / 1000.0)
    engine.run_to_completion(handle)
    if snapshots and snapshots[-1][0] >= 1.0:
        return snapshots
    try:
        final = engine.request_partial(handle)
        if final:
            snapshots.append((next(iter(final.values())).sample_fraction, final))
    except BoundsUnavailable:
        pass
    return snapshots


def run_trace(
    spec: ExperimentSpec, plan: QueryPlan, wall_clock_ms: Optional[float] = None
) -> list[TracePoint]:
    """One full query run, one trace row per (snapshot, group).

    Snapshots land on the sample-fraction decile grid by default;
    `wall_clock_ms` switches to a fixed time cadence instead.
    """
    table = spec.generator.build(spec.seed)
    truth = exact_truth(table, plan)
    partitions, meta = globally_randomize(
        table, spec.n_nodes, spec.seed, local_only=spec.local_randomization
    )
    engine = spec.engine()
    handle = engine.submit_query(
        plan, partitions, meta, model=spec.model, fault_plan=spec.effective_faults()
    )
    if wall_clock_ms is None:
        snapshots = poll_snapshots(engine, handle)
    else:
        snapshots = wall_clock_snapshots(engine, handle, wall_clock_ms)
    engine.forget(handle.query_id)
    points = []
    for fraction, estimates in snapshots:
        for key, est in estimates.items():
            true_value = truth.get(key)
            points.append(
                TracePoint(
                    time_ms=est.at_millis,
                    group=group_label(key),
                    estimator=est.estimator,
                    lower=est.lower,
                    upper=est.upper,
                    relative_width=est.relative_width if est.estimator != 0 else 0.0,
                    sample_fraction=fraction,
                    covered=None if true_value is None else covers(est, true_value),
                )
            )
    if spec.out:
        write_trace_csv(points, Path(spec.out))
    return points


def write_trace_csv(points: Sequence[TracePoint], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["time_ms", "group", "estimator", "lower", "upper",
             "relative_width", "sample_fraction", "covered"]
        )
        for p in points:
            writer.writerow(
                [f"{p.time_ms:.3f}", p.group, repr(p.estimator), repr(p.lower),
                 repr(p.upper), repr(p.relative_width), repr(p.sample_fraction),
                 "" if p.covered is None else str(p.covered).lower()]
            )


@dataclass(frozen=True)
class CheckpointCoverage:
    fraction: float
    coverage: float
    trials_counted: int


def monte_carlo_coverage(
    spec: ExperimentSpec,
    plan: QueryPlan,
    checkpoints: Sequence[float] = DECILES,
    on_trial: Optional[Callable[[int], None]] = None,
) -> list[CheckpointCoverage]:
    """Fraction of trials whose bounds cover the truth, per checkpoint.

    Each trial re-randomizes the same dataset with a fresh seed and takes a
    snapshot near every checkpoint fraction; the truth is computed once.
    """
    table = spec.generator.build(spec.seed)
    plan = replace_confidence(plan, spec.confidence)
    truth = exact_truth(table, plan)[None]
    engine = spec.engine()
    hits = {c: 0 for c in checkpoints}
    counted = {c: 0 for c in checkpoints}
    for trial in range(spec.trials):
        partitions, meta = globally_randomize(
            table, spec.n_nodes, seed=spec.seed * 1_000_003 + trial,
            local_only=spec.local_randomization,
        )
        handle = engine.submit_query(
            plan, partitions, meta, model=spec.model, fault_plan=spec.effective_faults()
        )
        snapshots = poll_snapshots(engine, handle, targets=checkpoints)
        engine.forget(handle.query_id)
        for checkpoint in checkpoints:
            found = nearest_snapshot(snapshots, checkpoint)
            if found is None:
                continue
            _, estimates = found
            est = estimates[None]
            counted[checkpoint] += 1
            if covers(est, truth):
                hits[checkpoint] += 1
        if on_trial is not None:
            on_trial(trial)
    return [
        CheckpointCoverage(c, hits[c] / counted[c] if counted[c] else math.nan, counted[c])
        for c in checkpoints
    ]


def replace_confidence(plan: QueryPlan, confidence: float) -> QueryPlan:
    if plan.confidence == confidence:
        return plan
    return replace(plan, confidence=confidence)


def write_coverage_csv(rows: Sequence[CheckpointCoverage], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "coverage", "trials"])
        for r in rows:
            writer.writerow([r.fraction, repr(r.coverage), r.trials_counted])


@dataclass(frozen=True)
class OverheadReport:
    median_with_snapshots_s: float
    median_without_snapshots_s: float
    median_synchronized_s: Optional[float]
    reps: int

    @property
    def overhead_ratio(self) -> float:
        return self.median_with_snapshots_s / self.median_without_snapshots_s


def _timed_run(
    engine: Engine,
    plan: QueryPlan,
    partitions: Sequence[Table],
    model: EstimationModel,
    snapshot_period_s: Optional[float],
) -> float:
    started = time.time()
    handle = engine.submit_query(plan, partitions, model=model)
    stopper = None
    if snapshot_period_s is not None:
        stop = threading.Event()

        def snapper():
            while not stop.wait(snapshot_period_s):
                try:
                    engine.request_partial(handle)
                except BoundsUnavailable:
                    pass

        stopper = (stop, threading.Thread(target=snapper, daemon=True))
        stopper[1].start()
    engine.run_to_completion(handle)
    elapsed = time.time() - started
    if stopper is not None:
        stopper[0].set()
        stopper[1].join()
    engine.forget(handle.query_id)
    return elapsed


def overhead_benchmark(
    spec: ExperimentSpec,
    plan: QueryPlan,
    reps: int = 10,
    sync_reps: int = 0,
) -> OverheadReport:
    """Median runtimes with and without 1/period snapshots, interleaved to
    cancel machine drift, over an in-memory dataset."""
    if reps < 1:
        raise PlanError("need at least one repetition")
    table = spec.generator.build(spec.seed)
    partitions, _ = globally_randomize(table, spec.n_nodes, spec.seed,
                                       local_only=spec.local_randomization)
    engine = spec.engine()
    period_s = spec.snapshot_period_ms / 1000.0
    # Warm-up pass so allocation and thread-pool effects hit neither arm.
    _timed_run(engine, plan, partitions, EstimationModel.SINGLE, None)
    with_snaps, without = [], []
    for _ in range(reps):
        without.append(_timed_run(engine, plan, partitions, EstimationModel.SINGLE, None))
        with_snaps.append(
            _timed_run(engine, plan, partitions, EstimationModel.SINGLE, period_s)
        )
    sync_median = None
    if sync_reps:
        sync_times = [
            _timed_run(engine, plan, partitions, EstimationModel.SYNC, None)
            for _ in range(sync_reps)
        ]
        sync_median = statistics.median(sync_times)
    return OverheadReport(
        statistics.median(with_snaps), statistics.median(without), sync_median, reps
    )
