"""Parallel query execution with consistent mid-query snapshots.

Workers are threads within one process, each owning one data partition;
"nodes" are a logical abstraction. Within a node a bounded pool of chunk
workers shares a list of aggregate states, one writer per state at a time.
A snapshot request merges a node's states into one, ships a serialized copy
to the coordinator, and folds the merged state back into the list exactly
once, so no tuple is ever double-counted and no work is lost. Requests that
arrive while a snapshot is already being produced receive that snapshot's
result instead of starting a new one.

Producers block when chunk buffers fill up (backpressure); chunks are never
dropped and re-read.
"""

from __future__ import annotations

import itertools
import queue
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .core import Chunk, DatasetMeta, PlanError, Table, chunk_stream
from .estimation import BoundsUnavailable
from .io import read_table
from .plan import EstimationModel, QueryPlan
from .uda import GroupByUda, JoinUda, SumUda, Uda, merge_centralized, merge_tree


class QueryTerminal(RuntimeError):
    """The query already reached a terminal state."""


class UnknownQuery(KeyError):
    """No query registered under the given id."""


@dataclass
class EngineConfig:
    chunk_capacity: int = 4096
    slots_per_node: int = 2          # in-flight aggregate states per node
    buffer_chunks: int = 4           # reader-to-worker queue bound
    topology: str = "centralized"    # or "binary-tree"
    snapshot_timeout_s: float = 30.0
    dimension_cap: int = 10**6

    def __post_init__(self) -> None:
        if self.chunk_capacity < 1:
            raise PlanError("chunk capacity must be >= 1")
        if self.slots_per_node < 1:
            raise PlanError("need at least one state slot per node")
        if self.topology not in ("centralized", "binary-tree"):
            raise PlanError(f"unknown merge topology {self.topology!r}")


@dataclass
class FaultPlan:
    """Per-node slowdowns and failures for robustness experiments."""

    delay_ms: dict[int, float] = field(default_factory=dict)
    kill_after_fraction: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(d < 0 for d in self.delay_ms.values()):
            raise PlanError("delays must be nonnegative")
        if any(not 0.0 <= f <= 1.0 for f in self.kill_after_fraction.values()):
            raise PlanError("kill fractions must be within [0,1]")


class NodeStatus(Enum):
    LOADING = "loading"
    RUNNING = "running"
    MERGING_FINAL = "merging-final"
    FINISHED = "finished"
    DEAD = "dead"


@dataclass
class SnapshotTicket:
    """One in-flight snapshot request. At most one ticket is open per node
    (and one assembly per query); requests arriving while it is open wait
    for it and receive its outcome instead of starting another snapshot."""

    request_id: str
    issued_at: float
    settled: bool = False
    payload: Optional[object] = None
    error: Optional[Exception] = None

    def settle(self, payload=None, error: Optional[Exception] = None) -> None:
        self.payload = payload
        self.error = error
        self.settled = True

    @classmethod
    def open(cls) -> "SnapshotTicket":
        return cls(uuid.uuid4().hex[:8], time.time())


class _SyncGate:
    """Lock-step pacing for the synchronized model: a node may only start its
    next chunk when no active node has completed fewer chunks."""

    def __init__(self, node_ids: Sequence[int]):
        self._completed = {nid: 0 for nid in node_ids}
        self._active = set(node_ids)
        self._cond = threading.Condition()

    def wait_turn(self, node_id: int) -> None:
        with self._cond:
            while (
                node_id in self._active
                and self._active
                and self._completed[node_id] > min(
                    self._completed[nid] for nid in self._active
                )
            ):
                self._cond.wait(0.05)

    def advance(self, node_id: int) -> None:
        with self._cond:
            self._completed[node_id] += 1
            self._cond.notify_all()

    def leave(self, node_id: int) -> None:
        with self._cond:
            self._active.discard(node_id)
            self._cond.notify_all()


_SENTINEL = object()


class WorkerNode:
    """One logical node: a chunk reader, a bounded worker pool, and the
    shared aggregate state list with snapshot support."""

    def __init__(
        self,
        node_id: int,
        partition: Table,
        binding: Uda,
        config: EngineConfig,
        ticket: Optional[itertools.count] = None,
        sync_gate: Optional[_SyncGate] = None,
    ):
        self.node_id = node_id
        self.partition = partition
        self.cardinality = len(partition)
        self.binding = binding
        self.config = config
        self.ticket = ticket
        self.sync_gate = sync_gate

        self.status = NodeStatus.LOADING
        self.progress = 0
        self.delay_ms = 0.0
        self.kill_fraction: Optional[float] = None

        self._cond = threading.Condition()
        self._idle: list[Uda] = []
        self._checked_out = 0
        self._merging = False
        self._ticket: Optional[SnapshotTicket] = None
        self._last_snapshot: Optional[tuple[bytes, int]] = None
        self._final_state: Optional[Uda] = None
        self._stop = threading.Event()
        self._queue: queue.Queue = queue.Queue(maxsize=config.buffer_chunks)
        self._threads: list[threading.Thread] = []

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        runner = threading.Thread(target=self._run, name=f"node-{self.node_id}", daemon=True)
        self._threads.append(runner)
        runner.start()

    def stop(self) -> None:
        self._stop.set()

    def join(self) -> None:
        for t in self._threads:
            t.join()

    def _run(self) -> None:
        with self._cond:
            self.status = NodeStatus.RUNNING
        workers = [
            threading.Thread(
                target=self._worker_loop, name=f"node-{self.node_id}-w{i}", daemon=True
            )
            for i in range(self.config.slots_per_node)
        ]
        self._threads.extend(workers)
        for w in workers:
            w.start()
        for chunk in chunk_stream(self.partition, self.config.chunk_capacity, self.node_id):
            if not self._enqueue(chunk):
                break
        self._queue.put(_SENTINEL)
        for w in workers:
            w.join()
        if self.sync_gate is not None:
            self.sync_gate.leave(self.node_id)
        self._finalize()

    def _enqueue(self, chunk: Chunk) -> bool:
        """Blocking put with backpressure; False once the node should stop."""
        while not (self._stop.is_set() or self.status == NodeStatus.DEAD):
            try:
                self._queue.put(chunk, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _should_die(self) -> bool:
        return (
            self.kill_fraction is not None
            and self.progress >= self.kill_fraction * max(self.cardinality, 1)
        )

    def _worker_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is _SENTINEL:
                self._queue.put(_SENTINEL)
                return
            if self._stop.is_set() or self.status == NodeStatus.DEAD:
                continue
            if self._should_die():
                with self._cond:
                    self.status = NodeStatus.DEAD
                    self._cond.notify_all()
                continue
            chunk: Chunk = item
            if self.sync_gate is not None:
                self.sync_gate.wait_turn(self.node_id)
            if self.ticket is not None:
                tick = self.ticket
                for _ in range(len(chunk)):
                    next(tick)
            state = self._checkout()
            try:
                state.accumulate_chunk(chunk)
            finally:
                self._checkin(state)
            with self._cond:
                self.progress += len(chunk)
            if self.sync_gate is not None:
                self.sync_gate.advance(self.node_id)
            if self.delay_ms > 0:
                time.sleep(self.delay_ms / 1000.0)

    def _checkout(self) -> Uda:
        with self._cond:
            while self._merging:
                self._cond.wait()
            self._checked_out += 1
            if self._idle:
                return self._idle.pop()
            return self.binding.fresh()

    def _checkin(self, state: Uda) -> None:
        with self._cond:
            self._idle.append(state)
            self._checked_out -= 1
            self._cond.notify_all()

    def _merge_states_locked(self) -> Uda:
        while self._checked_out > 0:
            self._cond.wait()
        merged = self._idle[0] if self._idle else self.binding.fresh()
        for state in self._idle[1:]:
            merged.merge(state)
        self._idle = [merged]
        return merged

    def _finalize(self) -> None:
        with self._cond:
            if self.status == NodeStatus.DEAD:
                self._cond.notify_all()
                return
            self.status = NodeStatus.MERGING_FINAL
            merged = self._merge_states_locked()
            self._final_state = merged
            self.status = NodeStatus.FINISHED
            self._cond.notify_all()

    # -- snapshots ----------------------------------------------------------

    def request_snapshot(self, timeout: float) -> Optional[tuple[bytes, int]]:
        """Merged local state as (payload, consumed) or None for a dead node.

        A request arriving while a previous snapshot is still being produced
        is coalesced onto it; requests during the final merge wait for the
        final state, which the node would produce either way.
        """
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if self.status == NodeStatus.DEAD:
                    return None
                if self.status == NodeStatus.FINISHED:
                    payload = self._final_state.serialize()
                    return payload, self._final_state.sampled_count()
                if self.status == NodeStatus.MERGING_FINAL:
                    if not self._wait(deadline):
                        return self._last_snapshot
                    continue
                if self._ticket is not None:
                    # Coalesce onto the snapshot already in progress.
                    ticket = self._ticket
                    while not ticket.settled:
                        if not self._wait(deadline):
                            return self._last_snapshot
                    if ticket.payload is not None:
                        return ticket.payload
                    continue
                break
            ticket = SnapshotTicket.open()
            self._ticket = ticket
            self._merging = True
            try:
                merged = self._merge_states_locked()
                result = (merged.serialize(), merged.sampled_count())
            except Exception as exc:
                ticket.settle(error=exc)
                raise
            finally:
                self._merging = False
                self._ticket = None
                self._cond.notify_all()
            ticket.settle(payload=result)
            self._last_snapshot = result
            self._cond.notify_all()
            return result

    def _wait(self, deadline: float) -> bool:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return False
        self._cond.wait(min(remaining, 0.1))
        return True

    def wait_terminal(self, timeout: Optional[float] = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self.status not in (NodeStatus.FINISHED, NodeStatus.DEAD):
                if deadline is not None and time.monotonic() > deadline:
                    return False
                self._cond.wait(0.05)
        return True

    def final_state(self) -> Optional[Uda]:
        with self._cond:
            return self._final_state


class QueryHandle:
    """Live view of one submitted query."""

    def __init__(
        self,
        query_id: str,
        plan: QueryPlan,
        binding: Uda,
        meta: DatasetMeta,
        nodes: list[WorkerNode],
        config: EngineConfig,
        model: EstimationModel,
    ):
        self.query_id = query_id
        self.plan = plan
        self.binding = binding
        self.meta = meta
        self.nodes = nodes
        self.config = config
        self.model = model
        self.confidence = plan.confidence
        self.started_at = time.time()
        self.state = "running"
        self._state_lock = threading.Lock()
        self._assembly_cond = threading.Condition()
        self._assembly_ticket: Optional[SnapshotTicket] = None

    @property
    def population(self) -> int:
        return self.meta.total_cardinality

    def live_nodes(self) -> list[WorkerNode]:
        return [n for n in self.nodes if n.status != NodeStatus.DEAD]

    def dead_nodes(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.status == NodeStatus.DEAD]

    def live_cardinality(self) -> int:
        return sum(n.cardinality for n in self.live_nodes())

    def progress_fraction(self) -> float:
        live = self.live_cardinality()
        if live == 0:
            return 0.0
        return sum(n.progress for n in self.live_nodes()) / live

    def is_terminal(self) -> bool:
        return self.state in ("stopped", "finished")

    def all_nodes_settled(self) -> bool:
        return all(
            n.status in (NodeStatus.FINISHED, NodeStatus.DEAD) for n in self.nodes
        )


class Engine:
    """Coordinator: submits queries to worker nodes, assembles snapshots,
    and produces final results."""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()
        self._queries: dict[str, QueryHandle] = {}
        self._lock = threading.Lock()
        self._snapshot_pool = ThreadPoolExecutor(
            max_workers=16, thread_name_prefix="snapshot"
        )

    # -- submission ---------------------------------------------------------

    def _build_binding(
        self, plan: QueryPlan, schema, dimension_table: Optional[Table]
    ) -> Uda:
        if plan.dimension is not None:
            dim = dimension_table
            if dim is None:
                if plan.dimension.path is None:
                    raise PlanError("join plan needs a dimension table or path")
                dim = read_table(plan.dimension.path)
            schema.index_of(plan.dimension.fact_key)
            dim.schema.index_of(plan.dimension.dim_key)
            return JoinUda(
                schema,
                dim,
                plan.dimension.fact_key,
                plan.dimension.dim_key,
                plan.group_by,
                plan.aggs,
                plan.predicate,
                dim_cap=self.config.dimension_cap,
            )
        for f in plan.aggs:
            f.infer_kind(schema)
        plan.predicate.validate(schema)
        if plan.group_by:
            for name in plan.group_by:
                schema.kind_of(name)
            return GroupByUda(plan.group_by, plan.aggs, plan.predicate)
        if len(plan.aggs) != 1:
            raise PlanError("flat aggregation takes exactly one expression")
        return SumUda(plan.aggs[0], plan.predicate)

    def submit_query(
        self,
        plan: QueryPlan,
        partitions: Sequence[Table],
        meta: Optional[DatasetMeta] = None,
        model: Optional[EstimationModel] = None,
        dimension_table: Optional[Table] = None,
        fault_plan: Optional[FaultPlan] = None,
        query_id: Optional[str] = None,
    ) -> QueryHandle:
        if not partitions:
            raise PlanError("no partitions to query")
        if meta is None:
            meta = DatasetMeta.from_partitions([len(p) for p in partitions])
        if len(meta.partitions) != len(partitions):
            raise PlanError("metadata does not match the partition list")
        model = model or plan.model
        schema = partitions[0].schema
        binding = self._build_binding(plan, schema, dimension_table)

        node_ids = range(len(partitions))
        ticket = itertools.count() if model == EstimationModel.SYNC else None
        gate = _SyncGate(node_ids) if model == EstimationModel.SYNC else None
        nodes = [
            WorkerNode(i, part, binding, self.config, ticket=ticket, sync_gate=gate)
            for i, part in zip(node_ids, partitions)
        ]
        query_id = query_id or uuid.uuid4().hex[:12]
        handle = QueryHandle(query_id, plan, binding, meta, nodes, self.config, model)
        with self._lock:
            if query_id in self._queries:
                raise PlanError(f"query id {query_id!r} already in use")
            self._queries[query_id] = handle
        if fault_plan is not None:
            self.inject_faults(handle, fault_plan)
        for node in nodes:
            node.start()
        return handle

    def get(self, query_id: str) -> QueryHandle:
        with self._lock:
            try:
                return self._queries[query_id]
            except KeyError:
                raise UnknownQuery(query_id) from None

    def forget(self, query_id: str) -> None:
        """Drop a terminal query from the registry (frees its partitions)."""
        with self._lock:
            self._queries.pop(query_id, None)

    def inject_faults(self, handle: QueryHandle, fault_plan: FaultPlan) -> None:
        for node_id, delay in fault_plan.delay_ms.items():
            handle.nodes[node_id].delay_ms = delay
        for node_id, frac in fault_plan.kill_after_fraction.items():
            handle.nodes[node_id].kill_fraction = frac

    # -- snapshots and results ----------------------------------------------

    def merge_topology(self, states: Sequence[Uda], topology: Optional[str] = None) -> Uda:
        topology = topology or self.config.topology
        if topology == "binary-tree":
            return merge_tree(states)
        return merge_centralized(states)

    def _collect_states(self, handle: QueryHandle) -> tuple[list[tuple[int, Uda]], int]:
        """Per-live-node snapshot states (deserialized) plus consumed total.

        Nodes merge their local state lists concurrently so one snapshot
        stalls each node's pipeline only for its own local merge.
        """
        timeout = self.config.snapshot_timeout_s
        results = list(
            self._snapshot_pool.map(
                lambda node: node.request_snapshot(timeout), handle.nodes
            )
        )
        states: list[tuple[int, Uda]] = []
        consumed = 0
        for node, result in zip(handle.nodes, results):
            if result is None:
                continue
            payload, count = result
            states.append((node.node_id, handle.binding.deserialize(payload)))
            consumed += count
        return states, consumed

    def _assemble(self, handle: QueryHandle) -> dict:
        now_millis = (time.time() - handle.started_at) * 1000.0
        states, consumed = self._collect_states(handle)
        live_total = handle.live_cardinality()
        fraction = consumed / live_total if live_total else 0.0
        if handle.model == EstimationModel.MULTIPLE:
            if handle.dead_nodes():
                raise BoundsUnavailable(
                    f"infinite variance: partitions {handle.dead_nodes()} are lost"
                )
            if not states:
                raise BoundsUnavailable("no partition states available")
            strata = []
            for node_id, state in states:
                state.estimator_terminate(handle.meta.cardinality_of(node_id))
                strata.append(state)
            folded = strata[0]
            for s in strata[1:]:
                folded.estimator_merge(s)
            return folded.estimate_all_stratified(handle.confidence, fraction, now_millis)
        merged = self.merge_topology([s for _, s in states]) if states else handle.binding.fresh()
        return merged.estimate_all(
            handle.population, handle.confidence, fraction, now_millis
        )

    def request_partial(self, handle: QueryHandle) -> dict:
        """Estimates with confidence bounds per group (flat queries use the
        single key None). A request arriving while an assembly is already in
        progress is discarded and receives that assembly's result."""
        with handle._assembly_cond:
            ticket = handle._assembly_ticket
            if ticket is not None:
                while not ticket.settled:
                    handle._assembly_cond.wait()
                if ticket.error is not None:
                    raise ticket.error
                return ticket.payload
            ticket = SnapshotTicket.open()
            handle._assembly_ticket = ticket
        try:
            result = self._assemble(handle)
            ticket.settle(payload=result)
            return result
        except Exception as exc:
            ticket.settle(error=exc)
            raise
        finally:
            with handle._assembly_cond:
                handle._assembly_ticket = None
                handle._assembly_cond.notify_all()

    def run_to_completion(self, handle: QueryHandle):
        """Block until every node settles, then return the exact result(s)
        over surviving data plus the list of lost partitions."""
        for node in handle.nodes:
            node.wait_terminal()
        finals = [n.final_state() for n in handle.nodes if n.final_state() is not None]
        merged = self.merge_topology(finals) if finals else handle.binding.fresh()
        with handle._state_lock:
            if handle.state == "running":
                handle.state = "finished"
        return merged.terminate(), handle.dead_nodes()

    def final_merged_state(self, handle: QueryHandle) -> Uda:
        for node in handle.nodes:
            node.wait_terminal()
        finals = [n.final_state() for n in handle.nodes if n.final_state() is not None]
        return self.merge_topology(finals) if finals else handle.binding.fresh()

    def stop_query(self, handle: QueryHandle) -> tuple[dict, Uda]:
        """Halt workers after their current chunks and return the last
        snapshot's estimates plus the merged partial state."""
        with handle._state_lock:
            if handle.is_terminal():
                raise QueryTerminal(f"query {handle.query_id} is already terminal")
            finished_naturally = handle.all_nodes_settled()
            handle.state = "finished" if finished_naturally else "stopped"
        for node in handle.nodes:
            node.stop()
        for node in handle.nodes:
            node.wait_terminal()
        partial = self.final_merged_state(handle)
        try:
            estimates = self.request_partial(handle)
        except BoundsUnavailable:
            estimates = {}
        return estimates, partial
