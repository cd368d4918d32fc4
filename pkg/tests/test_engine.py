import threading
import time

import numpy as np
import pytest

from olagg.core import Kind, PlanError, Schema, Table
from olagg.engine import Engine, EngineConfig, FaultPlan, NodeStatus, QueryTerminal
from olagg.estimation import BoundsUnavailable
from olagg.expr import TRUE, between, col, lit
from olagg.plan import DimensionSpec, EstimationModel, QueryPlan
from olagg.randomizer import gen_lineitem_like, globally_randomize
from olagg.uda import SumUda

from oracles import exact_aggregate, exact_groupby, exact_join_groupby, value_table

GROUP_SCHEMA = Schema.of(("g", Kind.STR), ("value", Kind.INT))


def split_table(table: Table, n_nodes: int) -> list[Table]:
    bounds = np.linspace(0, len(table), n_nodes + 1).astype(int)
    return [table.slice(int(a), int(b)) for a, b in zip(bounds, bounds[1:])]


def flat_plan(**kw) -> QueryPlan:
    return QueryPlan((col("value"),), **kw)


def small_engine(**kw) -> Engine:
    defaults = dict(chunk_capacity=16, slots_per_node=2, buffer_chunks=2)
    defaults.update(kw)
    return Engine(EngineConfig(**defaults))


class TestSubmit:
    def test_flat_sum_over_four_partitions(self):
        engine = small_engine()
        parts = split_table(value_table(range(1, 101)), 4)
        handle = engine.submit_query(flat_plan(), parts)
        assert len(handle.nodes) == 4
        total, lost = engine.run_to_completion(handle)
        assert total == 5050.0
        assert lost == []

    def test_unknown_column_rejected_at_submit(self):
        engine = small_engine()
        parts = split_table(value_table(range(10)), 2)
        with pytest.raises(PlanError):
            engine.submit_query(QueryPlan((col("missing"),)), parts)

    def test_oversized_dimension_rejected_at_submit(self):
        engine = Engine(EngineConfig(dimension_cap=2))
        fact = Table.from_rows(Schema.of(("k", Kind.INT), ("v", Kind.INT)), [(1, 1)])
        dim = Table.from_rows(Schema.of(("dk", Kind.INT), ("n", Kind.STR)),
                              [(1, "a"), (2, "b"), (3, "c")])
        plan = QueryPlan((col("v"),), group_by=("n",),
                         dimension=DimensionSpec("k", "dk"))
        with pytest.raises(PlanError):
            engine.submit_query(plan, [fact], dimension_table=dim)

    def test_duplicate_query_id_rejected(self):
        engine = small_engine()
        parts = split_table(value_table(range(10)), 2)
        engine.submit_query(flat_plan(), parts, query_id="q1")
        with pytest.raises(PlanError):
            engine.submit_query(flat_plan(), parts, query_id="q1")


class TestRunToCompletion:
    def test_tiny_flat_sum(self):
        engine = small_engine()
        handle = engine.submit_query(flat_plan(), [value_table([1, 2, 3, 4])])
        total, _ = engine.run_to_completion(handle)
        assert total == 10.0

    def test_groupby_matches_oracle(self):
        rng = np.random.default_rng(11)
        n = 4000
        table = Table(GROUP_SCHEMA, {
            "g": np.array([f"g{i}" for i in rng.integers(0, 4, size=n)], dtype=object),
            "value": rng.integers(-100, 100, size=n).astype(np.int64),
        })
        pred = between(col("value"), lit(-60), lit(80))
        plan = QueryPlan((col("value"),), predicate=pred, group_by=("g",))
        engine = small_engine(chunk_capacity=128)
        handle = engine.submit_query(plan, split_table(table, 4))
        result, _ = engine.run_to_completion(handle)
        assert result == exact_groupby(table, ["g"], [col("value")], pred)

    def test_many_groups_match_oracle(self):
        rng = np.random.default_rng(12)
        n = 10_000
        table = Table(GROUP_SCHEMA, {
            "g": np.array([f"g{i}" for i in rng.integers(0, n, size=n)], dtype=object),
            "value": rng.integers(0, 50, size=n).astype(np.int64),
        })
        plan = QueryPlan((col("value"),), group_by=("g",))
        engine = small_engine(chunk_capacity=512)
        handle = engine.submit_query(plan, split_table(table, 4))
        result, _ = engine.run_to_completion(handle)
        assert result == exact_groupby(table, ["g"], [col("value")], TRUE)

    def test_join_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(13)
        n = 1000
        fact_schema = Schema.of(("k", Kind.INT), ("v", Kind.INT))
        fact = Table(fact_schema, {
            "k": rng.integers(0, 40, size=n).astype(np.int64),
            "v": rng.integers(-30, 30, size=n).astype(np.int64),
        })
        dim = Table.from_rows(Schema.of(("dk", Kind.INT), ("name", Kind.STR)),
                              [(i, f"n{i % 5}") for i in range(0, 40, 3)])
        pred = between(col("v"), lit(-20), lit(25))
        plan = QueryPlan((col("v"),), predicate=pred, group_by=("name",),
                         dimension=DimensionSpec("k", "dk"))
        engine = small_engine(chunk_capacity=64)
        handle = engine.submit_query(plan, split_table(fact, 4), dimension_table=dim)
        result, _ = engine.run_to_completion(handle)
        assert result == exact_join_groupby(fact, dim, "k", "dk", ["name"],
                                            [col("v")], pred)


class TestMergeTopology:
    def _states(self, count):
        out = []
        for i in range(count):
            s = SumUda(col("value"), TRUE)
            s.sum, s.sum_sq, s.count = float(i), float(i * i), i
            out.append(s)
        return out

    def test_single_state_identity(self):
        engine = small_engine()
        (state,) = self._states(1)
        assert engine.merge_topology([state]) == state

    def test_tree_equals_centralized_eight(self):
        engine = small_engine()
        states = self._states(8)
        assert engine.merge_topology(states, "binary-tree") == \
            engine.merge_topology(states, "centralized")

    def test_five_states_merged_exactly_once(self):
        engine = small_engine()
        states = self._states(5)
        merged = engine.merge_topology(states, "binary-tree")
        assert merged.count == sum(s.count for s in states)
        assert merged.sum == sum(s.sum for s in states)


class TestSnapshots:
    def test_request_at_completion_is_exact(self):
        engine = small_engine()
        table = value_table(range(200))
        handle = engine.submit_query(flat_plan(), split_table(table, 4))
        engine.run_to_completion(handle)
        estimates = engine.request_partial(handle)
        est = estimates[None]
        assert est.estimator == est.lower == est.upper == float(sum(range(200)))
        assert est.sample_fraction == 1.0

    def test_undersampled_request_raises_bounds_unavailable(self):
        # A one-tuple dataset can never reach the two samples a variance
        # needs, so bounds stay unavailable even at completion.
        engine = small_engine()
        handle = engine.submit_query(flat_plan(), [value_table([7])])
        engine.run_to_completion(handle)
        with pytest.raises(BoundsUnavailable):
            engine.request_partial(handle)

    def test_concurrent_requests_coalesce(self, monkeypatch):
        engine = small_engine()
        parts = split_table(value_table(range(400)), 4)
        handle = engine.submit_query(
            flat_plan(), parts, fault_plan=FaultPlan(delay_ms={i: 5 for i in range(4)})
        )
        calls = []
        real_assemble = engine._assemble

        def slow_assemble(h):
            calls.append(time.monotonic())
            time.sleep(0.15)
            return real_assemble(h)

        monkeypatch.setattr(engine, "_assemble", slow_assemble)
        time.sleep(0.05)
        barrier = threading.Barrier(2)
        results = {}

        def request(tag, delay):
            barrier.wait()
            time.sleep(delay)
            results[tag] = engine.request_partial(handle)

        t1 = threading.Thread(target=request, args=("a", 0.0))
        t2 = threading.Thread(target=request, args=("b", 0.03))
        t1.start(), t2.start()
        t1.join(), t2.join()
        engine.run_to_completion(handle)
        # The second request arrived during the first assembly and received
        # that assembly's result without starting its own.
        assert len(calls) == 1
        assert results["a"][None] == results["b"][None]

    def test_snapshots_never_change_final_answer(self):
        rng = np.random.default_rng(17)
        values = rng.integers(-1000, 1000, size=5000)
        table = value_table(values)
        pred = between(col("value"), lit(-400), lit(900))
        expected = exact_aggregate(table, col("value"), pred)

        engine = small_engine(chunk_capacity=64)
        plan = flat_plan(predicate=pred)
        quiet = engine.submit_query(plan, split_table(table, 4))
        total_quiet, _ = engine.run_to_completion(quiet)

        noisy = engine.submit_query(
            plan, split_table(table, 4),
            fault_plan=FaultPlan(delay_ms={i: 1 for i in range(4)}),
        )
        seen_fraction = -1.0
        while not noisy.all_nodes_settled():
            try:
                est = engine.request_partial(noisy)[None]
                assert est.sample_fraction >= seen_fraction
                seen_fraction = est.sample_fraction
            except BoundsUnavailable:
                pass
        total_noisy, _ = engine.run_to_completion(noisy)
        assert total_quiet == total_noisy == expected

    def test_merged_count_telescopes_to_population(self):
        engine = small_engine()
        table = value_table(range(1000))
        handle = engine.submit_query(flat_plan(), split_table(table, 4))
        engine.run_to_completion(handle)
        merged = engine.final_merged_state(handle)
        assert merged.sampled_count() == 1000


class TestStop:
    def test_stop_immediately(self):
        engine = small_engine()
        parts = split_table(value_table(range(2000)), 4)
        handle = engine.submit_query(
            flat_plan(), parts, fault_plan=FaultPlan(delay_ms={i: 2 for i in range(4)})
        )
        estimates, partial = engine.stop_query(handle)
        assert handle.is_terminal()
        assert partial.sampled_count() <= 2000
        if estimates:
            assert estimates[None].sample_fraction <= 1.0

    def test_stop_midway_fraction(self):
        engine = small_engine(chunk_capacity=50)
        table = value_table(range(2000))
        handle = engine.submit_query(
            flat_plan(), split_table(table, 4),
            fault_plan=FaultPlan(delay_ms={i: 4 for i in range(4)}),
        )
        while handle.progress_fraction() < 0.5:
            time.sleep(0.002)
        estimates, partial = engine.stop_query(handle)
        # Halting waits only for in-flight chunks: one chunk per slot per
        # node may still land after the 50% mark.
        max_extra = 4 * (2 + 2 + 1) * 50
        assert 0.5 <= partial.sampled_count() / 2000 <= (1000 + max_extra) / 2000
        assert handle.state == "stopped"

    def test_stop_after_finish_returns_exact(self):
        engine = small_engine()
        handle = engine.submit_query(flat_plan(), [value_table(range(100))])
        handle.nodes[0].wait_terminal()
        estimates, partial = engine.stop_query(handle)
        assert estimates[None].estimator == float(sum(range(100)))
        assert estimates[None].width == 0.0
        assert handle.state == "finished"

    def test_stop_twice_rejected(self):
        engine = small_engine()
        handle = engine.submit_query(flat_plan(), [value_table(range(100))])
        engine.stop_query(handle)
        with pytest.raises(QueryTerminal):
            engine.stop_query(handle)


class TestFaults:
    def test_delayed_node_lags(self):
        engine = small_engine(chunk_capacity=20)
        table = value_table(range(2000))
        handle = engine.submit_query(
            flat_plan(), split_table(table, 4),
            fault_plan=FaultPlan(delay_ms={0: 30, 1: 1, 2: 1, 3: 1}),
        )
        time.sleep(0.25)
        progress = {n.node_id: n.progress / n.cardinality for n in handle.nodes}
        engine.stop_query(handle)
        others = [progress[i] for i in (1, 2, 3)]
        assert progress[0] < min(others)

    def test_killed_node_single_estimator_still_estimates(self):
        engine = small_engine(chunk_capacity=32)
        table = value_table(range(1, 801))
        handle = engine.submit_query(
            flat_plan(), split_table(table, 8),
            fault_plan=FaultPlan(kill_after_fraction={0: 0.0}),
        )
        total, lost = engine.run_to_completion(handle)
        assert lost == [0]
        estimates = engine.request_partial(handle)
        est = estimates[None]
        # Bounds stay open: the sample can never cover the lost partition.
        assert est.width > 0.0
        assert est.lower < est.estimator < est.upper
        assert handle.nodes[0].status == NodeStatus.DEAD

    def test_killed_node_stratified_infinite_variance(self):
        engine = small_engine(chunk_capacity=32)
        table = value_table(range(1, 801))
        handle = engine.submit_query(
            flat_plan(model=EstimationModel.MULTIPLE), split_table(table, 8),
            fault_plan=FaultPlan(kill_after_fraction={3: 0.0}),
        )
        engine.run_to_completion(handle)
        with pytest.raises(BoundsUnavailable):
            engine.request_partial(handle)

    def test_fault_plan_validation(self):
        with pytest.raises(PlanError):
            FaultPlan(delay_ms={0: -1})
        with pytest.raises(PlanError):
            FaultPlan(kill_after_fraction={0: 1.5})


class TestModels:
    def _uniform_parts(self, n=2000, nodes=4, seed=21):
        table = value_table(np.random.default_rng(seed).integers(0, 100, size=n))
        parts, meta = globally_randomize(table, nodes, seed=seed)
        return table, parts, meta

    def test_stratified_estimates_cover_simple_case(self):
        table, parts, meta = self._uniform_parts()
        truth = float(table.columns["value"].sum())
        engine = small_engine(chunk_capacity=64)
        handle = engine.submit_query(
            flat_plan(model=EstimationModel.MULTIPLE), parts, meta)
        engine.run_to_completion(handle)
        est = engine.request_partial(handle)[None]
        assert est.estimator == pytest.approx(truth)
        assert est.width == 0.0

    def test_groupby_stratified_exact_at_completion(self):
        rng = np.random.default_rng(29)
        n = 4000
        table = Table(GROUP_SCHEMA, {
            "g": np.array([f"g{i}" for i in rng.integers(0, 3, size=n)], dtype=object),
            "value": rng.integers(0, 100, size=n).astype(np.int64),
        })
        parts, meta = globally_randomize(table, 4, seed=29)
        plan = QueryPlan((col("value"),), group_by=("g",),
                         model=EstimationModel.MULTIPLE)
        engine = small_engine(chunk_capacity=128)
        handle = engine.submit_query(plan, parts, meta)
        exact, _ = engine.run_to_completion(handle)
        ests = engine.request_partial(handle)
        assert set(ests) == set(exact)
        for key, est in ests.items():
            assert est.estimator == pytest.approx(exact[key][0])
            assert est.width == 0.0

    def test_binary_tree_topology_end_to_end(self):
        table = value_table(range(1, 1001))
        engine = Engine(EngineConfig(chunk_capacity=64, topology="binary-tree"))
        handle = engine.submit_query(flat_plan(), split_table(table, 5))
        total, _ = engine.run_to_completion(handle)
        assert total == 500500.0
        assert engine.request_partial(handle)[None].estimator == 500500.0

    def test_sync_mode_lock_step_and_correct(self):
        table, parts, meta = self._uniform_parts(n=4000)
        truth = float(table.columns["value"].sum())
        engine = small_engine(chunk_capacity=100)
        handle = engine.submit_query(
            flat_plan(model=EstimationModel.SYNC), parts, meta,
            fault_plan=FaultPlan(delay_ms={i: 2 for i in range(4)}),
        )
        spreads = []
        while not handle.all_nodes_settled():
            fractions = [n.progress / max(n.cardinality, 1) for n in handle.nodes]
            spreads.append(max(fractions) - min(fractions))
            time.sleep(0.01)
        total, _ = engine.run_to_completion(handle)
        assert total == truth
        # Lock-step pacing keeps nodes within one chunk of each other.
        chunk_fraction = 100 / min(n.cardinality for n in handle.nodes)
        assert max(spreads) <= 2 * chunk_fraction + 1e-9


class TestLineitemShapedQuery:
    def test_discounted_revenue_flat_sum(self):
        table = gen_lineitem_like(3000, seed=23)
        parts, meta = globally_randomize(table, 4, seed=23)
        f = col("price") * col("disc")
        pred = between(col("disc"), lit(0.02), lit(0.03))
        plan = QueryPlan((f,), predicate=pred)
        engine = small_engine(chunk_capacity=256)
        handle = engine.submit_query(plan, parts, meta)
        total, _ = engine.run_to_completion(handle)
        assert total == pytest.approx(exact_aggregate(table, f, pred), rel=1e-9)
