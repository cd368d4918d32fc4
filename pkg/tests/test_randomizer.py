import numpy as np
import pytest
from scipy.stats import chi2

from olagg.core import Kind, PlanError, Schema, Table
from olagg.randomizer import (
    LINEITEM_MAX_QUANTITY,
    HashAssigner,
    SeededRng,
    gen_lineitem_like,
    gen_outlier,
    gen_zipf,
    globally_randomize,
    random_permutation,
    random_split,
)

from oracles import value_table

LETTERS = Schema.of(("item", Kind.STR))


def letter_table(items):
    return Table(LETTERS, {"item": np.array(list(items), dtype=object)})


def items_of(table):
    return list(table.columns["item"])


class TestRandomSplit:
    def test_single_node_keeps_everything(self):
        table = letter_table("abcd")
        frags = random_split(table, HashAssigner(1), rng=SeededRng(0, 0))
        assert len(frags) == 1
        assert items_of(frags[0]) == list("abcd")

    def test_empty_input_gives_empty_fragments(self):
        frags = random_split(letter_table(""), HashAssigner(3), rng=SeededRng(0, 0))
        assert [len(f) for f in frags] == [0, 0, 0]

    def test_scripted_draws_force_assignment(self):
        assigner = HashAssigner(2, mix=lambda x: x)
        frags = random_split(
            letter_table("abcd"), assigner, draws=np.array([0, 1, 0, 1], dtype=np.uint64)
        )
        assert items_of(frags[0]) == ["a", "c"]
        assert items_of(frags[1]) == ["b", "d"]

    def test_multiset_preserved_with_duplicates(self):
        values = [5, 1, 5, 5, 2, 1]
        frags = random_split(value_table(values), HashAssigner(3), rng=SeededRng(9, 0))
        recombined = sorted(
            int(v) for f in frags for v in f.columns["value"]
        )
        assert recombined == sorted(values)

    def test_invalid_node_count(self):
        with pytest.raises(PlanError):
            HashAssigner(0)


class TestRandomPermutation:
    def test_single_item(self):
        out = random_permutation([letter_table("a")], rng=SeededRng(1, 1, 0))
        assert items_of(out) == ["a"]

    def test_scripted_draws_force_order(self):
        out = random_permutation(
            [letter_table("abc")], draws=np.array([0.9, 0.1, 0.5])
        )
        assert items_of(out) == ["b", "c", "a"]

    def test_ties_break_by_input_index(self):
        out = random_permutation(
            [letter_table("abcd")], draws=np.array([0.5, 0.5, 0.1, 0.5])
        )
        assert items_of(out) == ["c", "a", "b", "d"]

    def test_same_seed_same_order(self):
        a = random_permutation([letter_table("abcdefgh")], rng=SeededRng(3, 1, 2))
        b = random_permutation([letter_table("abcdefgh")], rng=SeededRng(3, 1, 2))
        assert items_of(a) == items_of(b)


class TestGloballyRandomize:
    def test_single_node_is_shuffled_whole(self):
        table = value_table(range(100))
        parts, meta = globally_randomize(table, 1, seed=5)
        assert len(parts) == 1
        assert meta.total_cardinality == 100
        assert sorted(int(v) for v in parts[0].columns["value"]) == list(range(100))

    def test_determinism(self):
        table = value_table(range(50))
        a, _ = globally_randomize(table, 4, seed=11)
        b, _ = globally_randomize(table, 4, seed=11)
        for x, y in zip(a, b):
            assert np.array_equal(x.columns["value"], y.columns["value"])

    def test_multiset_preserved(self):
        values = list(range(40)) * 3
        parts, meta = globally_randomize(value_table(values), 5, seed=2)
        combined = sorted(int(v) for p in parts for v in p.columns["value"])
        assert combined == sorted(values)
        assert meta.total_cardinality == len(values)

    def test_placement_uniformity_chi_square(self):
        # Where each item lands, across many seeds: counts should look
        # multinomial-uniform over the 4 nodes.
        n_items, n_nodes, n_seeds = 100, 4, 1000
        table = value_table(range(n_items))
        counts = np.zeros((n_items, n_nodes), dtype=np.int64)
        for seed in range(n_seeds):
            parts, _ = globally_randomize(table, n_nodes, seed=seed)
            for node, part in enumerate(parts):
                counts[part.columns["value"], node] += 1
        expected = n_seeds / n_nodes
        assert counts.min() >= expected - 50
        assert counts.max() <= expected + 50
        stat = ((counts - expected) ** 2 / expected).sum()
        dof = n_items * (n_nodes - 1)
        assert chi2.sf(stat, dof) > 0.001

    def test_prefix_is_unbiased_sample(self):
        # The first k tuples of a partition average out to the dataset mean.
        values = np.arange(100)
        table = value_table(values)
        k, seeds = 10, 400
        samples = []
        for seed in range(seeds):
            parts, _ = globally_randomize(table, 4, seed=seed)
            samples.extend(parts[0].columns["value"][:k].tolist())
        mean = np.mean(samples)
        se = values.std() / np.sqrt(len(samples))
        assert abs(mean - values.mean()) < 3 * se

    def test_local_mode_permutes_contiguous_blocks(self):
        table = value_table(range(100))
        parts, _ = globally_randomize(table, 4, seed=7, local_only=True)
        for i, part in enumerate(parts):
            block = set(range(25 * i, 25 * (i + 1)))
            assert set(int(v) for v in part.columns["value"]) == block

    def test_permutation_uses_fresh_per_node_streams(self):
        # The second stage must re-draw at the destination node: partitions
        # reproduce exactly from the per-node streams keyed (seed, 1, node).
        table = value_table(range(60))
        seed = 13
        parts, _ = globally_randomize(table, 3, seed=seed)
        frags = random_split(table, HashAssigner(3), rng=SeededRng(seed, 0))
        for node, frag in enumerate(frags):
            expected = random_permutation([frag], rng=SeededRng(seed, 1, node))
            assert np.array_equal(parts[node].columns["value"], expected.columns["value"])


class TestGenerators:
    def test_zipf_uniform_at_zero_skew(self):
        n, domain = 1_000_000, 1000
        table = gen_zipf(n, domain, 0.0, seed=1)
        counts = np.bincount(table.columns["value"], minlength=domain + 1)[1:]
        p = 1.0 / domain
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts - n * p).max() < 5 * sigma

    def test_zipf_degenerate_domain(self):
        table = gen_zipf(1000, 1, 1.5, seed=2)
        assert np.all(table.columns["value"] == 1)

    def test_zipf_top_frequency_matches_harmonic_normalization(self):
        n, domain, skew = 100_000, 10, 1.0
        table = gen_zipf(n, domain, skew, seed=3)
        counts = np.bincount(table.columns["value"], minlength=domain + 1)[1:]
        h10 = sum(1.0 / k for k in range(1, 11))
        p_top = 1.0 / h10
        sigma = np.sqrt(n * p_top * (1 - p_top))
        assert abs(counts.max() - n * p_top) < 3 * sigma

    def test_zipf_rejects_bad_parameters(self):
        for args in [(0, 10, 1.0), (10, 0, 1.0), (10, 10, -1.0)]:
            with pytest.raises(PlanError):
                gen_zipf(*args, seed=0)

    def test_outlier_constant_when_k_zero(self):
        table = gen_outlier(1000, 0, 10**9)
        assert int(table.columns["value"].sum()) == 1000

    def test_outlier_sum_arithmetic(self):
        n = 1_000_000
        table = gen_outlier(n, 1, 10**9, seed=4)
        assert int(table.columns["value"].sum()) == n - 1 + 10**9

    def test_all_outliers(self):
        table = gen_outlier(10, 10, 7, seed=5)
        assert np.all(table.columns["value"] == 7)

    def test_outlier_count_validated(self):
        with pytest.raises(PlanError):
            gen_outlier(5, 6, 10)

    def test_lineitem_reproducible(self):
        a = gen_lineitem_like(10, seed=6)
        b = gen_lineitem_like(10, seed=6)
        for name in a.schema.names:
            assert np.array_equal(a.columns[name], b.columns[name])

    def test_lineitem_discount_range(self):
        table = gen_lineitem_like(5000, seed=7)
        disc = table.columns["disc"]
        assert disc.min() >= 0.0 and disc.max() <= 0.1

    def test_lineitem_quantity_selectivity(self):
        n = 1_000_000
        table = gen_lineitem_like(n, seed=8)
        hits = int((table.columns["quantity"] == 1).sum())
        p = 1.0 / LINEITEM_MAX_QUANTITY
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(hits - n * p) < 3 * sigma
