"""Global data randomization and synthetic dataset generators.

Randomization runs in two stages: every item is first assigned to a node by
hashing a fresh random draw (never the item's position), then each node sorts
its received items by new per-item draws. After both stages, any prefix of
any partition is an unbiased sample of the whole dataset. Reusing the origin
node's draws for the second stage would not yield a random permutation, so
the permutation stage always draws fresh values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DatasetMeta, Kind, PlanError, Schema, Table

_U64 = np.uint64


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized 64-bit finalizer; uniform output for uniform input."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> _U64(30)
    x *= _U64(0xBF58476D1CE4E5B9)
    x ^= x >> _U64(27)
    x *= _U64(0x94D049BB133111EB)
    x ^= x >> _U64(31)
    return x


class SeededRng:
    """Reproducible counter-based generator; independent streams per path.

    Same (seed, path) always produces the same stream, and distinct paths
    give statistically independent streams, so per-node and per-stage draws
    never collide.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = seed
        self.path = path
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(seed, spawn_key=path))
        )

    def draws_u64(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2**64, size=n, dtype=np.uint64)

    def draws_unit(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


@dataclass
class HashAssigner:
    """Maps a per-item random 64-bit draw to a node bucket in 0..n_nodes-1."""

    n_nodes: int
    mix: Callable[[np.ndarray], np.ndarray] = field(default=splitmix64)

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise PlanError(f"node count must be >= 1, got {self.n_nodes}")

    def buckets(self, draws: np.ndarray) -> np.ndarray:
        return (self.mix(np.asarray(draws, dtype=np.uint64)) % _U64(self.n_nodes)).astype(
            np.int64
        )


def random_split(
    data: Table, assigner: HashAssigner, draws: Optional[np.ndarray] = None,
    rng: Optional[SeededRng] = None,
) -> list[Table]:
    """Scatter items into one fragment per node using fresh random draws.

    Every item lands in exactly one fragment; the fragments partition the
    input multiset. Scripted draws may be passed for testing.
    """
    if draws is None:
        if rng is None:
            raise PlanError("random_split needs either draws or an rng")
        draws = rng.draws_u64(len(data))
    if len(draws) != len(data):
        raise PlanError("one draw per item required")
    buckets = assigner.buckets(draws)
    return [data.take(np.nonzero(buckets == k)[0]) for k in range(assigner.n_nodes)]


def random_permutation(
    fragments: Sequence[Table], rng: Optional[SeededRng] = None,
    draws: Optional[np.ndarray] = None,
) -> Table:
    """Concatenate received fragments and sort them by fresh per-item draws.

    Ties break by input index, so the output is deterministic given the
    draws. The draws must come from this node's own stream, not from the
    origin nodes.
    """
    if not fragments:
        raise PlanError("at least one (possibly empty) fragment required")
    merged = fragments[0]
    for frag in fragments[1:]:
        merged = merged.concat_rows(frag)
    if draws is None:
        if rng is None:
            raise PlanError("random_permutation needs either draws or an rng")
        draws = rng.draws_u64(len(merged))
    if len(draws) != len(merged):
        raise PlanError("one draw per item required")
    order = np.argsort(draws, kind="stable")
    return merged.take(order)


def globally_randomize(
    data: Table, n_nodes: int, seed: int, local_only: bool = False
) -> tuple[list[Table], DatasetMeta]:
    """Shuffle a dataset into n_nodes partitions plus cardinality metadata.

    Global mode hash-scatters items then permutes within each node; any
    partition prefix is then a sample of the whole dataset. Local mode keeps
    the original contiguous blocks and only permutes within each, which is
    cheaper but relies on the input order being benign.
    """
    if n_nodes < 1:
        raise PlanError(f"node count must be >= 1, got {n_nodes}")
    if local_only:
        bounds = np.linspace(0, len(data), n_nodes + 1).astype(np.int64)
        fragments = [data.slice(int(a), int(b)) for a, b in zip(bounds, bounds[1:])]
    else:
        assigner = HashAssigner(n_nodes)
        fragments = random_split(data, assigner, rng=SeededRng(seed, 0))
    partitions = [
        random_permutation([frag], rng=SeededRng(seed, 1, node))
        for node, frag in enumerate(fragments)
    ]
    meta = DatasetMeta.from_partitions([len(p) for p in partitions])
    return partitions, meta


# --- Synthetic datasets -----------------------------------------------------

VALUE_SCHEMA = Schema.of(("value", Kind.INT))

LINEITEM_SCHEMA = Schema.of(
    ("price", Kind.FLOAT),
    ("disc", Kind.FLOAT),
    ("tax", Kind.FLOAT),
    ("quantity", Kind.INT),
    ("shipdate", Kind.DATE),
    ("suppkey", Kind.INT),
    ("returnflag", Kind.STR),
    ("linestatus", Kind.STR),
)

LINEITEM_MAX_QUANTITY = 50
_LINEITEM_SUPPLIERS = 10_000
_LINEITEM_FIRST_DAY = 8036   # 1992-01-02
_LINEITEM_LAST_DAY = 10561   # 1998-12-01


def gen_zipf(n: int, domain_size: int, skew: float, seed: int) -> Table:
    """n integer items over 1..domain_size with frequency proportional to
    rank^-skew; which element gets which frequency is itself randomized."""
    if n < 1 or domain_size < 1:
        raise PlanError("need n >= 1 and domain_size >= 1")
    if skew < 0:
        raise PlanError(f"skew must be nonnegative, got {skew}")
    gen = SeededRng(seed, 100).generator
    if skew == 0.0:
        values = gen.integers(1, domain_size + 1, size=n, dtype=np.int64)
        return Table(VALUE_SCHEMA, {"value": values})
    weights = np.arange(1, domain_size + 1, dtype=np.float64) ** (-skew)
    cdf = np.cumsum(weights / weights.sum())
    ranks = np.searchsorted(cdf, gen.random(n), side="right")
    ranks = np.minimum(ranks, domain_size - 1)
    element_of_rank = gen.permutation(domain_size).astype(np.int64) + 1
    return Table(VALUE_SCHEMA, {"value": element_of_rank[ranks]})


def gen_outlier(n: int, k_outliers: int, magnitude: float, seed: int = 0) -> Table:
    """n items of value 1 except k_outliers items of `magnitude`, at random
    positions."""
    if not 0 <= k_outliers <= n:
        raise PlanError(f"need 0 <= k_outliers <= n, got k={k_outliers}, n={n}")
    values = np.ones(n, dtype=np.int64)
    if k_outliers:
        gen = SeededRng(seed, 101).generator
        positions = gen.choice(n, size=k_outliers, replace=False)
        values[positions] = int(magnitude)
    return Table(VALUE_SCHEMA, {"value": values})


def gen_lineitem_like(n: int, seed: int) -> Table:
    """A fact table shaped like a retail line-items feed: price, discount,
    tax, quantity, ship date, supplier key and two short flag columns.
    Distributions are near-uniform within realistic ranges; fully
    deterministic per seed."""
    if n < 1:
        raise PlanError(f"need n >= 1, got {n}")
    gen = SeededRng(seed, 102).generator
    columns = {
        "price": np.round(gen.uniform(900.0, 105000.0, size=n), 2),
        "disc": gen.integers(0, 11, size=n).astype(np.float64) / 100.0,
        "tax": gen.integers(0, 9, size=n).astype(np.float64) / 100.0,
        "quantity": gen.integers(1, LINEITEM_MAX_QUANTITY + 1, size=n, dtype=np.int64),
        "shipdate": gen.integers(_LINEITEM_FIRST_DAY, _LINEITEM_LAST_DAY + 1, size=n,
                                 dtype=np.int64),
        "suppkey": gen.integers(1, _LINEITEM_SUPPLIERS + 1, size=n, dtype=np.int64),
        "returnflag": np.array(["A", "N", "R"], dtype=object)[gen.integers(0, 3, size=n)],
        "linestatus": np.array(["F", "O"], dtype=object)[gen.integers(0, 2, size=n)],
    }
    return Table(LINEITEM_SCHEMA, columns)
