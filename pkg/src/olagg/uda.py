"""User-defined aggregates with online-estimation extensions.

Each aggregate couples a query binding (expressions, predicate, grouping)
with mergeable state. The interface follows the classic
Init/Accumulate/Merge/Terminate shape, extended with Serialize/Deserialize
for cross-process transfer and EstimatorTerminate/EstimatorMerge/Estimate
for partial-result estimation. Merge is associative and commutative, so
states combine in any order and along any tree.

States have a single writer at a time; the engine guarantees exclusive
access during accumulate and merge.
"""

from __future__ import annotations

import struct
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import Chunk, PlanError, Row, Schema, Table
from .estimation import (
    BoundsUnavailable,
    Estimate,
    Moments,
    bounds,
    point_estimate,
    variance_estimate,
)
from .expr import Expr, Pred, eval_expr_chunk, eval_pred_chunk

_VERSION = 1
_TAG_SUM = 1
_TAG_GROUPBY = 2
_TAG_JOIN = 3

_KEY_INT = 1
_KEY_FLOAT = 2
_KEY_STR = 3


class SerializationError(ValueError):
    """State bytes are malformed or from an incompatible version."""


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise SerializationError("truncated state buffer")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def read_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise SerializationError("truncated state buffer")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise SerializationError(f"{len(self.data) - self.pos} trailing bytes")


def _pack_str(parts: list, text: str) -> None:
    raw = text.encode("utf-8")
    parts.append(struct.pack("<I", len(raw)))
    parts.append(raw)


def _read_str(r: _Reader) -> str:
    (size,) = r.unpack("<I")
    return r.read_bytes(size).decode("utf-8")


def _pack_key(parts: list, key: tuple) -> None:
    parts.append(struct.pack("<B", len(key)))
    for part in key:
        if isinstance(part, str):
            parts.append(struct.pack("<B", _KEY_STR))
            _pack_str(parts, part)
        elif isinstance(part, (int, np.integer)):
            parts.append(struct.pack("<Bq", _KEY_INT, int(part)))
        else:
            parts.append(struct.pack("<Bd", _KEY_FLOAT, float(part)))


def _read_key(r: _Reader) -> tuple:
    (arity,) = r.unpack("<B")
    out = []
    for _ in range(arity):
        (tag,) = r.unpack("<B")
        if tag == _KEY_STR:
            out.append(_read_str(r))
        elif tag == _KEY_INT:
            out.append(r.unpack("<q")[0])
        elif tag == _KEY_FLOAT:
            out.append(r.unpack("<d")[0])
        else:
            raise SerializationError(f"unknown key part tag {tag}")
    return tuple(out)


def _check_header(r: _Reader, expected_tag: int) -> None:
    tag, version = r.unpack("<BB")
    if version != _VERSION:
        raise SerializationError(f"state version {version} not supported")
    if tag != expected_tag:
        raise SerializationError(f"state tag {tag} does not match aggregate kind")


# Stratum payloads: est plus a flag for defined/undefined variance.
_STRATUM_NONE = 0
_STRATUM_DEFINED = 1
_STRATUM_UNDEFINED = 2


def _pack_stratum(parts: list, est: Optional[float], est_var: Optional[float]) -> None:
    if est is None:
        parts.append(struct.pack("<B", _STRATUM_NONE))
    elif est_var is None:
        parts.append(struct.pack("<Bd", _STRATUM_UNDEFINED, est))
    else:
        parts.append(struct.pack("<Bdd", _STRATUM_DEFINED, est, est_var))


def _read_stratum(r: _Reader) -> tuple[Optional[float], Optional[float]]:
    (flag,) = r.unpack("<B")
    if flag == _STRATUM_NONE:
        return None, None
    if flag == _STRATUM_UNDEFINED:
        return r.unpack("<d")[0], None
    if flag == _STRATUM_DEFINED:
        est, est_var = r.unpack("<dd")
        return est, est_var
    raise SerializationError(f"unknown stratum flag {flag}")


class Uda:
    """Behavioral contract shared by all aggregates."""

    def fresh(self) -> "Uda":
        """A new zero state with the same query binding (Init)."""
        raise NotImplementedError

    def copy(self) -> "Uda":
        raise NotImplementedError

    def accumulate(self, row: Row) -> None:
        raise NotImplementedError

    def accumulate_chunk(self, chunk: Chunk) -> None:
        for row in chunk.tuples:
            self.accumulate(row)

    def merge(self, other: "Uda") -> None:
        """Fold another state of the same binding into this one."""
        raise NotImplementedError

    def terminate(self):
        """Exact result once all data has been accumulated."""
        raise NotImplementedError

    def serialize(self) -> bytes:
        raise NotImplementedError

    def deserialize(self, data: bytes) -> "Uda":
        """Rebuild a state from bytes, reusing this instance's binding."""
        raise NotImplementedError

    def estimator_terminate(self, local_cardinality: int) -> None:
        """Turn local moments into a per-partition stratum estimate."""
        raise NotImplementedError

    def estimator_merge(self, other: "Uda") -> None:
        """Sum this stratum with another partition's stratum."""
        raise NotImplementedError

    def sampled_count(self) -> int:
        """Total tuples accumulated so far (the sample size)."""
        raise NotImplementedError

    def estimate_all(
        self, population: int, confidence: float, sample_fraction: float, at_millis: float
    ) -> dict:
        """Per-group estimates from moments, scaled to `population` (single
        estimator model). Flat aggregates use the single key None."""
        raise NotImplementedError

    def estimate_all_stratified(
        self, confidence: float, sample_fraction: float, at_millis: float
    ) -> dict:
        """Per-group estimates from merged strata (multiple estimators)."""
        raise NotImplementedError


def _stratum_from_moments(
    total: float, total_sq: float, count: int, local_cardinality: int
) -> tuple[Optional[float], Optional[float]]:
    """Local estimator for one partition; variance undefined below 2 samples."""
    if count < 1:
        return None, None
    m = Moments(total, total_sq, count)
    est = point_estimate(m, local_cardinality)
    if count < 2:
        return est, None
    return est, variance_estimate(m, local_cardinality)


class SumUda(Uda):
    """SUM(f(t)) WHERE P(t), with moments for online estimation.

    `count` advances for every accumulated tuple whether or not it passes the
    predicate: the estimator scales by the total sample size, and tuples
    rejected by P are still part of the sample.
    """

    def __init__(self, f: Expr, p: Pred):
        self.f = f
        self.p = p
        self.sum = 0.0
        self.sum_sq = 0.0
        self.count = 0
        self.est: Optional[float] = None
        self.est_var: Optional[float] = None
        self.has_stratum = False

    def fresh(self) -> "SumUda":
        return SumUda(self.f, self.p)

    def copy(self) -> "SumUda":
        out = SumUda(self.f, self.p)
        out.sum, out.sum_sq, out.count = self.sum, self.sum_sq, self.count
        out.est, out.est_var, out.has_stratum = self.est, self.est_var, self.has_stratum
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SumUda):
            return NotImplemented
        return (
            self.sum == other.sum
            and self.sum_sq == other.sum_sq
            and self.count == other.count
            and self.est == other.est
            and self.est_var == other.est_var
            and self.has_stratum == other.has_stratum
        )

    def accumulate(self, row: Row) -> None:
        self.count += 1
        if self.p.scalar(row):
            v = float(self.f.scalar(row))
            self.sum += v
            self.sum_sq += v * v

    def accumulate_chunk(self, chunk: Chunk) -> None:
        mask = eval_pred_chunk(self.p, chunk)
        values = eval_expr_chunk(self.f, chunk)
        if not mask.all():
            values = values[mask]
        self.count += len(chunk)
        if len(values):
            self.sum += float(values.sum())
            self.sum_sq += float(values @ values)

    def merge(self, other: "SumUda") -> None:
        self.sum += other.sum
        self.sum_sq += other.sum_sq
        self.count += other.count

    def terminate(self) -> float:
        return self.sum

    def sampled_count(self) -> int:
        return self.count

    @property
    def moments(self) -> Moments:
        return Moments(self.sum, self.sum_sq, self.count)

    def serialize(self) -> bytes:
        parts = [struct.pack("<BBddq", _TAG_SUM, _VERSION, self.sum, self.sum_sq, self.count)]
        if self.has_stratum:
            _pack_stratum(parts, self.est, self.est_var)
        else:
            parts.append(struct.pack("<B", _STRATUM_NONE))
        return b"".join(parts)

    def deserialize(self, data: bytes) -> "SumUda":
        r = _Reader(data)
        _check_header(r, _TAG_SUM)
        out = self.fresh()
        out.sum, out.sum_sq, out.count = r.unpack("<ddq")
        out.est, out.est_var = _read_stratum(r)
        out.has_stratum = out.est is not None
        r.done()
        return out

    def estimator_terminate(self, local_cardinality: int) -> None:
        self.est, self.est_var = _stratum_from_moments(
            self.sum, self.sum_sq, self.count, local_cardinality
        )
        self.has_stratum = True

    def estimator_merge(self, other: "SumUda") -> None:
        if not (self.has_stratum and other.has_stratum):
            raise PlanError("estimator_merge before estimator_terminate")
        if self.est is None or other.est is None:
            self.est = None
            self.est_var = None
            return
        self.est += other.est
        if self.est_var is None or other.est_var is None:
            self.est_var = None
        else:
            self.est_var += other.est_var

    def estimate(
        self, population: int, confidence: float, sample_fraction: float, at_millis: float
    ) -> Estimate:
        m = self.moments
        est = point_estimate(m, population)
        var = variance_estimate(m, population)
        lo, hi = bounds(est, var, confidence)
        return Estimate(est, lo, hi, confidence, sample_fraction, at_millis)

    def estimate_from_stratum(
        self, confidence: float, sample_fraction: float, at_millis: float
    ) -> Estimate:
        if not self.has_stratum:
            raise PlanError("no stratum estimate; run estimator_terminate/merge first")
        if self.est is None or self.est_var is None:
            raise BoundsUnavailable("infinite variance: stratum undefined")
        lo, hi = bounds(self.est, self.est_var, confidence)
        return Estimate(self.est, lo, hi, confidence, sample_fraction, at_millis)

    def estimate_all(self, population, confidence, sample_fraction, at_millis) -> dict:
        return {None: self.estimate(population, confidence, sample_fraction, at_millis)}

    def estimate_all_stratified(self, confidence, sample_fraction, at_millis) -> dict:
        return {None: self.estimate_from_stratum(confidence, sample_fraction, at_millis)}


class GroupByUda(Uda):
    """GROUP BY aggregation: a map of per-group moments over one or more
    aggregate expressions, sharing a single global sample counter.

    Each group is estimated as its own query whose predicate additionally
    selects the group, so the sample size of every group's estimator is the
    global `total_seen`, not the group's own qualifying count. Groups are
    created only by tuples that pass the predicate.
    """

    def __init__(self, group_by: Sequence[str], aggs: Sequence[Expr], p: Pred):
        if not group_by:
            raise PlanError("group-by aggregate needs at least one grouping column")
        if not aggs:
            raise PlanError("at least one aggregate expression required")
        self.group_by = tuple(group_by)
        self.aggs = tuple(aggs)
        self.p = p
        self.total_seen = 0
        # key -> [sum, sum_sq, qualifying_count] per aggregate
        self.groups: dict[tuple, list[list]] = {}
        self.has_stratum = False
        self.stratum_defined = False
        # key -> [(est, est_var)] per aggregate, after estimator_terminate
        self.strata: dict[tuple, list[tuple[float, Optional[float]]]] = {}

    def fresh(self) -> "GroupByUda":
        return GroupByUda(self.group_by, self.aggs, self.p)

    def copy(self) -> "GroupByUda":
        out = self.fresh()
        out.total_seen = self.total_seen
        out.groups = {k: [cell[:] for cell in cells] for k, cells in self.groups.items()}
        out.has_stratum = self.has_stratum
        out.stratum_defined = self.stratum_defined
        out.strata = {k: list(v) for k, v in self.strata.items()}
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupByUda):
            return NotImplemented
        return (
            self.total_seen == other.total_seen
            and self.groups == other.groups
            and self.has_stratum == other.has_stratum
            and self.stratum_defined == other.stratum_defined
            and self.strata == other.strata
        )

    def _key_of(self, row: Row) -> tuple:
        return tuple(row[name] for name in self.group_by)

    def _accumulate_qualifying(self, row: Row) -> None:
        key = self._key_of(row)
        cells = self.groups.get(key)
        if cells is None:
            cells = [[0.0, 0.0, 0] for _ in self.aggs]
            self.groups[key] = cells
        for cell, f in zip(cells, self.aggs):
            v = float(f.scalar(row))
            cell[0] += v
            cell[1] += v * v
            cell[2] += 1

    def accumulate(self, row: Row) -> None:
        self.total_seen += 1
        if self.p.scalar(row):
            self._accumulate_qualifying(row)

    def accumulate_chunk(self, chunk: Chunk) -> None:
        self.total_seen += len(chunk)
        mask = eval_pred_chunk(self.p, chunk)
        if not mask.any():
            return
        key_cols = [chunk.column(name)[mask] for name in self.group_by]
        value_cols = [eval_expr_chunk(f, chunk)[mask] for f in self.aggs]
        groups = self.groups
        n_aggs = len(self.aggs)
        for i, key in enumerate(zip(*key_cols)):
            key = tuple(k.item() if isinstance(k, np.generic) else k for k in key)
            cells = groups.get(key)
            if cells is None:
                cells = [[0.0, 0.0, 0] for _ in range(n_aggs)]
                groups[key] = cells
            for j in range(n_aggs):
                v = value_cols[j][i]
                cell = cells[j]
                cell[0] += v
                cell[1] += v * v
                cell[2] += 1

    def merge(self, other: "GroupByUda") -> None:
        self.total_seen += other.total_seen
        for key, cells in other.groups.items():
            mine = self.groups.get(key)
            if mine is None:
                self.groups[key] = [cell[:] for cell in cells]
            else:
                for m, c in zip(mine, cells):
                    m[0] += c[0]
                    m[1] += c[1]
                    m[2] += c[2]

    def terminate(self) -> dict[tuple, tuple[float, ...]]:
        return {key: tuple(cell[0] for cell in cells) for key, cells in self.groups.items()}

    def sampled_count(self) -> int:
        return self.total_seen

    def serialize(self) -> bytes:
        parts = [
            struct.pack(
                "<BBqHI?B",
                _TAG_GROUPBY,
                _VERSION,
                self.total_seen,
                len(self.aggs),
                len(self.groups),
                self.stratum_defined,
                1 if self.has_stratum else 0,
            )
        ]
        for key, cells in self.groups.items():
            _pack_key(parts, key)
            for cell in cells:
                parts.append(struct.pack("<ddq", cell[0], cell[1], cell[2]))
        if self.has_stratum:
            parts.append(struct.pack("<I", len(self.strata)))
            for key, strata in self.strata.items():
                _pack_key(parts, key)
                for est, est_var in strata:
                    _pack_stratum(parts, est, est_var)
        return b"".join(parts)

    def deserialize(self, data: bytes) -> "GroupByUda":
        r = _Reader(data)
        _check_header(r, _TAG_GROUPBY)
        out = self.fresh()
        out.total_seen, n_aggs, n_groups, out.stratum_defined, has_stratum = r.unpack("<qHI?B")
        if n_aggs != len(self.aggs):
            raise SerializationError(
                f"state carries {n_aggs} aggregates, binding has {len(self.aggs)}"
            )
        for _ in range(n_groups):
            key = _read_key(r)
            out.groups[key] = [list(r.unpack("<ddq")) for _ in range(n_aggs)]
        out.has_stratum = bool(has_stratum)
        if out.has_stratum:
            (n_strata,) = r.unpack("<I")
            for _ in range(n_strata):
                key = _read_key(r)
                out.strata[key] = [_read_stratum(r) for _ in range(n_aggs)]
        r.done()
        return out

    def estimator_terminate(self, local_cardinality: int) -> None:
        self.strata = {}
        self.stratum_defined = self.total_seen >= 2
        for key, cells in self.groups.items():
            self.strata[key] = [
                _stratum_from_moments(cell[0], cell[1], self.total_seen, local_cardinality)
                for cell in cells
            ]
        self.has_stratum = True

    def estimator_merge(self, other: "GroupByUda") -> None:
        if not (self.has_stratum and other.has_stratum):
            raise PlanError("estimator_merge before estimator_terminate")
        # A defined stratum that simply never saw a group contributes a zero
        # estimate with zero estimated variance for it.
        for key in set(self.strata) | set(other.strata):
            merged = []
            for j in range(len(self.aggs)):
                mine = self.strata.get(key, [(0.0, 0.0)] * len(self.aggs))[j]
                theirs = other.strata.get(key, [(0.0, 0.0)] * len(self.aggs))[j]
                if not self.stratum_defined:
                    mine = (mine[0] if mine[0] is not None else 0.0, None)
                if not other.stratum_defined:
                    theirs = (theirs[0] if theirs[0] is not None else 0.0, None)
                est = (mine[0] or 0.0) + (theirs[0] or 0.0)
                var = (
                    mine[1] + theirs[1]
                    if mine[1] is not None and theirs[1] is not None
                    else None
                )
                merged.append((est, var))
            self.strata[key] = merged
        self.stratum_defined = self.stratum_defined and other.stratum_defined

    def group_moments(self, key: tuple, agg: int = 0) -> Moments:
        cells = self.groups.get(key)
        if cells is None:
            raise PlanError(f"unknown group {key!r}")
        cell = cells[agg]
        return Moments(cell[0], cell[1], self.total_seen)

    def estimate(
        self,
        key: tuple,
        population: int,
        confidence: float,
        sample_fraction: float,
        at_millis: float,
        agg: int = 0,
    ) -> Estimate:
        m = self.group_moments(key, agg)
        est = point_estimate(m, population)
        var = variance_estimate(m, population)
        lo, hi = bounds(est, var, confidence)
        return Estimate(est, lo, hi, confidence, sample_fraction, at_millis)

    def estimate_all(self, population, confidence, sample_fraction, at_millis) -> dict:
        return {
            key: self.estimate(key, population, confidence, sample_fraction, at_millis)
            for key in self.groups
        }

    def estimate_all_stratified(self, confidence, sample_fraction, at_millis) -> dict:
        if not self.has_stratum:
            raise PlanError("no stratum estimate; run estimator_terminate/merge first")
        if not self.stratum_defined:
            raise BoundsUnavailable("infinite variance: at least one stratum undefined")
        out = {}
        for key, strata in self.strata.items():
            est, var = strata[0]
            if var is None:
                raise BoundsUnavailable("infinite variance: stratum undefined")
            lo, hi = bounds(est, var, confidence)
            out[key] = Estimate(est, lo, hi, confidence, sample_fraction, at_millis)
        return out


class JoinUda(Uda):
    """Join of a scanned fact table against a replicated in-memory dimension,
    feeding concatenated rows into a group-by aggregate.

    The fact tuple is the sampling unit: the sample counter advances once per
    fact tuple no matter how many dimension rows it matches, so the flat
    estimator applies with the fact table as the population.
    """

    def __init__(
        self,
        fact_schema: Schema,
        dim_table: Table,
        fact_key: str,
        dim_key: str,
        group_by: Sequence[str],
        aggs: Sequence[Expr],
        p: Pred,
        dim_cap: int = 10**6,
    ):
        if len(dim_table) > dim_cap:
            raise PlanError(
                f"dimension table has {len(dim_table)} rows, above the cap {dim_cap}"
            )
        self.fact_schema = fact_schema
        self.dim_table = dim_table
        self.fact_key = fact_key
        self.dim_key = dim_key
        self.joined_schema = fact_schema.concat(dim_table.schema, prefix="dim_")
        self.hash_table: dict = {}
        dim_rows = dim_table.rows()
        key_idx = dim_table.schema.index_of(dim_key)
        for row in dim_rows:
            self.hash_table.setdefault(row.values[key_idx], []).append(row)
        self.inner = GroupByUda(group_by, aggs, p)
        # Bindings must resolve against the concatenated row.
        for f in aggs:
            f.infer_kind(self.joined_schema)
        p.validate(self.joined_schema)

    def fresh(self) -> "JoinUda":
        out = JoinUda.__new__(JoinUda)
        out.fact_schema = self.fact_schema
        out.dim_table = self.dim_table
        out.fact_key = self.fact_key
        out.dim_key = self.dim_key
        out.joined_schema = self.joined_schema
        out.hash_table = self.hash_table
        out.inner = self.inner.fresh()
        return out

    def copy(self) -> "JoinUda":
        out = self.fresh()
        out.inner = self.inner.copy()
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, JoinUda):
            return NotImplemented
        return self.inner == other.inner

    def accumulate(self, row: Row) -> None:
        self.inner.total_seen += 1
        matches = self.hash_table.get(row[self.fact_key])
        if not matches:
            return
        for dim_row in matches:
            joined = Row(self.joined_schema, row.values + dim_row.values)
            if self.inner.p.scalar(joined):
                self.inner._accumulate_qualifying(joined)

    def accumulate_chunk(self, chunk: Chunk) -> None:
        key_idx = self.fact_schema.index_of(self.fact_key)
        for row in chunk.tuples:
            self.inner.total_seen += 1
            matches = self.hash_table.get(row.values[key_idx])
            if not matches:
                continue
            for dim_row in matches:
                joined = Row(self.joined_schema, row.values + dim_row.values)
                if self.inner.p.scalar(joined):
                    self.inner._accumulate_qualifying(joined)

    def merge(self, other: "JoinUda") -> None:
        self.inner.merge(other.inner)

    def terminate(self):
        return self.inner.terminate()

    def sampled_count(self) -> int:
        return self.inner.total_seen

    def serialize(self) -> bytes:
        payload = self.inner.serialize()
        return struct.pack("<BB", _TAG_JOIN, _VERSION) + payload

    def deserialize(self, data: bytes) -> "JoinUda":
        r = _Reader(data)
        _check_header(r, _TAG_JOIN)
        out = self.fresh()
        out.inner = self.inner.deserialize(data[r.pos :])
        return out

    def estimator_terminate(self, local_cardinality: int) -> None:
        self.inner.estimator_terminate(local_cardinality)

    def estimator_merge(self, other: "JoinUda") -> None:
        self.inner.estimator_merge(other.inner)

    def estimate_all(self, population, confidence, sample_fraction, at_millis) -> dict:
        return self.inner.estimate_all(population, confidence, sample_fraction, at_millis)

    def estimate_all_stratified(self, confidence, sample_fraction, at_millis) -> dict:
        return self.inner.estimate_all_stratified(confidence, sample_fraction, at_millis)


def merge_tree(states: Sequence[Uda]) -> Uda:
    """Merge states pairwise level by level, as along an aggregation tree."""
    if not states:
        raise PlanError("nothing to merge")
    level = [s.copy() for s in states]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            level[i].merge(level[i + 1])
            nxt.append(level[i])
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def merge_centralized(states: Sequence[Uda]) -> Uda:
    """Merge states one by one into a single coordinator-held state."""
    if not states:
        raise PlanError("nothing to merge")
    out = states[0].copy()
    for s in states[1:]:
        out.merge(s)
    return out


def iter_group_keys(state: Uda) -> Iterator:
    if isinstance(state, SumUda):
        yield None
    elif isinstance(state, GroupByUda):
        yield from state.groups
    elif isinstance(state, JoinUda):
        yield from state.inner.groups
