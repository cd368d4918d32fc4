"""Core data model: typed values, schemas, rows, columnar tables, and chunks.

A Table stores one numpy array per column; Row and Chunk are lightweight
views over it. Chunks are the unit of parallel work in the engine.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

_EPOCH = datetime.date(1970, 1, 1).toordinal()


class PlanError(ValueError):
    """A query, schema, or configuration failed validation."""


class EvalError(RuntimeError):
    """Expression evaluation failed at runtime (e.g. division by zero)."""


class Kind(Enum):
    INT = "int"
    FLOAT = "float"
    DATE = "date"
    STR = "str"

    @property
    def numeric(self) -> bool:
        return self in (Kind.INT, Kind.FLOAT)


_DTYPES = {
    Kind.INT: np.int64,
    Kind.FLOAT: np.float64,
    Kind.DATE: np.int64,
    Kind.STR: object,
}


def date_to_days(text: str) -> int:
    """Convert an ISO date string to days since 1970-01-01."""
    return datetime.date.fromisoformat(text).toordinal() - _EPOCH


def days_to_date(days: int) -> str:
    return datetime.date.fromordinal(int(days) + _EPOCH).isoformat()


@dataclass(frozen=True)
class Schema:
    """Ordered list of (name, kind) columns with unique names."""

    columns: tuple[tuple[str, Kind], ...]

    def __post_init__(self) -> None:
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise PlanError(f"duplicate column names in schema: {names}")

    @classmethod
    def of(cls, *cols: tuple[str, Kind]) -> "Schema":
        return cls(tuple(cols))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.columns)

    def kind_of(self, name: str) -> Kind:
        for col, kind in self.columns:
            if col == name:
                return kind
        raise PlanError(f"unknown column {name!r}; schema has {list(self.names)}")

    def index_of(self, name: str) -> int:
        for i, (col, _) in enumerate(self.columns):
            if col == name:
                return i
        raise PlanError(f"unknown column {name!r}; schema has {list(self.names)}")

    def concat(self, other: "Schema", prefix: str = "") -> "Schema":
        """Schema of concatenated rows; `prefix` disambiguates clashing names."""
        cols = list(self.columns)
        taken = set(self.names)
        for name, kind in other.columns:
            out = prefix + name if (prefix and name in taken) else name
            if out in taken:
                raise PlanError(f"column {out!r} appears in both schemas")
            cols.append((out, kind))
            taken.add(out)
        return Schema(tuple(cols))

    def header(self) -> str:
        return ",".join(f"{name}:{kind.value}" for name, kind in self.columns)

    @classmethod
    def from_header(cls, header: str) -> "Schema":
        cols = []
        for part in header.strip().split(","):
            name, _, kind = part.partition(":")
            if not kind:
                raise PlanError(f"malformed schema header field {part!r}")
            try:
                cols.append((name, Kind(kind)))
            except ValueError:
                raise PlanError(f"unknown column kind {kind!r}") from None
        return cls(tuple(cols))


@dataclass(frozen=True)
class Row:
    """One tuple of values matching a schema."""

    schema: Schema
    values: tuple

    def __post_init__(self) -> None:
        if len(self.values) != len(self.schema.columns):
            raise PlanError(
                f"row arity {len(self.values)} != schema arity {len(self.schema.columns)}"
            )

    def __getitem__(self, name: str):
        return self.values[self.schema.index_of(name)]

    def concat(self, other: "Row", schema: Schema) -> "Row":
        return Row(schema, self.values + other.values)


class Table:
    """Columnar table: one numpy array per column, equal lengths."""

    def __init__(self, schema: Schema, columns: dict[str, np.ndarray]):
        self.schema = schema
        self.columns = columns
        lengths = {len(arr) for arr in columns.values()}
        if set(columns) != set(schema.names) or len(lengths) > 1:
            raise PlanError("table columns do not match schema")
        self._n = lengths.pop() if lengths else 0

    def __len__(self) -> int:
        return self._n

    @classmethod
    def from_rows(cls, schema: Schema, rows: Sequence[Sequence]) -> "Table":
        cols = {}
        for i, (name, kind) in enumerate(schema.columns):
            cols[name] = np.array([r[i] for r in rows], dtype=_DTYPES[kind])
        return cls(schema, cols)

    @classmethod
    def empty(cls, schema: Schema) -> "Table":
        return cls(
            schema,
            {name: np.empty(0, dtype=_DTYPES[kind]) for name, kind in schema.columns},
        )

    def row(self, i: int) -> Row:
        return Row(self.schema, tuple(self.columns[n][i] for n in self.schema.names))

    def rows(self) -> list[Row]:
        return [self.row(i) for i in range(self._n)]

    def take(self, indices: np.ndarray) -> "Table":
        return Table(self.schema, {n: arr[indices] for n, arr in self.columns.items()})

    def slice(self, start: int, stop: int) -> "Table":
        return Table(self.schema, {n: arr[start:stop] for n, arr in self.columns.items()})

    def concat_rows(self, other: "Table") -> "Table":
        if other.schema != self.schema:
            raise PlanError("cannot concatenate tables with different schemas")
        return Table(
            self.schema,
            {n: np.concatenate([self.columns[n], other.columns[n]]) for n in self.columns},
        )


@dataclass(frozen=True)
class Chunk:
    """A bounded batch of rows from one partition: the unit of parallel work."""

    table: Table
    sequence_id: int
    origin_node: int = 0

    def __post_init__(self) -> None:
        if len(self.table) < 1:
            raise PlanError("chunk must contain at least one tuple")
        if self.sequence_id < 0:
            raise PlanError("chunk sequence_id must be nonnegative")

    def __len__(self) -> int:
        return len(self.table)

    @property
    def tuples(self) -> list[Row]:
        return self.table.rows()

    def column(self, name: str) -> np.ndarray:
        return self.table.columns[name]


def chunk_stream(partition: Table, capacity: int, origin_node: int = 0) -> Iterator[Chunk]:
    """Yield the partition as chunks of at most `capacity` rows, in order.

    All chunks are full except possibly the last; an empty partition yields
    nothing.
    """
    if capacity < 1:
        raise PlanError(f"chunk capacity must be >= 1, got {capacity}")
    seq = 0
    for start in range(0, len(partition), capacity):
        yield Chunk(partition.slice(start, start + capacity), seq, origin_node)
        seq += 1


@dataclass(frozen=True)
class PartitionMeta:
    node_id: int
    cardinality: int

    def __post_init__(self) -> None:
        if self.cardinality < 0:
            raise PlanError("partition cardinality must be nonnegative")


@dataclass(frozen=True)
class DatasetMeta:
    """Global and per-node cardinalities of a partitioned dataset."""

    total_cardinality: int
    partitions: tuple[PartitionMeta, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.partitions:
            total = sum(p.cardinality for p in self.partitions)
            if total != self.total_cardinality:
                raise PlanError(
                    f"total cardinality {self.total_cardinality} != sum of "
                    f"partition cardinalities {total}"
                )

    @classmethod
    def from_partitions(cls, cards: Sequence[int]) -> "DatasetMeta":
        parts = tuple(PartitionMeta(i, int(c)) for i, c in enumerate(cards))
        return cls(sum(cards), parts)

    def cardinality_of(self, node_id: int) -> int:
        for p in self.partitions:
            if p.node_id == node_id:
                return p.cardinality
        raise PlanError(f"no partition metadata for node {node_id}")
