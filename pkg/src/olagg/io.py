"""On-disk dataset format: one CSV per partition plus a metadata document.

Each partition file `part-<node_id>.csv` starts with a `name:kind,...`
header line followed by data rows. `meta.json` records the global and
per-node cardinalities.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    DatasetMeta,
    Kind,
    PartitionMeta,
    PlanError,
    Schema,
    Table,
    date_to_days,
    days_to_date,
)


def _format_column(kind: Kind, arr: np.ndarray) -> list[str]:
    if kind == Kind.DATE:
        return [days_to_date(v) for v in arr]
    if kind == Kind.FLOAT:
        return [repr(float(v)) for v in arr]
    if kind == Kind.INT:
        return [str(int(v)) for v in arr]
    return [str(v) for v in arr]


def _parse_column(kind: Kind, cells: list[str]) -> np.ndarray:
    if kind == Kind.DATE:
        return np.array([date_to_days(c) for c in cells], dtype=np.int64)
    if kind == Kind.FLOAT:
        return np.array([float(c) for c in cells], dtype=np.float64)
    if kind == Kind.INT:
        return np.array([int(c) for c in cells], dtype=np.int64)
    return np.array(cells, dtype=object)


def write_table(table: Table, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(table.schema.header() + "\n")
        writer = csv.writer(fh)
        cols = [_format_column(kind, table.columns[name]) for name, kind in table.schema.columns]
        writer.writerows(zip(*cols))


def read_table(path: Path) -> Table:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.strip():
            raise PlanError(f"{path}: missing schema header")
        schema = Schema.from_header(header)
        rows = list(csv.reader(fh))
    by_col = list(zip(*rows)) if rows else [[] for _ in schema.columns]
    columns = {
        name: _parse_column(kind, list(by_col[i]))
        for i, (name, kind) in enumerate(schema.columns)
    }
    return Table(schema, columns)


def partition_path(directory: Path, node_id: int) -> Path:
    return Path(directory) / f"part-{node_id}.csv"


def write_partitions(partitions: Sequence[Table], directory: Path) -> DatasetMeta:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = DatasetMeta.from_partitions([len(p) for p in partitions])
    for node_id, part in enumerate(partitions):
        write_table(part, partition_path(directory, node_id))
    with open(directory / "meta.json", "w") as fh:
        json.dump(
            {
                "total_cardinality": meta.total_cardinality,
                "partitions": [
                    {"node_id": p.node_id, "cardinality": p.cardinality}
                    for p in meta.partitions
                ],
            },
            fh,
            indent=2,
        )
    return meta


def read_meta(directory: Path) -> DatasetMeta:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise PlanError(f"no meta.json in {directory}")
    with open(path) as fh:
        doc = json.load(fh)
    parts = tuple(
        PartitionMeta(p["node_id"], p["cardinality"]) for p in doc["partitions"]
    )
    return DatasetMeta(doc["total_cardinality"], parts)


def read_partitions(directory: Path) -> tuple[list[Table], DatasetMeta]:
    meta = read_meta(directory)
    tables = []
    for part in meta.partitions:
        path = partition_path(directory, part.node_id)
        if not path.exists():
            raise PlanError(f"missing partition file {path}")
        table = read_table(path)
        if len(table) != part.cardinality:
            raise PlanError(
                f"{path}: {len(table)} rows but meta says {part.cardinality}"
            )
        tables.append(table)
    return tables, meta
