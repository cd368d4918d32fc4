import numpy as np
import pytest

from olagg.core import (
    Chunk,
    DatasetMeta,
    Kind,
    PartitionMeta,
    PlanError,
    Row,
    Schema,
    Table,
    chunk_stream,
    date_to_days,
    days_to_date,
)

from oracles import value_table


def test_schema_rejects_duplicate_names():
    with pytest.raises(PlanError):
        Schema.of(("x", Kind.INT), ("x", Kind.FLOAT))


def test_schema_header_round_trip():
    schema = Schema.of(("a", Kind.INT), ("b", Kind.FLOAT), ("d", Kind.DATE), ("s", Kind.STR))
    assert Schema.from_header(schema.header()) == schema


def test_schema_lookup_errors():
    schema = Schema.of(("a", Kind.INT))
    with pytest.raises(PlanError):
        schema.kind_of("missing")
    with pytest.raises(PlanError):
        schema.index_of("missing")


def test_row_arity_checked():
    schema = Schema.of(("a", Kind.INT), ("b", Kind.INT))
    with pytest.raises(PlanError):
        Row(schema, (1,))
    row = Row(schema, (1, 2))
    assert row["b"] == 2


def test_date_conversion_round_trip():
    assert date_to_days("1970-01-01") == 0
    assert days_to_date(date_to_days("1993-02-26")) == "1993-02-26"


def test_table_from_rows_and_take():
    schema = Schema.of(("a", Kind.INT), ("s", Kind.STR))
    table = Table.from_rows(schema, [(1, "x"), (2, "y"), (3, "z")])
    assert len(table) == 3
    picked = table.take(np.array([2, 0]))
    assert [tuple(r.values) for r in picked.rows()] == [(3, "z"), (1, "x")]


def test_chunk_stream_sizes():
    table = value_table(range(10))
    chunks = list(chunk_stream(table, capacity=4))
    assert [len(c) for c in chunks] == [4, 4, 2]
    assert [c.sequence_id for c in chunks] == [0, 1, 2]


def test_chunk_stream_empty_and_exact_fit():
    assert list(chunk_stream(value_table([]), capacity=4)) == []
    chunks = list(chunk_stream(value_table([1, 2, 3, 4]), capacity=4))
    assert len(chunks) == 1 and len(chunks[0]) == 4


def test_chunk_stream_preserves_order_and_multiset():
    values = [5, 1, 5, 2, 9, 9, 3]
    table = value_table(values)
    seen = []
    for chunk in chunk_stream(table, capacity=3):
        seen.extend(int(v) for v in chunk.column("value"))
    assert seen == values


def test_chunk_stream_rejects_bad_capacity():
    with pytest.raises(PlanError):
        list(chunk_stream(value_table([1]), capacity=0))


def test_chunk_rejects_empty():
    with pytest.raises(PlanError):
        Chunk(value_table([]), 0)


def test_dataset_meta_checks_totals():
    meta = DatasetMeta.from_partitions([3, 4, 5])
    assert meta.total_cardinality == 12
    assert meta.cardinality_of(1) == 4
    with pytest.raises(PlanError):
        DatasetMeta(10, (PartitionMeta(0, 3), PartitionMeta(1, 4)))
