"""Aggregate expressions f and selection predicates P.

Small ASTs over column references, literals, arithmetic, comparisons and
boolean connectives. Every node evaluates both per-row (the contract) and
per-chunk over numpy columns (the engine's hot path); the two must agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import Chunk, EvalError, Kind, PlanError, Row, Schema, Table, date_to_days, days_to_date

_ARITH_OPS = ("add", "sub", "mul", "div")
_CMP_OPS = ("=", "<", "<=", ">", ">=")


class Expr:
    """Base of arithmetic expression nodes."""

    def infer_kind(self, schema: Schema) -> Kind:
        raise NotImplementedError

    def scalar(self, row: Row):
        raise NotImplementedError

    def vector(self, table: Table) -> np.ndarray:
        raise NotImplementedError

    def __add__(self, other: "Expr") -> "Expr":
        return Arith("add", self, other)

    def __sub__(self, other: "Expr") -> "Expr":
        return Arith("sub", self, other)

    def __mul__(self, other: "Expr") -> "Expr":
        return Arith("mul", self, other)

    def __truediv__(self, other: "Expr") -> "Expr":
        return Arith("div", self, other)


@dataclass(frozen=True)
class Col(Expr):
    name: str

    def infer_kind(self, schema: Schema) -> Kind:
        return schema.kind_of(self.name)

    def scalar(self, row: Row):
        return row[self.name]

    def vector(self, table: Table) -> np.ndarray:
        return table.columns[self.name]


@dataclass(frozen=True)
class Lit(Expr):
    value: Union[int, float, str]
    kind: Kind = Kind.FLOAT

    def infer_kind(self, schema: Schema) -> Kind:
        return self.kind

    def scalar(self, row: Row):
        return self.value

    def vector(self, table: Table):
        return self.value


@dataclass(frozen=True)
class Arith(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self) -> None:
        if self.op not in _ARITH_OPS:
            raise PlanError(f"unknown arithmetic operator {self.op!r}")

    def infer_kind(self, schema: Schema) -> Kind:
        for side in (self.left, self.right):
            if not side.infer_kind(schema).numeric:
                raise PlanError(f"arithmetic over non-numeric operand: {side}")
        return Kind.FLOAT

    def scalar(self, row: Row) -> float:
        a = float(self.left.scalar(row))
        b = float(self.right.scalar(row))
        if self.op == "add":
            return a + b
        if self.op == "sub":
            return a - b
        if self.op == "mul":
            return a * b
        if b == 0.0:
            raise EvalError("division by zero")
        return a / b

    def vector(self, table: Table) -> np.ndarray:
        a = np.asarray(self.left.vector(table), dtype=np.float64)
        b = np.asarray(self.right.vector(table), dtype=np.float64)
        if self.op == "add":
            return a + b
        if self.op == "sub":
            return a - b
        if self.op == "mul":
            return a * b
        if np.any(b == 0.0):
            raise EvalError("division by zero")
        return a / b


class Pred:
    """Base of predicate nodes; evaluates to a boolean per row."""

    def validate(self, schema: Schema) -> None:
        raise NotImplementedError

    def scalar(self, row: Row) -> bool:
        raise NotImplementedError

    def vector(self, table: Table) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class TruePred(Pred):
    def validate(self, schema: Schema) -> None:
        pass

    def scalar(self, row: Row) -> bool:
        return True

    def vector(self, table: Table) -> np.ndarray:
        return np.ones(len(table), dtype=bool)


TRUE = TruePred()


def _check_comparable(a: Kind, b: Kind, context: str) -> None:
    if a.numeric and b.numeric:
        return
    if a == b:
        return
    raise PlanError(f"{context}: cannot compare {a.value} with {b.value}")


@dataclass(frozen=True)
class Cmp(Pred):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self) -> None:
        if self.op not in _CMP_OPS:
            raise PlanError(f"unknown comparison operator {self.op!r}")

    def validate(self, schema: Schema) -> None:
        _check_comparable(
            self.left.infer_kind(schema), self.right.infer_kind(schema), f"{self.op}"
        )

    def scalar(self, row: Row) -> bool:
        a, b = self.left.scalar(row), self.right.scalar(row)
        if self.op == "=":
            return bool(a == b)
        if self.op == "<":
            return bool(a < b)
        if self.op == "<=":
            return bool(a <= b)
        if self.op == ">":
            return bool(a > b)
        return bool(a >= b)

    def vector(self, table: Table) -> np.ndarray:
        a, b = self.left.vector(table), self.right.vector(table)
        if self.op == "=":
            out = a == b
        elif self.op == "<":
            out = a < b
        elif self.op == "<=":
            out = a <= b
        elif self.op == ">":
            out = a > b
        else:
            out = a >= b
        return np.broadcast_to(np.asarray(out, dtype=bool), (len(table),)).copy()


@dataclass(frozen=True)
class Between(Pred):
    """Inclusive range test on a numeric or date operand."""

    operand: Expr
    lo: Expr
    hi: Expr

    def validate(self, schema: Schema) -> None:
        kind = self.operand.infer_kind(schema)
        if not (kind.numeric or kind == Kind.DATE):
            raise PlanError(f"BETWEEN over {kind.value} operand")
        _check_comparable(kind, self.lo.infer_kind(schema), "BETWEEN low bound")
        _check_comparable(kind, self.hi.infer_kind(schema), "BETWEEN high bound")

    def scalar(self, row: Row) -> bool:
        v = self.operand.scalar(row)
        return bool(self.lo.scalar(row) <= v <= self.hi.scalar(row))

    def vector(self, table: Table) -> np.ndarray:
        v = self.operand.vector(table)
        return np.asarray((self.lo.vector(table) <= v) & (v <= self.hi.vector(table)), dtype=bool)


@dataclass(frozen=True)
class And(Pred):
    parts: tuple[Pred, ...]

    def validate(self, schema: Schema) -> None:
        for p in self.parts:
            p.validate(schema)

    def scalar(self, row: Row) -> bool:
        return all(p.scalar(row) for p in self.parts)

    def vector(self, table: Table) -> np.ndarray:
        out = np.ones(len(table), dtype=bool)
        for p in self.parts:
            out &= p.vector(table)
        return out


@dataclass(frozen=True)
class Or(Pred):
    parts: tuple[Pred, ...]

    def validate(self, schema: Schema) -> None:
        for p in self.parts:
            p.validate(schema)

    def scalar(self, row: Row) -> bool:
        return any(p.scalar(row) for p in self.parts)

    def vector(self, table: Table) -> np.ndarray:
        out = np.zeros(len(table), dtype=bool)
        for p in self.parts:
            out |= p.vector(table)
        return out


@dataclass(frozen=True)
class Not(Pred):
    part: Pred

    def validate(self, schema: Schema) -> None:
        self.part.validate(schema)

    def scalar(self, row: Row) -> bool:
        return not self.part.scalar(row)

    def vector(self, table: Table) -> np.ndarray:
        return ~self.part.vector(table)


def col(name: str) -> Col:
    return Col(name)


def lit(value: Union[int, float]) -> Lit:
    kind = Kind.INT if isinstance(value, int) else Kind.FLOAT
    return Lit(value, kind)


def date_lit(text: str) -> Lit:
    return Lit(date_to_days(text), Kind.DATE)


def str_lit(value: str) -> Lit:
    return Lit(value, Kind.STR)


def cmp(op: str, left: Expr, right: Expr) -> Cmp:
    return Cmp(op, left, right)


def between(operand: Expr, lo: Expr, hi: Expr) -> Between:
    return Between(operand, lo, hi)


def and_(*parts: Pred) -> And:
    return And(tuple(parts))


def or_(*parts: Pred) -> Or:
    return Or(tuple(parts))


def not_(part: Pred) -> Not:
    return Not(part)


def eval_expr(e: Expr, row: Row) -> float:
    """Evaluate an aggregate expression to a real for one row."""
    if not e.infer_kind(row.schema).numeric:
        raise PlanError("aggregate expression must be numeric")
    return float(e.scalar(row))


def eval_expr_chunk(e: Expr, chunk: Chunk) -> np.ndarray:
    """Vectorized eval_expr over a chunk; float64 array of chunk length."""
    if not e.infer_kind(chunk.table.schema).numeric:
        raise PlanError("aggregate expression must be numeric")
    out = e.vector(chunk.table)
    return np.broadcast_to(np.asarray(out, dtype=np.float64), (len(chunk),))


def eval_pred(p: Pred, row: Row) -> bool:
    """Evaluate a selection predicate for one row."""
    p.validate(row.schema)
    return p.scalar(row)


def eval_pred_chunk(p: Pred, chunk: Chunk) -> np.ndarray:
    """Vectorized eval_pred over a chunk; boolean array of chunk length."""
    p.validate(chunk.table.schema)
    return p.vector(chunk.table)


# --- JSON encoding (query plan documents) ----------------------------------


def expr_to_json(e: Expr):
    if isinstance(e, Col):
        return {"col": e.name}
    if isinstance(e, Lit):
        if e.kind == Kind.DATE:
            return {"date": days_to_date(e.value)}
        if e.kind == Kind.STR:
            return {"str": e.value}
        return {"lit": e.value}
    if isinstance(e, Arith):
        return {e.op: [expr_to_json(e.left), expr_to_json(e.right)]}
    raise PlanError(f"cannot serialize expression node {e!r}")


def expr_from_json(doc) -> Expr:
    if not isinstance(doc, dict) or len(doc) != 1:
        raise PlanError(f"malformed expression document: {doc!r}")
    key, value = next(iter(doc.items()))
    if key == "col":
        return Col(value)
    if key == "lit":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise PlanError(f"numeric literal expected, got {value!r}")
        return lit(value)
    if key == "date":
        return date_lit(value)
    if key == "str":
        return str_lit(value)
    if key in _ARITH_OPS:
        if not isinstance(value, list) or len(value) != 2:
            raise PlanError(f"{key} expects two operands")
        return Arith(key, expr_from_json(value[0]), expr_from_json(value[1]))
    raise PlanError(f"unknown expression node {key!r}")


def pred_to_json(p: Pred):
    if isinstance(p, TruePred):
        return {"true": True}
    if isinstance(p, Cmp):
        return {"cmp": [p.op, expr_to_json(p.left), expr_to_json(p.right)]}
    if isinstance(p, Between):
        return {"between": [expr_to_json(p.operand), expr_to_json(p.lo), expr_to_json(p.hi)]}
    if isinstance(p, And):
        return {"and": [pred_to_json(q) for q in p.parts]}
    if isinstance(p, Or):
        return {"or": [pred_to_json(q) for q in p.parts]}
    if isinstance(p, Not):
        return {"not": pred_to_json(p.part)}
    raise PlanError(f"cannot serialize predicate node {p!r}")


def pred_from_json(doc) -> Pred:
    if not isinstance(doc, dict) or len(doc) != 1:
        raise PlanError(f"malformed predicate document: {doc!r}")
    key, value = next(iter(doc.items()))
    if key == "true":
        return TRUE
    if key == "cmp":
        if not isinstance(value, list) or len(value) != 3:
            raise PlanError("cmp expects [op, lhs, rhs]")
        return Cmp(value[0], expr_from_json(value[1]), expr_from_json(value[2]))
    if key == "between":
        if not isinstance(value, list) or len(value) != 3:
            raise PlanError("between expects [operand, lo, hi]")
        return Between(*(expr_from_json(v) for v in value))
    if key == "and":
        return And(tuple(pred_from_json(v) for v in value))
    if key == "or":
        return Or(tuple(pred_from_json(v) for v in value))
    if key == "not":
        return Not(pred_from_json(value))
    raise PlanError(f"unknown predicate node {key!r}")
