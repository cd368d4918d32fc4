"""Query plans: structured JSON documents, not SQL text.

A plan names the aggregate expression(s), the selection predicate, optional
grouping columns, an optional replicated dimension to join against, the
estimation model and the confidence level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

from .core import PlanError
from .expr import (
    TRUE,
    Expr,
    Pred,
    expr_from_json,
    expr_to_json,
    pred_from_json,
    pred_to_json,
)


class EstimationModel(Enum):
    SINGLE = "single"          # one estimator over the union of node samples
    MULTIPLE = "multiple"      # one estimator per partition, summed
    SYNC = "sync"              # single estimator with lock-step sampling


@dataclass(frozen=True)
class DimensionSpec:
    """Replicated dimension table joined against the scanned fact table."""

    fact_key: str
    dim_key: str
    path: Optional[str] = None


@dataclass(frozen=True)
class QueryPlan:
    aggs: tuple[Expr, ...]
    predicate: Pred = TRUE
    group_by: tuple[str, ...] = ()
    dimension: Optional[DimensionSpec] = None
    model: EstimationModel = EstimationModel.SINGLE
    confidence: float = 0.95

    def __post_init__(self) -> None:
        if not self.aggs:
            raise PlanError("plan needs at least one aggregate expression")
        if not 0.0 < self.confidence < 1.0:
            raise PlanError(f"confidence must be in (0,1), got {self.confidence}")
        if self.dimension is not None and not self.group_by:
            raise PlanError("join plans must group by at least one column")

    def to_json(self) -> dict:
        doc = {
            "f": [expr_to_json(f) for f in self.aggs],
            "p": pred_to_json(self.predicate),
            "group_by": list(self.group_by),
            "model": self.model.value,
            "confidence": self.confidence,
        }
        if self.dimension is not None:
            doc["dimension"] = {
                "fact_key": self.dimension.fact_key,
                "dim_key": self.dimension.dim_key,
                **({"path": self.dimension.path} if self.dimension.path else {}),
            }
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def plan_from_json(doc: Union[dict, str]) -> QueryPlan:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise PlanError("plan document must be a JSON object")
    if "f" not in doc:
        raise PlanError("plan is missing the aggregate expression field 'f'")
    f_doc = doc["f"]
    aggs: Sequence = f_doc if isinstance(f_doc, list) else [f_doc]
    exprs = tuple(expr_from_json(e) for e in aggs)
    predicate = pred_from_json(doc["p"]) if "p" in doc else TRUE
    group_by = tuple(doc.get("group_by") or ())
    dimension = None
    if doc.get("dimension") is not None:
        dim = doc["dimension"]
        if not isinstance(dim, dict) or "fact_key" not in dim or "dim_key" not in dim:
            raise PlanError("dimension must carry fact_key and dim_key")
        dimension = DimensionSpec(dim["fact_key"], dim["dim_key"], dim.get("path"))
    model_name = doc.get("model", EstimationModel.SINGLE.value)
    try:
        model = EstimationModel(model_name)
    except ValueError:
        raise PlanError(
            f"unknown estimation model {model_name!r}; "
            f"expected one of {[m.value for m in EstimationModel]}"
        ) from None
    confidence = doc.get("confidence", 0.95)
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise PlanError(f"confidence must be a number, got {confidence!r}")
    return QueryPlan(exprs, predicate, group_by, dimension, model, float(confidence))
