"""Online aggregation over partitioned data: run SUM-style queries in
parallel while streaming continuously tightening confidence bounds, and stop
as soon as the answer is good enough."""

from .core import Chunk, DatasetMeta, Kind, PartitionMeta, PlanError, Row, Schema, Table, chunk_stream
from .engine import Engine, EngineConfig, FaultPlan, QueryHandle, QueryTerminal, UnknownQuery
from .estimation import (
    BoundsUnavailable,
    Estimate,
    Moments,
    StratumEstimate,
    bounds,
    normal_quantile,
    point_estimate,
    stratified_combine,
    true_variance,
    variance_estimate,
)
from .plan import DimensionSpec, EstimationModel, QueryPlan, plan_from_json
from .randomizer import (
    HashAssigner,
    SeededRng,
    gen_lineitem_like,
    gen_outlier,
    gen_zipf,
    globally_randomize,
    random_permutation,
    random_split,
)
from .uda import GroupByUda, JoinUda, SerializationError, SumUda, Uda

__all__ = [
    "BoundsUnavailable", "Chunk", "DatasetMeta", "DimensionSpec", "Engine",
    "EngineConfig", "Estimate", "EstimationModel", "FaultPlan", "GroupByUda",
    "HashAssigner", "JoinUda", "Kind", "Moments", "PartitionMeta", "PlanError",
    "QueryHandle", "QueryPlan", "QueryTerminal", "Row", "Schema", "SeededRng",
    "SerializationError", "StratumEstimate", "SumUda", "Table", "Uda",
    "UnknownQuery", "bounds", "chunk_stream", "gen_lineitem_like", "gen_outlier",
    "gen_zipf", "globally_randomize", "normal_quantile", "plan_from_json",
    "point_estimate", "random_permutation", "random_split", "stratified_combine",
    "true_variance", "variance_estimate",
]
