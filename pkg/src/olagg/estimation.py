"""Sampling-without-replacement estimation for SUM aggregates.

Given the three running moments of a sample drawn without replacement from a
dataset of known cardinality, these functions produce an unbiased point
estimate of the full aggregate, an unbiased estimate of the estimator's
variance, and normal-theory confidence bounds. Strata estimates from
independently sampled partitions combine by summing estimates and variances.

`count` is the TOTAL number of sampled tuples, qualifying or not; the
predicate filters which tuples contribute to `sum` and `sum_sq` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Table
from .expr import Expr, Pred, eval_expr, eval_pred


class BoundsUnavailable(RuntimeError):
    """No confidence bounds can be produced yet (or ever, for dead strata).

    Raised when the sample is too small (count < 2) or when a stratum has
    undefined (infinite) variance, e.g. after a node failure. Callers keep
    the query running and retry at the next snapshot.
    """


@dataclass(frozen=True)
class Moments:
    """Running sample moments: sum and sum of squares of qualifying f-values,
    and the total number of sampled tuples."""

    sum: float = 0.0
    sum_sq: float = 0.0
    count: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError(f"count must be nonnegative, got {self.count}")
        if self.count == 0 and (self.sum != 0.0 or self.sum_sq != 0.0):
            raise ValueError("empty sample must have zero moments")
        if self.sum_sq < 0.0:
            raise ValueError(f"sum of squares cannot be negative, got {self.sum_sq}")


@dataclass(frozen=True)
class StratumEstimate:
    """Per-partition estimate; est_var None marks an undefined (infinite)
    variance stratum (undersampled or dead node)."""

    est: float
    est_var: Optional[float]

    def __post_init__(self) -> None:
        if self.est_var is not None and self.est_var < 0.0:
            raise ValueError(f"stratum variance cannot be negative, got {self.est_var}")


@dataclass(frozen=True)
class Estimate:
    """Point estimate with confidence bounds at a moment in the scan."""

    estimator: float
    lower: float
    upper: float
    confidence: float
    sample_fraction: float
    at_millis: float

    def __post_init__(self) -> None:
        if not (self.lower <= self.estimator <= self.upper):
            raise ValueError(
                f"bounds must bracket the estimator: "
                f"{self.lower} <= {self.estimator} <= {self.upper}"
            )
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must be in (0,1), got {self.confidence}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def relative_width(self) -> float:
        if self.estimator == 0.0:
            return math.inf if self.width > 0.0 else 0.0
        return self.width / abs(self.estimator)


def _check_sizes(count: int, population: int) -> None:
    if population < count:
        raise ValueError(f"population {population} smaller than sample {count}")


def point_estimate(m: Moments, population: int) -> float:
    """Unbiased estimate of the full aggregate: scale the qualifying sample
    sum by population/count."""
    if m.count < 1:
        raise BoundsUnavailable("no tuples sampled yet")
    _check_sizes(m.count, population)
    return population / m.count * m.sum


def variance_estimate(m: Moments, population: int) -> float:
    """Unbiased estimate, from the sample alone, of the point estimator's
    variance. Needs at least two sampled tuples; tiny negative results from
    floating-point cancellation clamp to zero."""
    if m.count < 2:
        raise BoundsUnavailable("need at least two sampled tuples for a variance")
    _check_sizes(m.count, population)
    n, s = population, m.count
    v = n * (n - s) / (s * s * (s - 1)) * (s * m.sum_sq - m.sum * m.sum)
    return max(v, 0.0)


def true_variance(dataset: Table, f: Expr, p: Pred, sample_size: int) -> float:
    """Exact variance of the point estimator over all samples of the given
    size; needs the full dataset, so this is a test oracle, not an engine
    path. Uses compensated summation."""
    n = len(dataset)
    if n < 2:
        raise ValueError("variance undefined for datasets smaller than 2")
    if not 1 <= sample_size <= n:
        raise ValueError(f"sample size must be in [1, {n}], got {sample_size}")
    fs, f2s = [], []
    for row in dataset.rows():
        if eval_pred(p, row):
            v = eval_expr(f, row)
            fs.append(v)
            f2s.append(v * v)
    total, total_sq = math.fsum(fs), math.fsum(f2s)
    return (n - sample_size) / ((n - 1) * sample_size) * (n * total_sq - total * total)


# Rational approximation of the standard normal inverse CDF (coefficients
# due to Acklam, |error| < 1.15e-9), refined to near machine precision with
# one Halley step against the erfc-based CDF.

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, absolute error well below 1e-8."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must be in (0,1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            (((( _D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((( _A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            ((((( _B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            (((( _D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # One Halley refinement step.
    err = _normal_cdf(x) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def bounds(estimator: float, est_var: float, confidence: float) -> tuple[float, float]:
    """Two-sided normal-theory confidence interval around the estimator."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0,1), got {confidence}")
    if est_var < 0.0:
        raise ValueError(f"variance cannot be negative, got {est_var}")
    sigma = math.sqrt(est_var)
    if sigma == 0.0:
        return estimator, estimator
    half = (1.0 - confidence) / 2.0
    lower = estimator + normal_quantile(half) * sigma
    upper = estimator + normal_quantile(confidence + half) * sigma
    return lower, upper


def stratified_combine(strata: Sequence[StratumEstimate]) -> tuple[float, float]:
    """Sum independent per-partition estimates and their variances.

    Any stratum with undefined variance makes the combined variance infinite
    and no bounds can be produced -- the stratified model's failure mode when
    a partition is undersampled or lost.
    """
    if not strata:
        raise ValueError("cannot combine an empty list of strata")
    undefined = [i for i, s in enumerate(strata) if s.est_var is None]
    if undefined:
        raise BoundsUnavailable(
            f"infinite variance: {len(undefined)} stratum(s) undefined "
            f"(indices {undefined})"
        )
    est = math.fsum(s.est for s in strata)
    est_var = math.fsum(s.est_var for s in strata)
    return est, est_var
