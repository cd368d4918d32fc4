"""Estimator math against enumeration oracles and frozen worked values.

The worked values were computed by hand-evaluating the estimator, variance
and variance-estimator formulas on the dataset {1,2,3,4} (see oracles.py for
the enumeration machinery).
"""

import math
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from olagg.estimation import (
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
from olagg.expr import TRUE, between, col, lit

from oracles import (
    population_variance,
    subset_estimates,
    subset_variance_estimates,
    value_table,
)


class TestMoments:
    def test_rejects_negative_count(self):
        with pytest.raises(ValueError):
            Moments(0.0, 0.0, -1)

    def test_rejects_nonzero_sums_with_empty_sample(self):
        with pytest.raises(ValueError):
            Moments(1.0, 1.0, 0)

    def test_rejects_negative_sum_of_squares(self):
        with pytest.raises(ValueError):
            Moments(1.0, -0.5, 2)

    def test_negative_sum_is_fine(self):
        Moments(-3.0, 9.0, 2)


class TestPointEstimate:
    def test_worked_sample(self):
        # {1,2,3,4}, sample {1,2}: scale 4/2 applied to qualifying sum 3.
        assert point_estimate(Moments(3.0, 5.0, 2), 4) == 6.0

    def test_full_sample_is_exact(self):
        assert point_estimate(Moments(10.0, 30.0, 4), 4) == 10.0

    def test_empty_selection(self):
        assert point_estimate(Moments(0.0, 0.0, 3), 4) == 0.0

    def test_no_sample_yet(self):
        with pytest.raises(BoundsUnavailable):
            point_estimate(Moments(), 4)

    def test_population_must_cover_sample(self):
        with pytest.raises(ValueError):
            point_estimate(Moments(3.0, 5.0, 5), 4)


class TestVarianceEstimate:
    def test_worked_sample_low(self):
        assert variance_estimate(Moments(3.0, 5.0, 2), 4) == 2.0

    def test_worked_sample_spread(self):
        # sample {1,4}: sum 5, sum of squares 17.
        assert variance_estimate(Moments(5.0, 17.0, 2), 4) == 18.0

    def test_full_sample_has_zero_variance(self):
        assert variance_estimate(Moments(10.0, 30.0, 4), 4) == 0.0

    def test_single_sample_rejected(self):
        with pytest.raises(BoundsUnavailable):
            variance_estimate(Moments(1.0, 1.0, 1), 4)

    def test_cancellation_clamps_to_zero(self):
        # A constant sample has zero variance; tiny float residue must clamp.
        v = 0.1
        m = Moments(3 * v, 3 * v * v, 3)
        assert variance_estimate(m, 10) >= 0.0


class TestTrueVariance:
    def test_worked_instance(self):
        table = value_table([1, 2, 3, 4])
        assert true_variance(table, col("value"), TRUE, 2) == pytest.approx(20.0 / 3.0)

    def test_full_scan_zero(self):
        table = value_table([1, 2, 3, 4])
        assert true_variance(table, col("value"), TRUE, 4) == 0.0

    def test_two_point_dataset_scales_with_spread(self):
        for c in (10, 100):
            table = value_table([0, c])
            v = true_variance(table, col("value"), TRUE, 1)
            # Brute force over the 2 possible samples of size 1.
            ests = subset_estimates(table, col("value"), TRUE, 1)
            assert v == pytest.approx(population_variance(ests))
            assert v == pytest.approx(c * c)

    def test_matches_enumeration(self):
        table = value_table([3, 1, 4, 1, 5, 9, 2])
        f = col("value") * col("value")
        p = between(col("value"), lit(2), lit(8))
        for k in range(1, len(table) + 1):
            ests = subset_estimates(table, f, p, k)
            assert true_variance(table, f, p, k) == pytest.approx(
                population_variance(ests), rel=1e-9, abs=1e-9
            )

    def test_tiny_dataset_rejected(self):
        with pytest.raises(ValueError):
            true_variance(value_table([1]), col("value"), TRUE, 1)


class TestNormalQuantile:
    def test_median_is_zero(self):
        assert normal_quantile(0.5) == 0.0

    def test_frozen_value(self):
        assert normal_quantile(0.975) == pytest.approx(1.95996398454, abs=1e-8)

    def test_symmetry(self):
        for p in (0.975, 0.9, 0.7, 0.51):
            assert normal_quantile(1 - p) == pytest.approx(-normal_quantile(p), abs=1e-12)

    @pytest.mark.parametrize("p", [1e-9, 1e-6, 0.0241, 0.0243, 0.3, 0.5, 0.8,
                                   0.975, 0.999999, 1 - 1e-9])
    def test_against_reference(self, p):
        assert normal_quantile(p) == pytest.approx(float(norm.ppf(p)), abs=1e-8)

    def test_domain_checked(self):
        for p in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                normal_quantile(p)


class TestBounds:
    def test_zero_variance_collapses(self):
        assert bounds(10.0, 0.0, 0.95) == (10.0, 10.0)

    def test_frozen_95_interval(self):
        lo, hi = bounds(10.0, 4.0, 0.95)
        assert lo == pytest.approx(10.0 - 1.959963984540054 * 2.0, abs=1e-6)
        assert hi == pytest.approx(10.0 + 1.959963984540054 * 2.0, abs=1e-6)

    def test_unit_variance_around_zero(self):
        lo, hi = bounds(0.0, 1.0, 0.95)
        assert lo == pytest.approx(-1.95996398454, abs=1e-6)
        assert hi == pytest.approx(1.95996398454, abs=1e-6)

    def test_width_scales_with_sqrt_variance(self):
        lo1, hi1 = bounds(5.0, 1.0, 0.9)
        lo4, hi4 = bounds(5.0, 4.0, 0.9)
        assert (hi4 - lo4) == pytest.approx(2 * (hi1 - lo1), rel=1e-12)

    def test_confidence_domain(self):
        with pytest.raises(ValueError):
            bounds(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            bounds(0.0, -1.0, 0.9)

    def test_brackets_estimator(self):
        lo, hi = bounds(-7.0, 3.0, 0.8)
        assert lo <= -7.0 <= hi


class TestStratifiedCombine:
    def test_zero_variance_strata(self):
        assert stratified_combine(
            [StratumEstimate(2.0, 0.0), StratumEstimate(6.0, 0.0)]
        ) == (8.0, 0.0)

    def test_worked_two_partitions(self):
        # {1,2,3,4} sample {1,2} and {5,6,7,8} sample {5,6}, per-stratum math
        # frozen from hand evaluation.
        a = StratumEstimate(6.0, 2.0)
        b = StratumEstimate(22.0, 2.0)
        assert stratified_combine([a, b]) == (28.0, 4.0)

    def test_missing_stratum_is_infinite_variance(self):
        with pytest.raises(BoundsUnavailable):
            stratified_combine([StratumEstimate(6.0, 2.0), StratumEstimate(0.0, None)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stratified_combine([])


class TestEstimateInvariants:
    def test_bounds_must_bracket(self):
        with pytest.raises(ValueError):
            Estimate(1.0, 2.0, 3.0, 0.95, 0.5, 0.0)

    def test_relative_width(self):
        e = Estimate(10.0, 8.0, 12.0, 0.95, 0.5, 0.0)
        assert e.relative_width == pytest.approx(0.4)


# --- Estimator laws over exhaustive subset enumeration ---------------------

DATASETS = [
    [1, 2, 3, 4],
    [5, -3, 8, 0, 2, 2],
    [7, 7, 7, 7, 7],
    [13, -40, 2, 91, 0, -7, 55, 6],
]


@pytest.mark.parametrize("values", DATASETS)
def test_unbiasedness_over_all_subsets(values):
    table = value_table(values)
    f, p = col("value"), TRUE
    truth = float(sum(values))
    for k in range(1, len(values) + 1):
        ests = subset_estimates(table, f, p, k)
        mean = math.fsum(ests) / len(ests)
        assert mean == pytest.approx(truth, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("values", DATASETS)
def test_variance_law_over_all_subsets(values):
    table = value_table(values)
    f, p = col("value"), TRUE
    for k in range(1, len(values) + 1):
        ests = subset_estimates(table, f, p, k)
        assert population_variance(ests) == pytest.approx(
            true_variance(table, f, p, k), rel=1e-9, abs=1e-9
        )


@pytest.mark.parametrize("values", DATASETS)
def test_variance_estimator_unbiased_over_all_subsets(values):
    table = value_table(values)
    f, p = col("value"), TRUE
    for k in range(2, len(values) + 1):
        est_vars = subset_variance_estimates(table, f, p, k)
        mean = math.fsum(est_vars) / len(est_vars)
        assert mean == pytest.approx(
            true_variance(table, f, p, k), rel=1e-9, abs=1e-9
        )


def test_worked_variance_estimator_instance():
    # Dataset {1,2,3,4}, k=2: the six per-subset variance estimates, in
    # combinations order, and their mean equal to the true variance 20/3.
    per_subset = [
        variance_estimate(Moments(float(a + b), float(a * a + b * b), 2), 4)
        for a, b in combinations([1, 2, 3, 4], 2)
    ]
    assert per_subset == [2.0, 8.0, 18.0, 2.0, 8.0, 2.0]
    assert math.fsum(per_subset) / 6 == pytest.approx(20.0 / 3.0)


@settings(max_examples=40, deadline=None)
@given(
    values=st.lists(st.integers(-20, 20), min_size=2, max_size=9),
    conf=st.floats(0.5, 0.99),
)
def test_estimate_consistency_properties(values, conf):
    table = value_table(values)
    n = len(values)
    # Variance collapse at a full scan, and matching exact sum.
    full = Moments(float(sum(values)), float(sum(v * v for v in values)), n)
    assert variance_estimate(full, n) == 0.0
    lo, hi = bounds(point_estimate(full, n), 0.0, conf)
    assert lo == hi == pytest.approx(float(sum(values)))
