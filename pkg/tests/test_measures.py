import math

import numpy as np
import pytest

from confdiff.errors import ValidationError
from confdiff.measures import (
    ExponentFit,
    HitHistogram,
    extrapolate_dimension,
    fit_passage_exponents,
    fit_power_law,
    flat_displacement_cdf,
    flat_time_cdf,
    log_histogram,
    moments,
    pair_moment_unbiased,
    passage_exponents_theory,
    scale_dimension,
    spread_scale,
)

RNG = np.random.default_rng(7)


def make_hist(counts, depth, k=5, ratio=1 / 3):
    counts = np.asarray(counts, dtype=np.int64)
    return HitHistogram("quadratic2d", depth, depth, ratio, counts,
                        int(counts.sum()), k)


def random_hist(depth=3, k=5):
    n = k ** depth
    counts = RNG.integers(1, 1000, size=n)
    return make_hist(counts, depth, k)


class TestMoments:
    def test_q1_is_one(self):
        assert moments(random_hist(), 1.0) == 1.0

    def test_q0_counts_occupied_cells(self):
        h = make_hist([3, 0, 5, 0, 7], 1)
        assert moments(h, 0.0) == 3.0

    def test_single_cell_any_q(self):
        h = make_hist([11] + [0] * 4, 1)
        for q in (0.5, 2.0, 3.7):
            assert moments(h, q) == pytest.approx(1.0)

    def test_strictly_decreasing_and_log_convex(self):
        h = random_hist()
        qs = np.linspace(0.2, 6.0, 30)
        z = np.array([moments(h, q) for q in qs])
        assert np.all(np.diff(z) < 0)
        lz = np.log(z)
        assert np.all(np.diff(lz, 2) > -1e-12)

    def test_unbiased_pair_moment(self):
        # matches the plug-in estimate in the large-count limit
        h = make_hist([1000, 3000, 6000], 1, k=3)
        assert pair_moment_unbiased(h) == pytest.approx(
            moments(h, 2.0), rel=1e-3)


class TestScaleDimension:
    def test_uniform_measure_is_flat(self):
        m = 3 ** 4
        h = HitHistogram("triangular2d", 4, 4, 1 / 3,
                         np.full(m, 50, dtype=np.int64), 50 * m, 3)
        for q in (0.0, 0.5, 1.0, 2.0, 3.0):
            assert scale_dimension(h, q) == pytest.approx(1.0, abs=1e-12)

    def test_two_cell_hand_value(self):
        p = 0.3
        n = 10 ** 7
        h = HitHistogram("x", 1, 1, 0.5,
                         np.array([int(p * n), n - int(p * n)]), n, 2)
        expect = math.log(p ** 2 + (1 - p) ** 2) / math.log(0.5)
        assert scale_dimension(h, 2.0) == pytest.approx(expect, abs=1e-6)

    def test_binomial_cascade_information_dimension(self):
        # depth-10 cascade with weight p: D1 = -(p ln p + q ln q)/ln 2
        p = 0.3
        depth = 10
        w = np.array([1.0])
        for _ in range(depth):
            w = np.concatenate([w * p, w * (1 - p)])
        counts = np.round(w * 2 ** 45).astype(np.int64)
        h = HitHistogram("cascade", depth, depth, 0.5, counts,
                         int(counts.sum()), 2)
        expect = -(p * math.log(p) + (1 - p) * math.log(1 - p)) / math.log(2)
        assert scale_dimension(h, 1.0) == pytest.approx(expect, abs=1e-3)

    def test_degenerate_single_cell(self):
        h = make_hist([9, 0, 0, 0, 0], 1)
        with pytest.raises(ValidationError):
            scale_dimension(h, 0.5)

    def test_refinement_merge_is_exact(self):
        h = random_hist(depth=3)
        coarse = h.coarsen(2)
        assert coarse.counts.sum() == h.counts.sum()
        assert np.array_equal(coarse.counts,
                              h.counts.reshape(-1, 5).sum(axis=1))
        assert coarse.delta == pytest.approx((1 / 3) ** 2)

    def test_rescaling_invariance(self):
        # dimensions depend only on relative scales, so two histograms
        # binned identically on rescaled boundaries agree exactly
        h1 = random_hist(depth=3)
        h2 = HitHistogram(h1.family, 3, 3, h1.scale_ratio, h1.counts,
                          h1.total, h1.child_count)
        for q in (0.5, 2.0):
            assert scale_dimension(h1, q) == scale_dimension(h2, q)


class TestExtrapolation:
    def test_exact_linear_model_recovered(self):
        gs = [3, 4, 5, 6]
        d, c = 1.37, -0.52
        vals = [d + c / g for g in gs]
        est = extrapolate_dimension(gs, vals, q=2.0)
        assert est.dimension == pytest.approx(d, abs=1e-12)
        assert est.slope == pytest.approx(c, abs=1e-12)
        assert est.stderr < 1e-12
        assert not est.low_confidence

    def test_scatter_flagged(self):
        est = extrapolate_dimension([3, 4, 5, 6], [1.0, 1.8, 0.9, 1.7], 2.0)
        assert est.low_confidence

    def test_needs_three_points(self):
        with pytest.raises(ValidationError):
            extrapolate_dimension([3, 4], [1.0, 1.1], 1.0)


class TestSpreadScale:
    def test_fixed_point(self):
        assert spread_scale(1e-3, 1e-3, 1.465) == pytest.approx(1e-3)

    def test_smooth_limit(self):
        assert spread_scale(0.07, 1e-3, 1.0) == pytest.approx(0.07)

    def test_zero_length(self):
        assert spread_scale(0.0, 1e-3, 1.465) == 0.0


class TestPowerLawFits:
    def test_recovers_exponent(self):
        # pareto tail with exponent 2.5
        u = RNG.random(10 ** 6)
        samples = (1.0 - u) ** (-1.0 / 1.5)  # density ~ x^-2.5
        fit = fit_power_law(samples, (2.0, 200.0))
        assert fit.value == pytest.approx(2.5, abs=0.03)
        assert fit.stderr < 0.02

    def test_window_too_short(self):
        with pytest.raises(ValidationError):
            fit_power_law(RNG.random(1000) + 1, (1.0, 10.0))

    def test_passage_theory_values(self):
        a, b = passage_exponents_theory(1.0, 2)
        assert (a, b) == (1.5, 2.0)
        a, b = passage_exponents_theory(1.699, 2)
        assert a == pytest.approx(1.8495)
        assert b == pytest.approx(2.699)
        # displacement exponent ties to the time exponent as 2a - 1
        assert b == pytest.approx(2 * a - 1)

    def test_fit_passage_exponents_requires_samples(self):
        with pytest.raises(ValidationError):
            fit_passage_exponents(np.ones(10), np.ones(10), 1.0, 2,
                                  (1, 1e3), (1, 1e3))

    def test_log_histogram_density_normalized(self):
        s = RNG.random(200000) * 9 + 1
        centers, dens, counts = log_histogram(s, 20, 1.0, 10.0)
        widths_sum = np.trapezoid(dens, centers)
        assert widths_sum == pytest.approx(1.0, abs=0.15)


class TestFlatLawCdfs:
    def test_time_cdf_limits(self):
        cdf = flat_time_cdf(1e-3, 1.0)
        t = np.geomspace(1e-9, 1e3, 50)
        v = cdf(t)
        assert np.all(np.diff(v) > 0)
        assert v[0] < 1e-10 and v[-1] > 0.999

    def test_displacement_cdf_support(self):
        cdf = flat_displacement_cdf(1e-3)
        r = np.array([5e-4, 1.1e-3, 1.0])
        v = cdf(r)
        assert v[0] == 0.0
        assert 0 < v[1] < v[2] < 1.0
