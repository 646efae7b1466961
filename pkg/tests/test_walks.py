import math

import numpy as np
import pytest
from scipy.stats import chisquare, kstest

from confdiff import _kernels as K
from confdiff.errors import ValidationError
from confdiff.geometry import build_boundary
from confdiff.measures import flat_displacement_cdf, flat_time_cdf
from confdiff.walks import (
    SourceSpec,
    WalkConfig,
    exit_time_cdf,
    jump,
    run_ensemble,
    run_hit_histogram,
    run_passage_ensemble,
    run_spread_distances,
    run_trajectory,
    sample_exit_time,
)


class TestJump:
    def test_radius_exact(self):
        rng = np.random.default_rng(1)
        for p in [(0.2, 0.7), (0.1, 0.2, 0.9)]:
            q = jump(p, 0.37, rng)
            assert np.linalg.norm(q - np.asarray(p)) == pytest.approx(0.37)

    def test_2d_angles_uniform(self):
        rng = np.random.default_rng(2)
        n = 200000
        pts = np.array([jump((0.0, 0.0), 1.0, rng) for _ in range(n)])
        ang = np.arctan2(pts[:, 1], pts[:, 0])
        counts, _ = np.histogram(ang, bins=32, range=(-math.pi, math.pi))
        stat, p = chisquare(counts)
        assert p > 0.01

    def test_3d_mean_vanishes(self):
        rng = np.random.default_rng(3)
        n = 100000
        pts = np.array([jump((0.0, 0.0, 0.0), 1.0, rng) for _ in range(n)])
        sigma = 1.0 / math.sqrt(n)  # component std of the mean < 1
        assert np.all(np.abs(pts.mean(axis=0)) < 3.5 * sigma)


class TestExitTime:
    def test_means(self):
        rng = np.random.default_rng(4)
        for dim, expect in ((2, 0.25), (3, 1 / 6)):
            s = sample_exit_time(2.0, 1.0, rng, dim=dim, size=10 ** 6)
            assert s.mean() / 4.0 == pytest.approx(expect, rel=0.01)

    def test_cdf_at_oracle_median(self):
        # oracle: fine fixed-step walks in the unit disk
        n = 10 ** 6
        out = np.empty(n)
        K.disk_exit_times(n, np.uint64(99), 1e-4, out)
        med = float(np.median(out))
        assert exit_time_cdf(med, 2) == pytest.approx(0.5, abs=0.01)

    def test_validation(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValidationError):
            sample_exit_time(0.0, 1.0, rng)


@pytest.fixture(scope="module")
def flat_run():
    b = build_boundary("quadratic2d", 0)
    a = 1e-4
    cfg = WalkConfig(absorption_threshold=1e-10, reflection_offset=1e-10,
                     rng_seed=3)
    src = SourceSpec("near_boundary_uniform", offset=a, height=1.0)
    return a, run_passage_ensemble(b, cfg, src, 150000)


class TestFlatLaws:
    def test_all_absorbed_without_reflections(self, flat_run):
        _, res = flat_run
        assert res["absorbed"].all()
        assert (res["reflections"] == 0).all()

    def test_return_time_ks(self, flat_run):
        a, res = flat_run
        ks = kstest(res["t"], flat_time_cdf(a, 1.0))
        assert ks.pvalue > 0.01

    def test_displacement_ks(self, flat_run):
        a, res = flat_run
        ks = kstest(res["r"], flat_displacement_cdf(a))
        assert ks.pvalue > 0.01


class TestEnsembles:
    def test_seed_determinism(self):
        b = build_boundary("quadratic2d", 2)
        cfg = WalkConfig.for_boundary(b, rng_seed=17)
        src = SourceSpec("distant_flat")
        h1, s1 = run_hit_histogram(b, cfg, src, 20000)
        h2, s2 = run_hit_histogram(b, cfg, src, 20000)
        assert np.array_equal(h1.counts, h2.counts)
        assert s1["mean_steps"] == s2["mean_steps"]

    def test_all_absorbed_in_bounded_domain(self):
        b = build_boundary("quadratic2d", 3)
        cfg = WalkConfig.for_boundary(b, rng_seed=5)
        hist, stats = run_hit_histogram(b, cfg, SourceSpec("distant_flat"),
                                        50000)
        assert stats["absorbed"] == 50000
        assert stats["exhausted"] == 0
        assert hist.counts.sum() == 50000

    def test_reflection_count_geometric(self):
        # mean reflections before sticking ~ (1 - sigma) / sigma
        b = build_boundary("quadratic2d", 0)
        cfg = WalkConfig(absorption_threshold=1e-6, reflection_offset=1e-4,
                         sticking=0.2, rng_seed=6)
        src = SourceSpec("near_boundary_uniform", offset=1e-3, height=1.0)
        res = run_passage_ensemble(b, cfg, src, 40000)
        assert res["reflections"].mean() == pytest.approx(4.0, rel=0.05)

    def test_spread_half_within_exploration_length(self):
        # flat boundary: the fraction absorbed within one exploration
        # length of the first hit; the discrete sticking model gives
        # E[(2/pi) arctan(lambda / ell*)], ell* ~ Exp(mean lambda),
        # which evaluates to 0.6044 (the "about half" coverage radius)
        b = build_boundary("quadratic2d", 0)
        lam = 1e-3
        a = lam / 200.0
        cfg = WalkConfig(absorption_threshold=a / 10, reflection_offset=a,
                         exploration_length=lam, rng_seed=7)
        src = SourceSpec("near_boundary_uniform", offset=a, height=1.0)
        spread = run_spread_distances(b, cfg, src, 30000)
        frac = float((spread <= lam).mean())
        assert frac == pytest.approx(0.6044, abs=0.02)

    def test_exploration_length_sets_sticking(self):
        cfg = WalkConfig(absorption_threshold=1e-6, reflection_offset=1e-4,
                         exploration_length=1e-4, rng_seed=1)
        assert cfg.sticking == pytest.approx(0.5)

    def test_stream_outcomes(self):
        b = build_boundary("quadratic2d", 2)
        cfg = WalkConfig.for_boundary(b, rng_seed=21)
        outcomes = list(run_ensemble(b, cfg, SourceSpec("distant_flat"), 64))
        assert len(outcomes) == 64
        for o in outcomes:
            assert o.terminated == "absorbed"
            assert o.cell is not None and o.cell.depth == 2
            assert o.elapsed_time > 0
            assert o.steps > 0
            assert o.reflections == 0
            # landing point sits within the absorption threshold
            from confdiff.geometry import distance_to_boundary
            d, _ = distance_to_boundary(b, o.hit_point)
            assert d < cfg.absorption_threshold

    def test_single_trajectory(self):
        b = build_boundary("triangular2d", 2, math.pi / 3)
        cfg = WalkConfig.for_boundary(b, rng_seed=9)
        o = run_trajectory(b, cfg, SourceSpec("distant_flat"))
        assert o.terminated == "absorbed"

    def test_step_budget_flagged(self):
        b = build_boundary("quadratic2d", 2)
        cfg = WalkConfig(absorption_threshold=1e-5, reflection_offset=1e-4,
                         sticking=0.0, max_steps=50, rng_seed=10)
        hist, stats = run_hit_histogram(b, cfg, SourceSpec("distant_flat"),
                                        200)
        assert stats["exhausted"] == 200
        assert not stats["valid"]

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            WalkConfig(absorption_threshold=0.0, rng_seed=1)
        with pytest.raises(ValidationError):
            WalkConfig(absorption_threshold=1e-3, reflection_offset=1e-4,
                       rng_seed=1)
        with pytest.raises(ValidationError):
            WalkConfig(sticking=1.5, rng_seed=1)
        with pytest.raises(ValidationError):
            SourceSpec("magic_source")
        with pytest.raises(ValidationError):
            SourceSpec("boundary_cells_weighted")

    def test_weighted_source_targets_cells(self):
        b = build_boundary("quadratic2d", 2)
        w = np.zeros(25)
        w[7] = 1.0
        cfg = WalkConfig.for_boundary(b, rng_seed=30)
        src = SourceSpec("boundary_cells_weighted", weights=w,
                         offset=cfg.reflection_offset)
        hist, stats = run_hit_histogram(b, cfg, src, 5000)
        # launched a hair above cell 7, nearly everything lands there
        assert hist.counts[7] > 0.95 * 5000

    def test_3d_walk_smoke(self):
        b = build_boundary("cubic3d", 1)
        cfg = WalkConfig.for_boundary(b, rng_seed=31)
        hist, stats = run_hit_histogram(b, cfg, SourceSpec("distant_flat"),
                                        2000)
        assert stats["absorbed"] == 2000
        assert hist.counts.sum() == 2000
        assert (hist.counts > 0).sum() == 13  # every generator face is hit
