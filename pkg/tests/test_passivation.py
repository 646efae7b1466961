import math

import numpy as np
import pytest

from confdiff.errors import ValidationError
from confdiff.geometry import build_boundary
from confdiff.passivation import (
    activity_distribution,
    extract_active_zone,
    initial_state,
    load_checkpoint,
    passivation_step,
    run_passivation,
    save_checkpoint,
)
from confdiff.walks import SourceSpec, WalkConfig, run_hit_histogram


class TestActiveZone:
    def test_uniform_activity(self):
        m = 40
        zone, cnt = extract_active_zone(np.full(m, 1.0 / m), 0.8)
        assert cnt == math.ceil(0.8 * m)

    def test_dominant_cell(self):
        act = np.array([0.05, 0.9, 0.05])
        zone, cnt = extract_active_zone(act, 0.8)
        assert cnt == 1 and zone.tolist() == [1]

    def test_cumulative_example(self):
        act = np.array([0.5, 0.3, 0.2])
        zone, cnt = extract_active_zone(act, 0.8)
        assert cnt == 2 and zone.tolist() == [0, 1]

    def test_ties_break_by_address(self):
        act = np.array([0.25, 0.25, 0.25, 0.25])
        zone, cnt = extract_active_zone(act, 0.5)
        assert zone.tolist() == [0, 1]

    def test_p_active_bounds(self):
        with pytest.raises(ValidationError):
            extract_active_zone(np.ones(3), 1.0)


@pytest.fixture(scope="module")
def small_run():
    boundary = build_boundary("quadratic2d", 2)
    cfg = WalkConfig.for_boundary(boundary, rng_seed=42, max_steps=10 ** 6)
    states = run_passivation(boundary, 0.8, cfg, 30000, max_iter=40)
    return boundary, cfg, states


class TestProtocol:
    def test_initial_activity_is_harmonic_measure(self):
        boundary = build_boundary("quadratic2d", 2)
        cfg = WalkConfig.for_boundary(boundary, rng_seed=42)
        state = initial_state(boundary)
        act, stats = activity_distribution(boundary, state, cfg, 20000)
        cfg2 = WalkConfig.for_boundary(boundary, rng_seed=cfg.rng_seed)
        hist, s2 = run_hit_histogram(boundary, cfg2,
                                     SourceSpec("distant_flat"), 20000)
        assert np.allclose(act, hist.counts / hist.counts.sum())

    def test_single_alive_cell_takes_everything(self):
        boundary = build_boundary("quadratic2d", 1)
        cfg = WalkConfig.for_boundary(boundary, rng_seed=4)
        state = initial_state(boundary)
        state.status[:] = 0
        state.status[3] = -1
        act, _ = activity_distribution(boundary, state, cfg, 4000)
        assert act[3] == pytest.approx(1.0)
        assert act.sum() == pytest.approx(1.0)

    def test_alive_fraction_strictly_decreases(self, small_run):
        _, _, states = small_run
        fracs = [s.alive_fraction for s in states]
        assert all(b < a for a, b in zip(fracs[:-1], fracs[1:]))

    def test_zones_disjoint_and_cover(self, small_run):
        boundary, _, states = small_run
        seen = np.zeros(boundary.cell_count, dtype=int)
        for s in states[1:]:
            seen[s.active_zone] += 1
        assert states[-1].alive_fraction == 0.0
        assert np.all(seen == 1)

    def test_passivated_cells_receive_no_hits(self, small_run):
        _, _, states = small_run
        for s in states[2:]:
            passivated_before = states[s.iteration - 1].status >= 0
            assert np.all(s.activity[passivated_before] == 0.0)

    def test_boundary_source_is_cheaper_than_distant(self, small_run):
        boundary, cfg, states = small_run
        # re-run iteration 1 activity with the distant source for contrast
        st = states[1]
        distant = initial_state(boundary)
        distant.status[:] = st.status
        act, stats_far = activity_distribution(boundary, distant, cfg, 30000)
        assert states[2].mean_steps <= stats_far["mean_steps"]

    def test_near_flat_curve_needs_about_two_rounds(self):
        # widest supported generator angle: an almost flat sawtooth whose
        # activity is nearly uniform, so 80% + the rest = 2 rounds
        boundary = build_boundary("triangular2d", 3, 2.9)
        cfg = WalkConfig.for_boundary(boundary, rng_seed=8)
        states = run_passivation(boundary, 0.8, cfg, 60000, max_iter=10)
        assert states[-1].alive_fraction == 0.0
        assert states[-1].iteration in (2, 3)

    def test_checkpoint_roundtrip(self, small_run, tmp_path):
        _, _, states = small_run
        path = tmp_path / "state.json"
        save_checkpoint(states[2], path)
        loaded = load_checkpoint(path)
        assert loaded.iteration == states[2].iteration
        assert np.array_equal(loaded.status, states[2].status)
        assert np.allclose(loaded.activity, states[2].activity)
        assert loaded.source.kind == states[2].source.kind

    def test_log_csv(self, small_run, tmp_path):
        boundary, cfg, _ = small_run
        path = tmp_path / "log.csv"
        run_passivation(boundary, 0.8, cfg, 5000, max_iter=6, log_path=path)
        rows = path.read_text().strip().split("\n")
        assert rows[0] == "iteration,alive_fraction,active_size,mean_steps,exhausted"
        assert len(rows) >= 3
