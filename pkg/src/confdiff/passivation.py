"""Iterative passivation of an absorbing boundary.

Each iteration measures the arrival-probability distribution on the
still-absorbing (alive) cells, extracts the smallest cell set carrying a
target fraction of that activity, switches those cells to reflecting,
and relaunches walkers.  After the first iteration the distant source is
replaced by a fictitious source on the just-passivated cells (weighted
by their final activity, offset into the bulk), which keeps walkers near
the remaining alive zones and makes late iterations affordable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConvergenceError, ValidationError
from .geometry import FractalBoundary
from .walks import SourceSpec, WalkConfig, run_hit_histogram


@dataclass(frozen=True)
class PassivationState:
    """Snapshot after ``iteration`` passivation rounds.

    ``status`` holds -1 for alive cells, else the iteration at which the
    cell was passivated.  ``activity`` is the latest measured arrival
    distribution over alive cells (sums to 1 over alive cells).
    """

    iteration: int
    status: np.ndarray
    activity: np.ndarray
    active_zone: np.ndarray
    active_size: float
    source: SourceSpec
    mean_steps: float = 0.0
    exhausted: int = 0

    @property
    def alive(self) -> np.ndarray:
        return self.status < 0

    @property
    def alive_fraction(self) -> float:
        return float(np.count_nonzero(self.status < 0) / self.status.shape[0])


def initial_state(boundary: FractalBoundary, source: SourceSpec | None = None
                  ) -> PassivationState:
    n = boundary.cell_count
    return PassivationState(
        iteration=0,
        status=np.full(n, -1, dtype=np.int32),
        activity=np.zeros(n),
        active_zone=np.empty(0, dtype=np.int64),
        active_size=0.0,
        source=source if source is not None else SourceSpec("distant_flat"),
    )


def activity_distribution(boundary: FractalBoundary, state: PassivationState,
                          config: WalkConfig, n_walkers: int):
    """Arrival probabilities over alive cells: alive cells absorb,
    passivated ones reflect."""
    alive = state.alive
    if not alive.any():
        raise ValidationError("no alive cells remain")
    hist, stats = run_hit_histogram(
        boundary, config, state.source, n_walkers,
        depth=boundary.generation, alive=alive.astype(np.uint8))
    if stats["absorbed"] == 0:
        raise ConvergenceError(
            "every trajectory exhausted its step budget; screening too "
            "strong, increase max_steps or the walker count")
    activity = hist.counts / stats["absorbed"]
    return activity, stats


def extract_active_zone(activity: np.ndarray, p_active: float,
                        alive: np.ndarray | None = None):
    """Smallest cell set carrying at least ``p_active`` of the activity.

    Cells are taken in decreasing activity order; equal activities break
    toward the smaller cell address.  Returns (cell codes, count).
    """
    if not (0.0 < p_active < 1.0):
        raise ValidationError("p_active must lie strictly between 0 and 1")
    act = np.asarray(activity, dtype=float)
    if alive is not None:
        act = np.where(alive, act, 0.0)
    total = act.sum()
    if total <= 0:
        raise ValidationError("activity is identically zero")
    order = np.lexsort((np.arange(act.shape[0]), -act))
    csum = np.cumsum(act[order]) / total
    m = int(np.searchsorted(csum, p_active) + 1)
    m = min(m, int(np.count_nonzero(act > 0)))
    zone = np.sort(order[:m])
    return zone, m


def passivation_step(boundary: FractalBoundary, state: PassivationState,
                     config: WalkConfig, n_walkers: int,
                     p_active: float = 0.8) -> PassivationState:
    """One round: measure activity, passivate the active zone, move the
    source onto the just-passivated cells."""
    step_config = replace(config, rng_seed=config.rng_seed ^ (state.iteration + 1))
    activity, stats = activity_distribution(boundary, state, step_config, n_walkers)
    zone, m = extract_active_zone(activity, p_active, state.alive)
    status = state.status.copy()
    status[zone] = state.iteration
    weights = np.zeros_like(activity)
    weights[zone] = activity[zone]
    new_source = SourceSpec("boundary_cells_weighted", weights=weights,
                            offset=config.reflection_offset,
                            height=state.source.height)
    return PassivationState(
        iteration=state.iteration + 1,
        status=status,
        activity=activity,
        active_zone=zone,
        active_size=m * boundary.cell_measure(boundary.generation),
        source=new_source,
        mean_steps=stats["mean_steps"],
        exhausted=stats["exhausted"],
    )


def run_passivation(boundary: FractalBoundary, p_active: float,
                    config: WalkConfig, n_walkers: int, max_iter: int,
                    source: SourceSpec | None = None,
                    log_path=None) -> list[PassivationState]:
    """Iterate passivation until nothing is alive or ``max_iter`` rounds.

    Returns the state sequence (first entry = pristine boundary).
    """
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    states = [initial_state(boundary, source)]
    rows = []
    for _ in range(max_iter):
        st = states[-1]
        if not st.alive.any():
            break
        nxt = passivation_step(boundary, st, config, n_walkers, p_active)
        states.append(nxt)
        rows.append((nxt.iteration, nxt.alive_fraction,
                     nxt.active_size / boundary.base_length,
                     nxt.mean_steps, nxt.exhausted))
    if log_path is not None:
        with open(log_path, "w", newline="\n") as fh:
            fh.write("iteration,alive_fraction,active_size,mean_steps,exhausted\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]:.17g},{r[2]:.17g},{r[3]:.17g},{r[4]}\n")
    return states


def save_checkpoint(state: PassivationState, path) -> None:
    payload = {
        "iteration": state.iteration,
        "status": state.status.tolist(),
        "activity": state.activity.tolist(),
        "active_zone": state.active_zone.tolist(),
        "active_size": state.active_size,
        "source_kind": state.source.kind,
        "source_weights": (state.source.weights.tolist()
                           if state.source.weights is not None else None),
        "source_offset": state.source.offset,
        "source_height": state.source.height,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> PassivationState:
    with open(path) as fh:
        payload = json.load(fh)
    weights = payload["source_weights"]
    source = SourceSpec(
        payload["source_kind"],
        offset=payload["source_offset"],
        weights=None if weights is None else np.asarray(weights),
        height=payload["source_height"],
    )
    return PassivationState(
        iteration=payload["iteration"],
        status=np.asarray(payload["status"], dtype=np.int32),
        activity=np.asarray(payload["activity"]),
        active_zone=np.asarray(payload["active_zone"], dtype=np.int64),
        active_size=payload["active_size"],
        source=source,
    )
