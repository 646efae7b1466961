"""Geometry-adapted fast random walks.

A walker repeatedly jumps to a uniform point on the largest disk/sphere
that fits in the bulk (radius = exact boundary distance), accumulating
the random first-exit time of each ball.  Within ``absorption_threshold``
of the boundary it either sticks (probability ``sticking``) or is
relocated to ``reflection_offset`` along the inward normal.

Domain: the prefractal closes the box from below, perfectly reflecting
lateral walls close it at x=0 and x=L (plus y in 3D), and a flat source
plane closes it from above.  Straight reflecting planes are handled by
mirror folding, which is exact for Brownian motion; jump radii near the
source plane are capped so folded jumps can never land behind the
boundary.

Time advances by table lookup into the inverse CDF of the first-exit
time of a ball (series evaluated to 1e-8 relative accuracy, 4096-point
quantile table, analytic exponential tail).  Reflection relocations are
instantaneous; timing statistics are therefore meaningful for sticking
probability 1 (first-passage problems), which is how they are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import j1, jn_zeros

from . import _kernels as K
from .errors import CapacityError, ValidationError
from .geometry import BoundaryCellId, FractalBoundary, code_to_address

EXIT_TABLE_SIZE = 4096
_TAIL_CUT = 1.0 - 1.0 / 512.0
_exit_tables: dict[int, tuple[np.ndarray, float, float, float]] = {}


def _exit_series(dim: int, n_terms: int = 400):
    """Coefficients of the ball first-exit survival S(tau) = sum a_i exp(-lam_i tau)."""
    if dim == 2:
        alphas = jn_zeros(0, n_terms)
        a = 2.0 / (alphas * j1(alphas))
        lam = alphas ** 2
    elif dim == 3:
        n = np.arange(1, n_terms + 1)
        a = 2.0 * (-1.0) ** (n + 1)
        lam = (n * math.pi) ** 2
    else:
        raise ValidationError(f"unsupported dimension {dim}")
    return a, lam


def exit_time_cdf(tau, dim: int = 2):
    """CDF of the first-exit time of Brownian motion from the unit ball (D=1)."""
    a, lam = _exit_series(dim)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    s = np.einsum("i,ij->j", a, np.exp(-np.outer(lam, tau)))
    out = 1.0 - s
    return out if out.size > 1 else float(out[0])


def exit_time_table(dim: int) -> tuple[np.ndarray, float, float, float]:
    """(quantile table, tail amplitude, tail rate, tail cut) for dimension dim."""
    if dim in _exit_tables:
        return _exit_tables[dim]
    a, lam = _exit_series(dim)
    # The eigen-series only converges for tau above ~2e-5 with 400 terms;
    # below that the exit probability is < 1e-3000, so clamp there.
    tau_floor = 2e-5
    u = np.arange(EXIT_TABLE_SIZE + 1) / EXIT_TABLE_SIZE
    # bracket on a dense grid, then Newton to machine precision
    grid = np.geomspace(tau_floor, 60.0 / lam[0], 6000)
    cdf_grid = 1.0 - np.einsum("i,ij->j", a, np.exp(-np.outer(lam, grid)))
    cdf_grid = np.clip(np.maximum.accumulate(cdf_grid), 0.0, 1.0)
    tau = np.interp(u, cdf_grid, grid)
    for _ in range(60):
        e = np.exp(-np.outer(lam, tau))
        f = (1.0 - a @ e) - u
        pdf = (a * lam) @ e
        step = np.where(pdf > 0, f / np.maximum(pdf, 1e-300), 0.0)
        tau = np.maximum(tau - step, tau_floor)
        if np.max(np.abs(step)) < 1e-14:
            break
    tau[0] = 0.0
    table = (tau, float(a[0]), float(lam[0]), _TAIL_CUT)
    _exit_tables[dim] = table
    return table


def sample_exit_time(distance: float, diffusion: float, rng: np.random.Generator,
                     dim: int = 2, size: int | None = None):
    """Random first-exit time(s) from a ball of radius ``distance``."""
    if distance <= 0 or diffusion <= 0:
        raise ValidationError("distance and diffusion must be positive")
    qtab, tail_a, tail_lam, u_cut = exit_time_table(dim)
    u = rng.random(size if size is not None else 1)
    idx = np.minimum((u * EXIT_TABLE_SIZE).astype(int), EXIT_TABLE_SIZE - 1)
    frac = u * EXIT_TABLE_SIZE - idx
    tau = qtab[idx] * (1 - frac) + qtab[idx + 1] * frac
    tail = u >= u_cut
    if np.any(tail):
        tau[tail] = np.log(tail_a / (1.0 - u[tail])) / tail_lam
    out = tau * distance ** 2 / diffusion
    return out if size is not None else float(out[0])


def jump(point, distance: float, rng: np.random.Generator):
    """Uniform point on the circle (2D) or sphere (3D) around ``point``."""
    if distance <= 0:
        raise ValidationError("jump distance must be positive")
    p = np.asarray(point, dtype=float)
    if p.shape == (2,):
        ang = rng.random() * 2 * math.pi
        return p + distance * np.array([math.cos(ang), math.sin(ang)])
    if p.shape == (3,):
        z = 2 * rng.random() - 1
        phi = rng.random() * 2 * math.pi
        r = math.sqrt(max(0.0, 1 - z * z))
        return p + distance * np.array([r * math.cos(phi), r * math.sin(phi), z])
    raise ValidationError("point must be a 2- or 3-vector")


@dataclass(frozen=True)
class WalkConfig:
    """Walker parameters.  ``sticking`` may be given via ``exploration_length``
    (ratio of bulk diffusivity to surface transfer rate): sticking =
    offset / (offset + exploration_length)."""

    diffusion: float = 1.0
    absorption_threshold: float = 1e-3
    reflection_offset: float = 1e-2
    sticking: float = 1.0
    exploration_length: float | None = None
    max_steps: int = 10 ** 8
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.diffusion <= 0:
            raise ValidationError("diffusion must be positive")
        if self.absorption_threshold <= 0:
            raise ValidationError("absorption_threshold must be positive")
        if self.reflection_offset < self.absorption_threshold:
            raise ValidationError("reflection_offset must be >= absorption_threshold")
        if self.exploration_length is not None:
            if self.exploration_length < 0:
                raise ValidationError("exploration_length must be >= 0")
            sig = self.reflection_offset / (self.reflection_offset + self.exploration_length)
            object.__setattr__(self, "sticking", sig)
        if not (0.0 <= self.sticking <= 1.0):
            raise ValidationError("sticking must lie in [0, 1]")
        if self.max_steps < 1:
            raise ValidationError("max_steps must be >= 1")

    @staticmethod
    def for_boundary(boundary: FractalBoundary, rng_seed: int,
                     eps_factor: float = 1e-3, offset_factor: float = 10.0,
                     **kw) -> "WalkConfig":
        """Defaults tied to the smallest feature: threshold = 1e-3 * feature,
        offset = 10 * threshold."""
        eps = eps_factor * boundary.smallest_feature
        return WalkConfig(absorption_threshold=eps,
                          reflection_offset=offset_factor * eps,
                          rng_seed=rng_seed, **kw)


@dataclass(frozen=True)
class SourceSpec:
    """Where walkers are born.

    * ``distant_flat``: uniform on the source plane (height ``height``,
      default 4 box-widths above the boundary's top).
    * ``near_boundary_uniform``: uniform over the finest boundary cells,
      offset ``offset`` along the inward normal.
    * ``boundary_cells_weighted``: cells drawn by ``weights`` (dense array
      over finest-cell codes), offset along the inward normal.
    """

    kind: str = "distant_flat"
    offset: float | None = None
    weights: np.ndarray | None = None
    height: float | None = None

    def __post_init__(self):
        if self.kind not in ("distant_flat", "near_boundary_uniform",
                             "boundary_cells_weighted"):
            raise ValidationError(f"unknown source kind {self.kind!r}")
        if self.kind == "boundary_cells_weighted":
            if self.weights is None:
                raise ValidationError("weighted source needs weights")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValidationError("weights must be nonnegative and normalizable")
            object.__setattr__(self, "weights", w)

    def kernel_args(self, boundary: FractalBoundary, config: WalkConfig,
                    lid: float) -> tuple[int, np.ndarray, float]:
        kinds = {"distant_flat": 0, "near_boundary_uniform": 1,
                 "boundary_cells_weighted": 2}
        code = kinds[self.kind]
        if code == 2:
            w = self.weights
            if w.shape[0] != boundary.cell_count:
                raise ValidationError("weights length must equal finest cell count")
            cum = np.cumsum(w) / w.sum()
        else:
            cum = np.zeros(1)
        off = self.offset if self.offset is not None else config.reflection_offset
        return code, cum, float(off)


class WalkOutcome(NamedTuple):
    hit_point: tuple
    cell: BoundaryCellId | None
    elapsed_time: float
    end_to_end: float
    reflections: int
    steps: int
    terminated: str  # "absorbed" | "step_budget_exhausted"


def default_lid(boundary: FractalBoundary, source: SourceSpec) -> float:
    if source.height is not None:
        if source.height <= boundary.top_height:
            raise ValidationError("source plane must sit above the boundary")
        return float(source.height)
    return boundary.top_height + 4.0 * boundary.base_length


def _common_args(boundary: FractalBoundary, config: WalkConfig, source: SourceSpec):
    lid = default_lid(boundary, source)
    qtab, tail_a, tail_lam, u_cut = exit_time_table(boundary.ndim)
    src_kind, src_cum, src_off = source.kernel_args(boundary, config, lid)
    return lid, (qtab, tail_a, tail_lam, u_cut), (src_kind, src_cum, src_off)


def _n_chunks(n: int, config: WalkConfig) -> int:
    return int(min(max(4 * config.workers, 1), max(n, 1), 64))


def run_hit_histogram(boundary: FractalBoundary, config: WalkConfig,
                      source: SourceSpec, n_walkers: int,
                      depth: int | None = None,
                      alive: np.ndarray | None = None):
    """Absorbed-hit counts per depth-level cell, plus run statistics.

    Returns (counts int64[cells], stats dict).  ``alive`` switches cells
    between absorbing (true) and reflecting (false).
    """
    from .measures import HitHistogram

    if n_walkers < 1:
        raise ValidationError("n_walkers must be >= 1")
    g = boundary.generation
    depth = g if depth is None else depth
    if not (0 <= depth <= g):
        raise ValidationError("histogram depth must lie in [0, generation]")
    k = boundary.child_count
    ncells = k ** depth
    if ncells > 1 << 26:
        raise CapacityError("histogram too large")
    lid, table, src = _common_args(boundary, config, source)
    use_alive = 0
    alive_arr = np.zeros(1, dtype=np.uint8)
    if alive is not None:
        alive_arr = np.ascontiguousarray(alive, dtype=np.uint8)
        if alive_arr.shape[0] != boundary.cell_count:
            raise ValidationError("alive mask must cover the finest cells")
        use_alive = 1
    nch = _n_chunks(n_walkers, config)
    hist_buf = np.zeros((nch, ncells), dtype=np.int64)
    stat_buf = np.zeros((nch, 5))
    bin_div = np.int64(k ** (g - depth))
    args = boundary.kernel_args()
    if boundary.ndim == 2:
        kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1 = args
        K.ensemble_hist2d(n_walkers, np.uint64(config.rng_seed),
                          kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                          boundary.base_length, boundary.top_height, lid,
                          config.absorption_threshold, config.reflection_offset,
                          config.sticking, config.max_steps, config.diffusion,
                          *table, use_alive, alive_arr, *src,
                          bin_div, nch, hist_buf, stat_buf)
    else:
        kk, gg, gorg, grot, scale_at, box = args
        K.ensemble_hist3d(n_walkers, np.uint64(config.rng_seed),
                          kk, gg, gorg, grot, scale_at, box,
                          boundary.base_length, boundary.top_height, lid,
                          config.absorption_threshold, config.reflection_offset,
                          config.sticking, config.max_steps, config.diffusion,
                          *table, use_alive, alive_arr, *src,
                          bin_div, nch, hist_buf, stat_buf)
    counts = hist_buf.sum(axis=0)
    s = stat_buf.sum(axis=0)
    stats = {
        "absorbed": int(s[0]),
        "exhausted": int(s[1]),
        "mean_steps": s[2] / max(n_walkers, 1),
        "mean_reflections": s[3] / max(n_walkers, 1),
        "mean_time": s[4] / max(s[0], 1),
        "valid": s[1] < 1e-6 * n_walkers + 1,
    }
    hist = HitHistogram(
        family=boundary.family, generation=g, depth=depth,
        scale_ratio=boundary.scale_ratio, counts=counts,
        total=int(s[0]), child_count=k,
    )
    return hist, stats


def run_passage_ensemble(boundary: FractalBoundary, config: WalkConfig,
                         source: SourceSpec, n_walkers: int):
    """Per-trajectory first-passage records: arrays t, r, reflections, absorbed."""
    if boundary.ndim != 2:
        raise ValidationError("passage ensembles are implemented for 2D boundaries")
    lid, table, src = _common_args(boundary, config, source)
    nch = _n_chunks(n_walkers, config)
    t_out = np.empty(n_walkers)
    r_out = np.empty(n_walkers)
    refl_out = np.empty(n_walkers, dtype=np.int32)
    status_out = np.empty(n_walkers, dtype=np.int8)
    kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1 = boundary.kernel_args()
    K.ensemble_passage2d(n_walkers, np.uint64(config.rng_seed),
                         kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                         boundary.base_length, boundary.top_height, lid,
                         config.absorption_threshold, config.reflection_offset,
                         config.sticking, config.max_steps, config.diffusion,
                         *table, *src, nch, t_out, r_out, refl_out, status_out)
    return {"t": t_out, "r": r_out, "reflections": refl_out,
            "absorbed": status_out == 1}


def run_spread_distances(boundary: FractalBoundary, config: WalkConfig,
                         source: SourceSpec, n_walkers: int):
    """Distance between each walker's first hit and its absorption point."""
    if boundary.ndim != 2:
        raise ValidationError("spread ensembles are implemented for 2D boundaries")
    lid, table, src = _common_args(boundary, config, source)
    nch = _n_chunks(n_walkers, config)
    spread = np.empty(n_walkers)
    status = np.empty(n_walkers, dtype=np.int8)
    kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1 = boundary.kernel_args()
    K.ensemble_spread2d(n_walkers, np.uint64(config.rng_seed),
                        kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                        boundary.base_length, boundary.top_height, lid,
                        config.absorption_threshold, config.reflection_offset,
                        config.sticking, config.max_steps, config.diffusion,
                        *table, *src, nch, spread, status)
    return spread[status == 1]


def run_trajectory(boundary: FractalBoundary, config: WalkConfig,
                   source: SourceSpec) -> WalkOutcome:
    """Simulate a single trajectory (convenience wrapper)."""
    for outcome in run_ensemble(boundary, config, source, 1):
        return outcome
    raise RuntimeError("unreachable")


def run_ensemble(boundary: FractalBoundary, config: WalkConfig,
                 source: SourceSpec, n_walkers: int,
                 chunk_size: int = 65536) -> Iterator[WalkOutcome]:
    """Yield individual trajectory outcomes (streaming; nothing stored).

    Aggregate runs should prefer ``run_hit_histogram`` /
    ``run_passage_ensemble``, which share the same deterministic
    per-trajectory RNG and are far cheaper than materializing outcomes.
    """
    if boundary.ndim != 2:
        yield from _run_ensemble_3d(boundary, config, source, n_walkers)
        return
    if n_walkers < 1:
        raise ValidationError("n_walkers must be >= 1")
    lid, table, src = _common_args(boundary, config, source)
    kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1 = boundary.kernel_args()
    g = boundary.generation
    done = 0
    while done < n_walkers:
        n = min(chunk_size, n_walkers - done)
        t_out = np.empty(n)
        x_out = np.empty(n)
        y_out = np.empty(n)
        r_out = np.empty(n)
        steps_out = np.empty(n, dtype=np.int64)
        refl_out = np.empty(n, dtype=np.int64)
        addr_out = np.empty(n, dtype=np.int64)
        status_out = np.empty(n, dtype=np.int8)
        K.ensemble_detail2d(n, done, np.uint64(config.rng_seed),
                            kk, gg, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                            boundary.base_length, boundary.top_height, lid,
                            config.absorption_threshold, config.reflection_offset,
                            config.sticking, config.max_steps, config.diffusion,
                            *table, *src,
                            t_out, x_out, y_out, r_out, steps_out, refl_out,
                            addr_out, status_out)
        for i in range(n):
            absorbed = status_out[i] == 1
            cell = None
            if absorbed:
                cell = BoundaryCellId(code_to_address(
                    int(addr_out[i]), g, boundary.child_count))
            yield WalkOutcome(
                hit_point=(x_out[i], y_out[i]),
                cell=cell,
                elapsed_time=float(t_out[i]),
                end_to_end=float(r_out[i]),
                reflections=int(refl_out[i]),
                steps=int(steps_out[i]),
                terminated="absorbed" if absorbed else "step_budget_exhausted",
            )
        done += n


def _run_ensemble_3d(boundary, config, source, n_walkers):
    # 3D streaming goes through the histogram kernel one walker at a time;
    # used only for smoke-scale runs.
    for i in range(n_walkers):
        cfg = WalkConfig(diffusion=config.diffusion,
                         absorption_threshold=config.absorption_threshold,
                         reflection_offset=config.reflection_offset,
                         sticking=config.sticking,
                         max_steps=config.max_steps,
                         rng_seed=config.rng_seed + i,
                         workers=1)
        hist, stats = run_hit_histogram(boundary, cfg, source, 1)
        code = int(np.argmax(hist.counts)) if stats["absorbed"] else -1
        cell = None
        if stats["absorbed"]:
            cell = BoundaryCellId(code_to_address(
                code, boundary.generation, boundary.child_count))
        yield WalkOutcome(hit_point=(), cell=cell,
                          elapsed_time=stats["mean_time"],
                          end_to_end=float("nan"),
                          reflections=int(stats["mean_reflections"]),
                          steps=int(stats["mean_steps"]),
                          terminated="absorbed" if stats["absorbed"] else
                          "step_budget_exhausted")
