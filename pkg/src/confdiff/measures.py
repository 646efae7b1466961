"""Multifractal and first-passage analysis of hit statistics.

Hits are binned on the natural generator cells of a prefractal: the
partition at depth j has k**j cells of size delta_j = r**j (in units of
the system width).  Moment sums, scale-dependent dimensions, the 1/g
extrapolation of those dimensions, the exploration-length rescaling of
spread measures, and power-law exponent fits for first-passage samples
all live here.  Everything operates on immutable histograms and plain
arrays; nothing here mutates shared state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class HitHistogram:
    """Counts of absorbed walkers per generator cell at one partition depth.

    ``delta`` is the cell scale in units of the system width; for the
    natural partitions it equals scale_ratio**depth.
    """

    family: str
    generation: int
    depth: int
    scale_ratio: float
    counts: np.ndarray
    total: int
    child_count: int

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.shape[0] != self.child_count ** self.depth:
            raise ValidationError("counts must cover every cell of the partition")
        if np.any(c < 0):
            raise ValidationError("counts must be nonnegative")
        if not (0 < self.scale_ratio < 1):
            raise ValidationError("scale ratio must lie in (0, 1)")

    @property
    def delta(self) -> float:
        return self.scale_ratio ** self.depth

    def coarsen(self, depth: int) -> "HitHistogram":
        """Merge sibling cells down to a coarser partition depth."""
        if not (0 <= depth <= self.depth):
            raise ValidationError("coarsen depth must lie in [0, depth]")
        ratio = self.child_count ** (self.depth - depth)
        counts = self.counts.reshape(-1, ratio).sum(axis=1)
        return HitHistogram(self.family, self.generation, depth, self.scale_ratio,
                            counts, self.total, self.child_count)

    def merged_with(self, other: "HitHistogram") -> "HitHistogram":
        if (self.family, self.generation, self.depth, self.child_count) != (
                other.family, other.generation, other.depth, other.child_count):
            raise ValidationError("histograms are not partition-compatible")
        return HitHistogram(self.family, self.generation, self.depth,
                            self.scale_ratio, self.counts + other.counts,
                            self.total + other.total, self.child_count)


@dataclass(frozen=True)
class MultifractalEstimate:
    q: float
    generations: tuple
    scale_dimensions: tuple
    dimension: float  # extrapolated D_q
    slope: float      # 1/g coefficient c_q
    stderr: float
    r_squared: float
    low_confidence: bool


@dataclass(frozen=True)
class ExponentFit:
    value: float
    window: tuple
    stderr: float
    r_squared: float
    theory: float | None = None


def moments(hist: HitHistogram, q: float) -> float:
    """Partition sum of the q-th powers of the cell probabilities.

    Zero-count cells are excluded (they contribute 0 for q > 0 and would
    diverge for q <= 0).  q = 1 returns exactly 1.
    """
    if hist.total < 1:
        raise ValidationError("histogram is empty")
    if q == 1:
        return 1.0
    p = hist.counts[hist.counts > 0] / hist.total
    return float(np.sum(p ** q))


def pair_moment_unbiased(hist: HitHistogram) -> float:
    """Unbiased estimator of the q=2 moment: sum n(n-1) / (N(N-1))."""
    n = hist.counts.astype(float)
    N = float(hist.total)
    if N < 2:
        raise ValidationError("need at least two hits")
    return float(np.sum(n * (n - 1.0)) / (N * (N - 1.0)))


def scale_dimension(hist: HitHistogram, q: float, unbiased: bool = False) -> float:
    """Scale-dependent dimension ln zeta / ((q-1) ln delta); entropy form at q=1.

    ``unbiased`` switches q=2 to the pairwise estimator, removing the
    1/N sampling bias of the plug-in moment.
    """
    if hist.delta >= 1.0:
        raise ValidationError("partition scale must be below the system size")
    nz = int(np.count_nonzero(hist.counts))
    if nz == 1 and q < 1:
        raise ValidationError("all mass in one cell: dimension degenerate for q < 1")
    ln_delta = math.log(hist.delta)
    if q == 1:
        p = hist.counts[hist.counts > 0] / hist.total
        return float(np.sum(p * np.log(p)) / ln_delta)
    if unbiased and q == 2:
        z = pair_moment_unbiased(hist)
    else:
        z = moments(hist, q)
    if z <= 0:
        raise ValidationError("moment sum vanished; not enough statistics")
    return float(math.log(z) / ((q - 1) * ln_delta))


def negative_order_allowed(hist: HitHistogram, floor: int = 10) -> bool:
    """Negative-q dimensions are reported only when every cell has counts."""
    return bool(np.all(hist.counts >= floor))


def extrapolate_dimension(generations, values, q: float) -> MultifractalEstimate:
    """Least-squares line in 1/g: intercept = D_q, slope = c_q.

    Finite generations carry a 1/g correction (plus exponentially small
    terms), so the infinite-generation dimension is read off as the
    intercept of D(g) against 1/g.
    """
    gs = np.asarray(generations, dtype=float)
    ys = np.asarray(values, dtype=float)
    if gs.shape != ys.shape or gs.size < 3:
        raise ValidationError("need at least three generations to extrapolate")
    x = 1.0 / gs
    A = np.vstack([np.ones_like(x), x]).T
    coef, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
    fit = A @ coef
    rss = float(np.sum((ys - fit) ** 2))
    tss = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    dof = max(gs.size - 2, 1)
    s2 = rss / dof
    sxx = float(np.sum((x - x.mean()) ** 2))
    se_intercept = math.sqrt(s2 * (1.0 / gs.size + x.mean() ** 2 / sxx))
    return MultifractalEstimate(
        q=q, generations=tuple(int(g) for g in gs),
        scale_dimensions=tuple(float(v) for v in ys),
        dimension=float(coef[0]), slope=float(coef[1]),
        stderr=se_intercept, r_squared=r2,
        low_confidence=r2 < 0.9,
    )


def spread_scale(exploration_length: float, feature: float, d0: float) -> float:
    """Diameter of the boundary region whose developed size matches the
    exploration length: feature * (exploration_length/feature)**(1/d0)."""
    if exploration_length < 0 or feature <= 0:
        raise ValidationError("exploration_length >= 0 and feature > 0 required")
    if exploration_length == 0:
        return 0.0
    return float(feature * (exploration_length / feature) ** (1.0 / d0))


def log_histogram(samples, bins_per_decade: int = 20, lo: float | None = None,
                  hi: float | None = None):
    """Logarithmic histogram: (bin centers, density) with empty bins dropped."""
    s = np.asarray(samples, dtype=float)
    s = s[s > 0]
    if s.size == 0:
        raise ValidationError("no positive samples")
    lo = float(s.min()) if lo is None else lo
    hi = float(s.max()) if hi is None else hi
    if not hi > lo > 0:
        raise ValidationError("bad histogram range")
    nbins = max(int(math.ceil(math.log10(hi / lo) * bins_per_decade)), 1)
    edges = np.geomspace(lo, hi, nbins + 1)
    counts, _ = np.histogram(s, bins=edges)
    widths = np.diff(edges)
    centers = np.sqrt(edges[:-1] * edges[1:])
    dens = counts / (s.size * widths)
    keep = counts > 0
    return centers[keep], dens[keep], counts[keep]


def fit_power_law(samples, window: tuple, bins_per_decade: int = 20) -> ExponentFit:
    """Least-squares slope of the log-log density histogram over ``window``.

    Returns the decay exponent as a positive number (density ~ x**-value).
    """
    lo, hi = window
    if not (hi > lo > 0):
        raise ValidationError("bad fit window")
    if hi / lo < 10 ** 1.5:
        raise ValidationError("fit window must span at least 1.5 decades")
    centers, dens, counts = log_histogram(samples, bins_per_decade)
    keep = (centers >= lo) & (centers <= hi)
    if keep.sum() < 5:
        raise ValidationError("too few occupied bins in the fit window")
    x = np.log(centers[keep])
    y = np.log(dens[keep])
    A = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ coef
    rss = float(np.sum((y - fit) ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    dof = max(x.size - 2, 1)
    sxx = float(np.sum((x - x.mean()) ** 2))
    se_slope = math.sqrt(rss / dof / sxx)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return ExponentFit(value=float(-coef[1]), window=(lo, hi),
                       stderr=se_slope, r_squared=r2)


def passage_exponents_theory(d0: float, ndim: int) -> tuple[float, float]:
    """Predicted tail exponents of the return-time and displacement laws
    for a boundary of fractal dimension d0 embedded in ndim dimensions:
    time exponent (d0 - d + 4)/2, displacement exponent d0 - d + 3."""
    alpha = (d0 - ndim + 4.0) / 2.0
    beta = d0 - ndim + 3.0
    return alpha, beta


def fit_passage_exponents(t_samples, r_samples, d0: float, ndim: int,
                          t_window: tuple, r_window: tuple,
                          bins_per_decade: int = 20) -> tuple[ExponentFit, ExponentFit]:
    """Fit the power-law tails of the excursion time and displacement laws.

    The windows must exclude both the short-scale regime set by the launch
    offset and the cutoff at the system size.
    """
    if len(t_samples) < 10 ** 5:
        raise ValidationError("need at least 1e5 samples for a stable tail fit")
    a_th, b_th = passage_exponents_theory(d0, ndim)
    fa = fit_power_law(t_samples, t_window, bins_per_decade)
    fb = fit_power_law(r_samples, r_window, bins_per_decade)
    return (ExponentFit(fa.value, fa.window, fa.stderr, fa.r_squared, a_th),
            ExponentFit(fb.value, fb.window, fb.stderr, fb.r_squared, b_th))


def flat_time_cdf(a: float, diffusion: float):
    """Exact CDF of the return time to a straight line from height ``a``."""
    from scipy.special import erfc

    def cdf(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = erfc(a / (2.0 * np.sqrt(diffusion * t[pos])))
        return out

    return cdf


def flat_displacement_cdf(a: float):
    """Exact CDF of the Euclidean end-to-end excursion distance over a
    straight line, launch height ``a``."""

    def cdf(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        ok = r > a
        out[ok] = (2.0 / math.pi) * np.arctan(np.sqrt(r[ok] ** 2 - a ** 2) / a)
        return out

    return cdf


# ----------------------------------------------------------------------
# Delimited output
# ----------------------------------------------------------------------

def write_scale_dimension_table(path, rows) -> None:
    """CSV rows (q, generation, delta, scale_dimension)."""
    with open(path, "w", newline="\n") as fh:
        fh.write("q,generation,delta,scale_dimension\n")
        for q, g, delta, dq in rows:
            fh.write(f"{q:.17g},{g},{delta:.17g},{dq:.17g}\n")


def write_dimension_table(path, estimates) -> None:
    """CSV rows (q, dimension, slope, stderr, r_squared)."""
    with open(path, "w", newline="\n") as fh:
        fh.write("q,dimension,slope,stderr,r_squared\n")
        for e in estimates:
            fh.write(f"{e.q:.17g},{e.dimension:.17g},{e.slope:.17g},"
                     f"{e.stderr:.17g},{e.r_squared:.17g}\n")


def write_exponent_table(path, named_fits) -> None:
    """CSV rows (exponent, value, stderr, theory)."""
    with open(path, "w", newline="\n") as fh:
        fh.write("exponent,value,stderr,theory\n")
        for name, fit in named_fits:
            th = "" if fit.theory is None else f"{fit.theory:.17g}"
            fh.write(f"{name},{fit.value:.17g},{fit.stderr:.17g},{th}\n")


def write_run_summary(path, metadata: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
