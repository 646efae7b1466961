"""Branched labyrinths in a cubic cell grid and their diffusion-weighted
signals.

A cube of n^3 unit cells carries open/closed flags on every internal
face; the outer boundary is always closed (reflecting).  Three structure
kinds share the same closed-face count and hence the same
surface-to-volume ratio: a randomized dichotomic spanning tree (branched
architecture), a serpentine channel visiting every cell once, and a
disordered medium whose open faces form a uniform random subset (no
connectivity guarantee).  Wall destruction opens a random fraction of
the remaining closed internal faces, creating loops.

Walkers take Gaussian off-lattice steps with specular reflection on
closed faces and accumulate per-axis phase integrals for a unit
gradient; signals are assembled from those phases for any gradient
strength, either along a fixed direction or direction-averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ValidationError
from .spectral import TemporalProfile

STRUCTURE_KINDS = ("dichotomic_tree", "long_channel", "disordered")


@dataclass(frozen=True)
class LabyrinthDomain:
    """Grid labyrinth: open/closed flags on the internal faces.

    ``open_x[i, j, k]`` is the face between cells (i-1, j, k) and
    (i, j, k); planes 0 and n are the outer boundary and stay closed.
    """

    n_cells: int
    cell_edge: float
    open_x: np.ndarray
    open_y: np.ndarray
    open_z: np.ndarray
    entry: tuple
    kind: str
    destruction: float = 0.0
    rng_seed: int = 0

    @property
    def edge_length(self) -> float:
        return self.n_cells * self.cell_edge

    @property
    def internal_face_count(self) -> int:
        n = self.n_cells
        return 3 * (n - 1) * n * n

    def open_face_count(self) -> int:
        n = self.n_cells
        return (int(self.open_x[1:n].sum()) + int(self.open_y[:, 1:n].sum())
                + int(self.open_z[:, :, 1:n].sum()))

    def surface_to_volume(self) -> float:
        """Wall area (both sides of closed internal faces plus the outer
        boundary) over the cell volume."""
        n = self.n_cells
        a = self.cell_edge
        closed_internal = self.internal_face_count - self.open_face_count()
        area = (2 * closed_internal + 6 * n * n) * a * a
        return area / (n * a) ** 3

    def components(self) -> np.ndarray:
        """Connected-component label per cell under the open-face graph."""
        n = self.n_cells
        labels = -np.ones((n, n, n), dtype=int)
        comp = 0
        for sx in range(n):
            for sy in range(n):
                for sz in range(n):
                    if labels[sx, sy, sz] >= 0:
                        continue
                    stack = [(sx, sy, sz)]
                    labels[sx, sy, sz] = comp
                    while stack:
                        x, y, z = stack.pop()
                        for dx, dy, dz, arr, idx in (
                                (-1, 0, 0, self.open_x, (x, y, z)),
                                (1, 0, 0, self.open_x, (x + 1, y, z)),
                                (0, -1, 0, self.open_y, (x, y, z)),
                                (0, 1, 0, self.open_y, (x, y + 1, z)),
                                (0, 0, -1, self.open_z, (x, y, z)),
                                (0, 0, 1, self.open_z, (x, y, z + 1))):
                            nx, ny, nz = x + dx, y + dy, z + dz
                            if not (0 <= nx < n and 0 <= ny < n and 0 <= nz < n):
                                continue
                            if arr[idx] and labels[nx, ny, nz] < 0:
                                labels[nx, ny, nz] = comp
                                stack.append((nx, ny, nz))
                    comp += 1
        return labels


def _empty_faces(n: int):
    ox = np.zeros((n + 1, n, n), dtype=bool)
    oy = np.zeros((n, n + 1, n), dtype=bool)
    oz = np.zeros((n, n, n + 1), dtype=bool)
    return ox, oy, oz


_NEIGHBORS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _open_between(ox, oy, oz, a, b):
    (x1, y1, z1), (x2, y2, z2) = a, b
    if x1 != x2:
        ox[max(x1, x2), y1, z1] = True
    elif y1 != y2:
        oy[x1, max(y1, y2), z1] = True
    else:
        oz[x1, y1, max(z1, z2)] = True


def generate_labyrinth(kind: str, n_cells: int = 6, seed: int = 0,
                       cell_edge: float | None = None) -> LabyrinthDomain:
    """Build a labyrinth of the requested structure kind.

    The tree grows by randomized frontier expansion biased to at most two
    children per cell where geometrically possible, so the open-face
    graph is a dichotomic spanning tree.  The channel is a serpentine
    Hamiltonian path (axis order shuffled by the seed).  The disordered
    kind opens a uniform random subset of internal faces of the same
    size as a spanning tree, which pins the surface-to-volume ratio to
    the other two kinds without guaranteeing connectivity.
    """
    if kind not in STRUCTURE_KINDS:
        raise ValidationError(f"unknown structure kind {kind!r}")
    if n_cells < 2:
        raise ValidationError("n_cells must be >= 2")
    n = n_cells
    edge = cell_edge if cell_edge is not None else 1.0 / n
    rng = np.random.default_rng(seed)
    ox, oy, oz = _empty_faces(n)
    entry = (0, 0, 0)
    if kind == "dichotomic_tree":
        visited = np.zeros((n, n, n), dtype=bool)
        children = np.zeros((n, n, n), dtype=np.int8)
        visited[entry] = True
        frontier = [entry]
        remaining = n ** 3 - 1
        while remaining > 0:
            open_slots = [c for c in frontier if children[c] < 2]
            pool = open_slots if open_slots else frontier
            c = pool[rng.integers(len(pool))]
            nbrs = []
            for d in _NEIGHBORS:
                q = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
                if 0 <= q[0] < n and 0 <= q[1] < n and 0 <= q[2] < n \
                        and not visited[q]:
                    nbrs.append(q)
            if not nbrs:
                frontier.remove(c)
                continue
            q = nbrs[rng.integers(len(nbrs))]
            _open_between(ox, oy, oz, c, q)
            visited[q] = True
            children[c] += 1
            frontier.append(q)
            remaining -= 1
    elif kind == "long_channel":
        axes = list(rng.permutation(3))
        path = []
        for k in range(n):
            for j in range(n):
                jj = j if k % 2 == 0 else n - 1 - j
                for i in range(n):
                    ii = i if jj % 2 == (0 if k % 2 == 0 else 1) else n - 1 - i
                    cell = [0, 0, 0]
                    cell[axes[0]] = ii
                    cell[axes[1]] = jj
                    cell[axes[2]] = k
                    path.append(tuple(cell))
        entry = path[0]
        for a, b in zip(path[:-1], path[1:]):
            _open_between(ox, oy, oz, a, b)
    else:
        target = n ** 3 - 1
        faces = []
        for i in range(1, n):
            for j in range(n):
                for k in range(n):
                    faces.append(("x", i, j, k))
                    faces.append(("y", j, i, k))
                    faces.append(("z", j, k, i))
        pick = rng.choice(len(faces), size=target, replace=False)
        for fi in pick:
            ax, i, j, k = faces[fi]
            if ax == "x":
                ox[i, j, k] = True
            elif ax == "y":
                oy[i, j, k] = True
            else:
                oz[i, j, k] = True
    ox.flags.writeable = False
    oy.flags.writeable = False
    oz.flags.writeable = False
    return LabyrinthDomain(n, edge, ox, oy, oz, entry, kind, 0.0, seed)


def destroy_walls(domain: LabyrinthDomain, fraction: float,
                  seed: int = 0) -> LabyrinthDomain:
    """Open a uniformly random ``fraction`` of the closed internal faces."""
    if not (0.0 <= fraction <= 1.0):
        raise ValidationError("destruction fraction must lie in [0, 1]")
    n = domain.n_cells
    ox = domain.open_x.copy()
    oy = domain.open_y.copy()
    oz = domain.open_z.copy()
    closed = []
    for i in range(1, n):
        for j in range(n):
            for k in range(n):
                if not ox[i, j, k]:
                    closed.append(("x", i, j, k))
                if not oy[j, i, k]:
                    closed.append(("y", j, i, k))
                if not oz[j, k, i]:
                    closed.append(("z", j, k, i))
    count = int(round(fraction * len(closed)))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(closed), size=count, replace=False) if count else []
    for fi in pick:
        ax, i, j, k = closed[fi]
        if ax == "x":
            ox[i, j, k] = True
        elif ax == "y":
            oy[i, j, k] = True
        else:
            oz[i, j, k] = True
    for arr in (ox, oy, oz):
        arr.flags.writeable = False
    return LabyrinthDomain(n, domain.cell_edge, ox, oy, oz, domain.entry,
                           domain.kind, fraction, domain.rng_seed)


def default_step_count(domain: LabyrinthDomain, diffusion: float,
                       duration: float, resolution: float = 20.0) -> int:
    """Steps so one Gaussian step spans cell_edge / resolution."""
    tau = (domain.cell_edge / resolution) ** 2 / (2.0 * diffusion)
    return max(int(math.ceil(duration / tau)), 2)


def walk_phases(domain: LabyrinthDomain, profile: TemporalProfile,
                diffusion: float, duration: float, n_steps: int,
                n_walkers: int, seed: int, workers: int = 1):
    """Per-walker phase integrals (phi_x, phi_y, phi_z) for unit gradient.

    Raises when the step length violates the cell-resolution bound
    (sqrt(2 D tau) must stay below a tenth of the cell edge).
    """
    if n_walkers < 1 or n_steps < 2:
        raise ValidationError("need n_walkers >= 1 and n_steps >= 2")
    tau = duration / n_steps
    if math.sqrt(2.0 * diffusion * tau) >= domain.cell_edge / 10.0:
        raise ValidationError(
            "step too coarse: sqrt(2 D tau) must stay below cell_edge/10")
    f_arr = profile.rescaled(duration)(np.arange(n_steps) * tau)
    phases = np.empty((n_walkers, 3))
    nch = int(min(max(4 * workers, 1), 64, n_walkers))
    rejected = np.zeros(nch, dtype=np.int64)
    K.labyrinth_phases(n_walkers, np.uint64(seed), domain.n_cells,
                       domain.cell_edge, domain.open_x, domain.open_y,
                       domain.open_z, tau, np.ascontiguousarray(f_arr),
                       phases, rejected)
    reject_total = int(rejected.sum())
    if reject_total > max(1e-9 * n_walkers * n_steps, 2):
        raise ValidationError(
            f"{reject_total} steps exceeded the reflection budget")
    return phases


def directional_signal(phases: np.ndarray, gamma_g: float, direction) -> tuple:
    """Complex signal mean exp(i gamma g phi_e) with its standard error."""
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    phi = phases @ e
    z = np.exp(1j * gamma_g * phi)
    n = phi.size
    mean = complex(z.mean())
    se = float(np.sqrt((np.abs(z - mean) ** 2).mean() / n))
    return mean, se


def averaged_signal(phases: np.ndarray, gamma_g: float) -> tuple[float, float]:
    """Direction-averaged signal: mean sinc(gamma g |phi|), with its
    standard error (exact average of the plane wave over directions)."""
    if gamma_g == 0.0:
        return 1.0, 0.0
    phi = np.sqrt((phases ** 2).sum(axis=1))
    x = gamma_g * phi
    vals = np.ones_like(x)
    nz = x != 0
    vals[nz] = np.sin(x[nz]) / x[nz]
    n = vals.size
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def simulate_signal(domain: LabyrinthDomain, profile: TemporalProfile,
                    diffusion: float, duration: float, n_steps: int,
                    gradient_values, n_walkers: int, seed: int,
                    direction=None, workers: int = 1):
    """Signal table over gradient strengths.

    Returns a list of rows (gamma_g, value, stderr); ``direction`` picks
    the fixed-direction complex estimator (value = |E|), otherwise the
    direction-averaged sinc estimator.
    """
    phases = walk_phases(domain, profile, diffusion, duration, n_steps,
                         n_walkers, seed, workers)
    rows = []
    for g in gradient_values:
        if direction is None:
            val, se = averaged_signal(phases, float(g))
        else:
            z, se = directional_signal(phases, float(g), direction)
            val = abs(z)
        rows.append((float(g), val, se))
    return rows
