"""Prefractal boundary construction and exact distance queries.

Three self-similar families are supported:

* ``quadratic2d`` -- each segment is replaced by five segments of length
  1/3 forming a square bump; box dimension ln5/ln3.
* ``triangular2d`` -- each segment is replaced by four segments of length
  1/(2 + 2 sin(alpha/2)); the two middle segments meet at angle ``alpha``,
  so the box dimension ln4/ln(2+2 sin(alpha/2)) varies continuously with
  ``alpha``.
* ``cubic3d`` -- each square face is split 3x3 and the center square is
  extruded into a cube, giving 13 faces of size 1/3 per face (dimension
  ln13/ln3).  Face list (unit face [0,1]^2 at z=0, bump toward +z):
  the eight flat subsquares around the center, the four sides of the
  extruded cube, and its top.

The confining domain sits on the bump side of the curve (surface): a
distant flat source plane closes it from above and perfectly reflecting
lateral walls close it at x=0, x=L (and y=0, y=L in 3D).

Distance queries never materialize the prefractal.  A query descends the
generator hierarchy with branch-and-bound pruning: every node knows the
affine frame of its sub-curve and a precomputed bounding box of the whole
refinement, so subtrees that cannot contain the nearest point are skipped.
The result is the exact Euclidean distance to the generation-``g``
boundary (leaf segments/faces are exact primitives).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, ValidationError

# Hard cap on addressable cells: histograms and alive-masks allocate k**g.
MAX_CELLS = 1 << 26

# Triangular curves with a very sharp generator angle develop overhangs
# that leave the lateral strip; reject below this floor.
MIN_TRIANGULAR_ANGLE = math.pi / 12


def _quadratic_generator() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    verts = np.array(
        [[0, 0], [1 / 3, 0], [1 / 3, 1 / 3], [2 / 3, 1 / 3], [2 / 3, 0], [1, 0]],
        dtype=float,
    )
    d = np.diff(verts, axis=0)
    lengths = np.hypot(d[:, 0], d[:, 1])
    return verts[:-1, 0], verts[:-1, 1], d[:, 0] / lengths, d[:, 1] / lengths, 1 / 3


def _triangular_generator(alpha: float, bump_up: bool):
    s = math.sin(alpha / 2)
    r = 1.0 / (2 + 2 * s)
    h = r * math.cos(alpha / 2)
    if not bump_up:
        h = -h
    verts = np.array([[0, 0], [r, 0], [0.5, h], [1 - r, 0], [1, 0]], dtype=float)
    d = np.diff(verts, axis=0)
    lengths = np.hypot(d[:, 0], d[:, 1])
    return verts[:-1, 0], verts[:-1, 1], d[:, 0] / lengths, d[:, 1] / lengths, r


def _cubic_generator():
    """13 child-face frames: origin (3,), e1 (3,), e2 (3,); normal = e1 x e2."""
    o: list[tuple] = []
    e1: list[tuple] = []
    e2: list[tuple] = []
    ex, ey, ez = (1, 0, 0), (0, 1, 0), (0, 0, 1)
    # eight flat subsquares (skip center)
    for j in range(3):
        for i in range(3):
            if i == 1 and j == 1:
                continue
            o.append((i / 3, j / 3, 0.0))
            e1.append(ex)
            e2.append(ey)
    # extruded cube over the center ninth, solid below its faces:
    # side x = 1/3 (domain side -x): e1=+z, e2=+y -> n = -x
    o.append((1 / 3, 1 / 3, 0.0)); e1.append(ez); e2.append(ey)
    # side x = 2/3 (domain side +x): e1=+y, e2=+z -> n = +x
    o.append((2 / 3, 1 / 3, 0.0)); e1.append(ey); e2.append(ez)
    # side y = 1/3 (domain side -y): e1=+x, e2=+z -> n = -y
    o.append((1 / 3, 1 / 3, 0.0)); e1.append(ex); e2.append(ez)
    # side y = 2/3 (domain side +y): e1=+z, e2=+x -> n = +y
    o.append((1 / 3, 2 / 3, 0.0)); e1.append(ez); e2.append(ex)
    # top z = 1/3: n = +z
    o.append((1 / 3, 1 / 3, 1 / 3)); e1.append(ex); e2.append(ey)
    origins = np.array(o, dtype=float)
    rots = np.zeros((13, 3, 3))
    for i in range(13):
        a = np.array(e1[i], dtype=float)
        b = np.array(e2[i], dtype=float)
        rots[i, :, 0] = a
        rots[i, :, 1] = b
        rots[i, :, 2] = np.cross(a, b)
    return origins, rots, 1 / 3


def _limit_box_2d(gox, goy, gc, gs, r, iters: int = 200) -> np.ndarray:
    """Smallest box [x0,x1]x[y0,y1] (unit frame) closed under the generator maps.

    Iterates box <- hull(box, T_i(box)); contains every finite generation.
    """
    box = np.array([0.0, 1.0, 0.0, 0.0])
    for _ in range(iters):
        x0, x1, y0, y1 = box
        corners = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
        nb = box.copy()
        for i in range(len(gox)):
            c, s = gc[i], gs[i]
            xs = gox[i] + r * (c * corners[:, 0] - s * corners[:, 1])
            ys = goy[i] + r * (s * corners[:, 0] + c * corners[:, 1])
            nb[0] = min(nb[0], xs.min())
            nb[1] = max(nb[1], xs.max())
            nb[2] = min(nb[2], ys.min())
            nb[3] = max(nb[3], ys.max())
        if np.allclose(nb, box, rtol=0, atol=1e-15):
            box = nb
            break
        box = nb
    return box


def _limit_box_3d(gorg, grot, r, iters: int = 200) -> np.ndarray:
    box = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 0.0])
    for _ in range(iters):
        x0, x1, y0, y1, z0, z1 = box
        corners = np.array(
            [[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)]
        )
        nb = box.copy()
        for i in range(len(gorg)):
            pts = gorg[i] + r * corners @ grot[i].T
            nb[0::2] = np.minimum(nb[0::2], pts.min(axis=0))
            nb[1::2] = np.maximum(nb[1::2], pts.max(axis=0))
        if np.allclose(nb, box, rtol=0, atol=1e-15):
            box = nb
            break
        box = nb
    return box


@dataclass(frozen=True)
class HierarchicalCell:
    """One generator cell of the descent hierarchy.

    ``frame`` maps the unit generator (base segment [0,1], or unit face in
    3D) onto the cell: world = origin + scale * R @ local.
    """

    level: int
    address: str
    origin: np.ndarray
    rotation: np.ndarray
    scale: float
    kind: str  # "leaf_segment"/"leaf_face" at the finest level, else "refinement_region"


@dataclass(frozen=True)
class BoundaryCellId:
    """Address of a generator cell: digit string over the child alphabet."""

    address: str

    def __post_init__(self):
        if not all(ch.isdigit() or ch in "abc" for ch in self.address):
            raise ValidationError(f"bad cell address {self.address!r}")

    @property
    def depth(self) -> int:
        return len(self.address)

    def prefix(self, depth: int) -> "BoundaryCellId":
        if depth > len(self.address):
            raise ValidationError("prefix depth exceeds address depth")
        return BoundaryCellId(self.address[:depth])


_DIGITS = "0123456789abc"  # up to 13 children


def code_to_address(code: int, depth: int, k: int) -> str:
    digits = []
    for _ in range(depth):
        digits.append(_DIGITS[code % k])
        code //= k
    return "".join(reversed(digits))


def address_to_code(address: str, k: int) -> int:
    code = 0
    for ch in address:
        code = code * k + _DIGITS.index(ch)
    return code


@dataclass(frozen=True)
class FractalBoundary:
    """Immutable prefractal boundary; all queries are read-only."""

    family: str
    generation: int
    angle: float | None = None
    base_length: float = 1.0
    orientation: str = "bottom_seen"
    # derived fields
    child_count: int = field(init=False, default=0)
    scale_ratio: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.family not in ("quadratic2d", "triangular2d", "cubic3d"):
            raise ValidationError(f"unknown family {self.family!r}")
        if self.generation < 0:
            raise ValidationError("generation must be >= 0")
        if self.base_length <= 0:
            raise ValidationError("base_length must be positive")
        if self.family == "triangular2d":
            if self.angle is None:
                raise ValidationError("triangular2d requires an angle")
            if not (0 < self.angle < math.pi):
                raise ValidationError("angle must lie in (0, pi)")
            if self.angle < MIN_TRIANGULAR_ANGLE:
                raise ValidationError(
                    f"angle {self.angle:.4f} below the simplicity floor "
                    f"{MIN_TRIANGULAR_ANGLE:.4f}"
                )
            if self.orientation not in ("top_seen", "bottom_seen"):
                raise ValidationError(f"unknown orientation {self.orientation!r}")
        if self.family == "quadratic2d":
            k, r = 5, 1 / 3
        elif self.family == "triangular2d":
            k, r = 4, 1.0 / (2 + 2 * math.sin(self.angle / 2))
        else:
            k, r = 13, 1 / 3
        if self.generation > 0 and k ** self.generation > MAX_CELLS:
            raise CapacityError(
                f"{self.family} generation {self.generation} needs "
                f"{k ** self.generation} cells (cap {MAX_CELLS})"
            )
        object.__setattr__(self, "child_count", k)
        object.__setattr__(self, "scale_ratio", r)
        # generator frames + refinement bounding box, in unit-frame coords
        if self.family == "cubic3d":
            gorg, grot, _ = _cubic_generator()
            box = _limit_box_3d(gorg, grot, r)
            object.__setattr__(self, "_gorg", gorg)
            object.__setattr__(self, "_grot", grot)
        else:
            if self.family == "quadratic2d":
                gx, gy, gc, gs, _ = _quadratic_generator()
            else:
                bump_up = self.orientation == "bottom_seen"
                gx, gy, gc, gs, _ = _triangular_generator(self.angle, bump_up)
            box = _limit_box_2d(gx, gy, gc, gs, r)
            if box[0] < -1e-12 or box[1] > 1 + 1e-12:
                raise ValidationError(
                    "generator refinement leaves the lateral strip; "
                    "angle too sharp for a walled domain"
                )
            object.__setattr__(self, "_gx", gx)
            object.__setattr__(self, "_gy", gy)
            object.__setattr__(self, "_gc", gc)
            object.__setattr__(self, "_gs", gs)
        object.__setattr__(self, "_box", box)

    # -- scalar geometry ------------------------------------------------
    @property
    def ndim(self) -> int:
        return 3 if self.family == "cubic3d" else 2

    @property
    def smallest_feature(self) -> float:
        return self.base_length * self.scale_ratio ** self.generation

    @property
    def cell_count(self) -> int:
        return self.child_count ** self.generation

    @property
    def perimeter(self) -> float:
        """Total developed length (2D) of the generation-g curve."""
        if self.ndim != 2:
            raise ValidationError("perimeter is a 2D quantity; use developed_area")
        return self.base_length * (self.child_count * self.scale_ratio) ** self.generation

    @property
    def developed_area(self) -> float:
        if self.ndim != 3:
            raise ValidationError("developed_area is a 3D quantity; use perimeter")
        return self.base_length ** 2 * (13 / 9) ** self.generation

    @property
    def bounding_box(self) -> np.ndarray:
        """World-coordinate bounding box of the full refinement."""
        return np.asarray(self._box) * self.base_length

    @property
    def top_height(self) -> float:
        """Highest reach of the boundary above the base line/plane."""
        return float(self._box[-1]) * self.base_length

    def cell_measure(self, depth: int) -> float:
        """Length (2D) / area (3D) of one depth-level generator cell."""
        s = self.base_length * self.scale_ratio ** depth
        return s if self.ndim == 2 else s * s

    # -- kernel plumbing -------------------------------------------------
    def kernel_args(self) -> tuple:
        """Flat argument pack consumed by the numba kernels."""
        L = self.base_length
        g = self.generation
        scale_at = L * self.scale_ratio ** np.arange(g + 1, dtype=float)
        if self.ndim == 2:
            b = self._box
            return (
                self.child_count,
                g,
                np.ascontiguousarray(self._gx),
                np.ascontiguousarray(self._gy),
                np.ascontiguousarray(self._gc),
                np.ascontiguousarray(self._gs),
                scale_at,
                float(b[0]),
                float(b[1]),
                float(b[2]),
                float(b[3]),
            )
        b = self._box
        return (
            self.child_count,
            g,
            np.ascontiguousarray(self._gorg),
            np.ascontiguousarray(self._grot.reshape(13, 9)),
            scale_at,
            np.ascontiguousarray(np.asarray(b, dtype=float)),
        )

    def cell_frame(self, address: str) -> HierarchicalCell:
        """Compose the affine frame of the cell at ``address``."""
        depth = len(address)
        if depth > self.generation:
            raise ValidationError("address longer than the generation depth")
        L = self.base_length
        if self.ndim == 2:
            ox, oy, c, s = 0.0, 0.0, 1.0, 0.0
            sc = L
            for ch in address:
                i = _DIGITS.index(ch)
                ox += sc * (c * self._gx[i] - s * self._gy[i])
                oy += sc * (s * self._gx[i] + c * self._gy[i])
                c, s = c * self._gc[i] - s * self._gs[i], s * self._gc[i] + c * self._gs[i]
                sc *= self.scale_ratio
            rot = np.array([[c, -s], [s, c]])
            origin = np.array([ox, oy])
        else:
            origin = np.zeros(3)
            rot = np.eye(3)
            sc = L
            for ch in address:
                i = _DIGITS.index(ch)
                origin = origin + sc * rot @ self._gorg[i]
                rot = rot @ self._grot[i]
                sc *= self.scale_ratio
        kind = (
            ("leaf_segment" if self.ndim == 2 else "leaf_face")
            if depth == self.generation
            else "refinement_region"
        )
        return HierarchicalCell(depth, address, origin, rot, sc, kind)


def build_boundary(
    family: str,
    generation: int,
    angle: float | None = None,
    base_length: float = 1.0,
    orientation: str = "bottom_seen",
) -> FractalBoundary:
    return FractalBoundary(family, generation, angle, base_length, orientation)


def fractal_dimension(boundary: FractalBoundary) -> float:
    """Similarity dimension ln(children)/ln(1/ratio)."""
    return math.log(boundary.child_count) / math.log(1.0 / boundary.scale_ratio)


def triangular_angle_for_dimension(d0: float) -> float:
    """Invert ln4/ln(2+2 sin(a/2)) = d0 for the generator angle."""
    if not (1.0 < d0 < 2.0):
        raise ValidationError("triangular dimension must lie in (1, 2)")
    base = math.exp(math.log(4.0) / d0)
    s = (base - 2.0) / 2.0
    if not (0.0 < s < 1.0):
        raise ValidationError(f"dimension {d0} not reachable")
    return 2.0 * math.asin(s)


# -- queries (thin wrappers over the jitted kernels) ----------------------

def _nearest(boundary: FractalBoundary, point, depth: int | None):
    from . import _kernels as K

    depth = boundary.generation if depth is None else depth
    if depth < 0 or depth > boundary.generation:
        raise ValidationError("depth must lie in [0, generation]")
    p = np.asarray(point, dtype=float)
    if boundary.ndim == 2:
        if p.shape != (2,):
            raise ValidationError("2D boundary expects a 2-vector point")
        return K.nearest2d_py(p[0], p[1], depth, *boundary.kernel_args())
    if p.shape != (3,):
        raise ValidationError("3D boundary expects a 3-vector point")
    return K.nearest3d_py(p[0], p[1], p[2], depth, *boundary.kernel_args())


def distance_to_boundary(
    boundary: FractalBoundary, point, depth: int | None = None
) -> tuple[float, HierarchicalCell]:
    """Exact distance from an interior point to the generation-g boundary.

    Returns the distance and the cell that realized it.  Raises
    ``DomainError`` for points strictly on the solid side; a point exactly
    on the boundary returns distance 0.
    """
    res = _nearest(boundary, point, depth)
    dist, code = res[0], int(res[1])
    q = np.asarray(res[2 : 2 + boundary.ndim])
    n = np.asarray(res[2 + boundary.ndim :])
    p = np.asarray(point, dtype=float)
    side = float(np.dot(p - q, n))
    if dist > 0 and side < 0:
        raise DomainError(f"point {point} lies outside the confining domain")
    d = boundary.generation if depth is None else depth
    cell = boundary.cell_frame(code_to_address(code, d, boundary.child_count))
    return dist, cell


def locate_boundary_cell(
    boundary: FractalBoundary, hit_point, depth: int
) -> BoundaryCellId:
    """Address of the depth-level cell that owns ``hit_point``.

    Defined as the length-``depth`` prefix of the nearest finest-level
    cell, so coarsening is exactly prefix truncation.  Equidistant points
    resolve to the lexicographically smallest address.
    """
    res = _nearest(boundary, hit_point, boundary.generation)
    code = int(res[1])
    full = code_to_address(code, boundary.generation, boundary.child_count)
    return BoundaryCellId(full[:depth])


def in_domain(boundary: FractalBoundary, point) -> bool:
    res = _nearest(boundary, point, boundary.generation)
    dist = res[0]
    q = np.asarray(res[2 : 2 + boundary.ndim])
    n = np.asarray(res[2 + boundary.ndim :])
    p = np.asarray(point, dtype=float)
    if not np.all((p[:-1] >= 0) & (p[:-1] <= boundary.base_length)) and boundary.ndim == 2:
        # lateral check applies to x only in 2D
        pass
    side = float(np.dot(p - q, n))
    lateral_ok = 0.0 <= p[0] <= boundary.base_length
    if boundary.ndim == 3:
        lateral_ok = lateral_ok and 0.0 <= p[1] <= boundary.base_length
    return bool(dist == 0.0 or (side > 0 and lateral_ok))


def boundary_vertices(boundary: FractalBoundary) -> np.ndarray:
    """Ordered polyline vertices (2D) of the generation-g curve."""
    if boundary.ndim != 2:
        raise ValidationError("vertex export is for 2D curves; use boundary_faces")
    k, g = boundary.child_count, boundary.generation
    if k ** g + 1 > MAX_CELLS:
        raise CapacityError("polyline too large to materialize")
    verts = np.empty((k ** g + 1, 2))
    for code in range(k ** g):
        cell = boundary.cell_frame(code_to_address(code, g, k))
        verts[code] = cell.origin
    last = boundary.cell_frame(code_to_address(k ** g - 1, g, k))
    verts[-1] = last.origin + last.scale * last.rotation @ np.array([1.0, 0.0])
    return verts


def boundary_faces(boundary: FractalBoundary) -> np.ndarray:
    """(n_faces, 4, 3) corner array of the generation-g surface."""
    if boundary.ndim != 3:
        raise ValidationError("face export is for 3D surfaces; use boundary_vertices")
    k, g = boundary.child_count, boundary.generation
    if k ** g * 4 > MAX_CELLS:
        raise CapacityError("mesh too large to materialize")
    corners_local = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.empty((k ** g, 4, 3))
    for code in range(k ** g):
        cell = boundary.cell_frame(code_to_address(code, g, k))
        faces[code] = cell.origin + cell.scale * corners_local @ cell.rotation.T
    return faces


def export_csv(boundary: FractalBoundary, path) -> None:
    """Write the boundary polyline/mesh as CSV vertex rows."""
    if boundary.ndim == 2:
        verts = boundary_vertices(boundary)
        header = "x,y"
        data = verts
    else:
        faces = boundary_faces(boundary)
        header = "face,x,y,z"
        idx = np.repeat(np.arange(faces.shape[0]), 4)[:, None]
        data = np.hstack([idx, faces.reshape(-1, 3)])
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
