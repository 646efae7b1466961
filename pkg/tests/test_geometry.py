import math

import numpy as np
import pytest

from confdiff import _kernels as K
from confdiff.errors import CapacityError, DomainError, ValidationError
from confdiff.geometry import (
    boundary_faces,
    boundary_vertices,
    build_boundary,
    distance_to_boundary,
    export_csv,
    fractal_dimension,
    in_domain,
    locate_boundary_cell,
    triangular_angle_for_dimension,
)

RNG = np.random.default_rng(20240817)


def brute_force_distance(verts, p):
    a, b = verts[:-1], verts[1:]
    d = b - a
    t = np.clip(((p - a) * d).sum(1) / (d * d).sum(1), 0.0, 1.0)
    q = a + t[:, None] * d
    dist = np.sqrt(((p - q) ** 2).sum(1))
    return dist.min(), int(dist.argmin())


class TestConstruction:
    def test_generation_zero_is_single_segment(self):
        b = build_boundary("quadratic2d", 0)
        assert b.cell_count == 1
        assert b.perimeter == pytest.approx(1.0)

    def test_segment_counts(self):
        assert build_boundary("quadratic2d", 3).cell_count == 5 ** 3
        assert build_boundary("triangular2d", 3, math.pi / 3).cell_count == 4 ** 3
        assert build_boundary("cubic3d", 2).cell_count == 13 ** 2

    def test_quadratic_perimeter_value(self):
        # (5/3)^4 ~ 7.716 developed lengths per unit width
        b = build_boundary("quadratic2d", 4)
        assert b.perimeter == pytest.approx((5 / 3) ** 4)
        assert b.perimeter == pytest.approx(7.716, abs=5e-4)

    def test_perimeter_recursion(self):
        for g in range(5):
            p0 = build_boundary("quadratic2d", g).perimeter
            p1 = build_boundary("quadratic2d", g + 1).perimeter
            assert p1 / p0 == pytest.approx(5 / 3, rel=1e-14)

    def test_cubic_developed_area(self):
        b = build_boundary("cubic3d", 5)
        assert b.developed_area == pytest.approx((13 / 9) ** 5)
        assert b.developed_area == pytest.approx(6.3, abs=0.05)

    def test_dimensions(self):
        assert fractal_dimension(build_boundary("quadratic2d", 2)) == \
            pytest.approx(math.log(5) / math.log(3))
        assert fractal_dimension(build_boundary("cubic3d", 1)) == \
            pytest.approx(math.log(13) / math.log(3))
        tri = build_boundary("triangular2d", 2, math.pi / 3)
        assert fractal_dimension(tri) == pytest.approx(math.log(4) / math.log(3))

    def test_angle_inversion_roundtrip(self):
        a = triangular_angle_for_dimension(1.699)
        b = build_boundary("triangular2d", 2, a)
        assert fractal_dimension(b) == pytest.approx(1.699, abs=1e-12)

    def test_smallest_feature(self):
        b = build_boundary("triangular2d", 3, math.pi / 3)
        assert b.smallest_feature == pytest.approx(3.0 ** -3)

    def test_validation(self):
        with pytest.raises(ValidationError):
            build_boundary("hexagonal", 2)
        with pytest.raises(ValidationError):
            build_boundary("triangular2d", 2)  # angle required
        with pytest.raises(ValidationError):
            build_boundary("triangular2d", 2, 0.1)  # below the floor
        with pytest.raises(CapacityError):
            build_boundary("quadratic2d", 15)


class TestDistance:
    @pytest.mark.parametrize("family,angle", [
        ("quadratic2d", None),
        ("triangular2d", math.pi / 3),
        ("triangular2d", 0.2622),
    ])
    @pytest.mark.parametrize("g", [0, 1, 2, 3, 4])
    def test_matches_exhaustive_segment_scan(self, family, angle, g):
        b = build_boundary(family, g, angle)
        verts = boundary_vertices(b)
        args = b.kernel_args()
        for _ in range(250):
            p = RNG.uniform([0.0, -0.1], [1.0, 1.4])
            res = K.nearest2d_py(p[0], p[1], g, *args)
            dref, _ = brute_force_distance(verts, p)
            assert abs(res[0] - dref) < 1e-12

    def test_flat_segment_height(self):
        b = build_boundary("quadratic2d", 0)
        d, cell = distance_to_boundary(b, (0.4, 0.37))
        assert d == pytest.approx(0.37)
        assert cell.kind == "leaf_segment"

    def test_point_on_boundary_returns_zero(self):
        b = build_boundary("quadratic2d", 2)
        d, _ = distance_to_boundary(b, (1 / 3, 1 / 3))
        assert d == 0.0

    def test_outside_raises(self):
        b = build_boundary("quadratic2d", 1)
        with pytest.raises(DomainError):
            distance_to_boundary(b, (0.5, 0.1))  # inside the bump solid

    def test_monotone_refinement(self):
        # a coarser view never places the boundary more than one feature
        # size closer than the true refinement
        b = build_boundary("quadratic2d", 4)
        for _ in range(200):
            p = RNG.uniform([0.0, 0.55], [1.0, 1.5])
            dg, _ = distance_to_boundary(b, p)
            for j in range(4):
                dj, _ = distance_to_boundary(b, p, depth=j)
                assert dj >= dg - b.base_length * b.scale_ratio ** j - 1e-12

    def test_3d_matches_exhaustive_face_scan(self):
        for g in (0, 1, 2):
            b = build_boundary("cubic3d", g)
            faces = boundary_faces(b)
            origins = faces[:, 0, :]
            e1 = faces[:, 1, :] - faces[:, 0, :]
            e2 = faces[:, 3, :] - faces[:, 0, :]
            s = np.linalg.norm(e1[0])
            args = b.kernel_args()
            for _ in range(60):
                p = RNG.uniform([0, 0, 0.45], [1, 1, 1.3])
                rel = p - origins
                u = np.clip((rel * e1).sum(1) / s ** 2, 0, 1)
                v = np.clip((rel * e2).sum(1) / s ** 2, 0, 1)
                q = origins + u[:, None] * e1 + v[:, None] * e2
                dref = np.sqrt(((p - q) ** 2).sum(1)).min()
                res = K.nearest3d_py(p[0], p[1], p[2], g, *args)
                assert abs(res[0] - dref) < 1e-12


class TestAddresses:
    def test_midpoint_hits_own_segment(self):
        b = build_boundary("quadratic2d", 2)
        cell = b.cell_frame("21")
        mid = cell.origin + cell.scale * cell.rotation @ np.array([0.5, 0.0])
        assert locate_boundary_cell(b, mid, 2).address == "21"

    def test_depth_zero_is_root(self):
        b = build_boundary("quadratic2d", 3)
        assert locate_boundary_cell(b, (0.5, 0.45), 0).address == ""

    def test_prefix_consistency(self):
        b = build_boundary("quadratic2d", 4)
        for _ in range(150):
            p = RNG.uniform([0.0, 0.0], [1.0, 0.6])
            if not in_domain(b, p):
                continue
            full = locate_boundary_cell(b, p, 4)
            for j in range(5):
                assert locate_boundary_cell(b, p, j).address == \
                    full.address[:j]

    def test_brute_force_nearest_agreement(self):
        # sample near-boundary points (where hits actually land); bulk
        # points frequently tie exactly at shared vertices, so ties are
        # excused when the exhaustive scan itself reports a dead heat
        from confdiff.geometry import code_to_address

        b = build_boundary("quadratic2d", 3)
        verts = boundary_vertices(b)
        a, bb = verts[:-1], verts[1:]
        d = bb - a
        mismatches = 0
        for _ in range(300):
            leaf = RNG.integers(5 ** 3)
            tpar = RNG.uniform(0.05, 0.95)
            p = a[leaf] + tpar * d[leaf]
            n = np.array([-d[leaf][1], d[leaf][0]]) / np.linalg.norm(d[leaf])
            p = p + n * 1e-6
            t = np.clip(((p - a) * d).sum(1) / (d * d).sum(1), 0, 1)
            q = a + t[:, None] * d
            dist = np.sqrt(((p - q) ** 2).sum(1))
            iref = int(dist.argmin())
            got = locate_boundary_cell(b, p, 3)
            if got.address != code_to_address(iref, 3, 5):
                gap = np.sort(dist)[1] - np.sort(dist)[0]
                if gap > 1e-12:
                    mismatches += 1
        assert mismatches == 0

    def test_ambiguous_points_resolve_deterministically(self):
        from confdiff.geometry import code_to_address

        b = build_boundary("quadratic2d", 2)
        verts = boundary_vertices(b)
        a, bb = verts[:-1], verts[1:]
        d = bb - a
        for _ in range(200):
            p = RNG.uniform([0.0, 0.0], [1.0, 0.9])
            if not in_domain(b, p):
                continue
            first = locate_boundary_cell(b, p, 2)
            again = locate_boundary_cell(b, p, 2)
            assert first.address == again.address
            # when the exhaustive scan reports a dead heat, the returned
            # cell must be one of the tied candidates
            t = np.clip(((p - a) * d).sum(1) / (d * d).sum(1), 0, 1)
            q = a + t[:, None] * d
            dist = np.sqrt(((p - q) ** 2).sum(1))
            tied = np.where(dist <= dist.min() + 1e-12)[0]
            assert first.address in {code_to_address(int(i), 2, 5)
                                     for i in tied}


class TestExport:
    def test_polyline_csv(self, tmp_path):
        b = build_boundary("quadratic2d", 2)
        path = tmp_path / "curve.csv"
        export_csv(b, path)
        rows = path.read_text().strip().split("\n")
        assert rows[0] == "x,y"
        assert len(rows) == 5 ** 2 + 2  # header + vertices
        first = [float(v) for v in rows[1].split(",")]
        last = [float(v) for v in rows[-1].split(",")]
        assert first == [0.0, 0.0]
        assert last == [1.0, 0.0]

    def test_mesh_csv(self, tmp_path):
        b = build_boundary("cubic3d", 1)
        path = tmp_path / "mesh.csv"
        export_csv(b, path)
        rows = path.read_text().strip().split("\n")
        assert rows[0] == "face,x,y,z"
        assert len(rows) == 13 * 4 + 1
