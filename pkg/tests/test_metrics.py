import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roomdiff.geometry import TriangleMesh, icosphere
from roomdiff.metrics import (
    NearestTriangleIndex,
    NormalErrorReport,
    mesh_quality_summary,
    normal_error,
    sample_surface,
    triangle_metrics,
)


EQUILATERAL = (np.array([0.0, 0, 0]), np.array([1.0, 0, 0]),
               np.array([0.5, np.sqrt(3) / 2, 0]))
RIGHT_ISOCELES = (np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))


def plane_mesh(z=0.0, tilt=0.0, n=4, flip=False):
    """Triangulated square plane, optionally tilted about the y axis."""
    xs = np.linspace(0, 1, n)
    vv, tt = [], []
    for i, x in enumerate(xs):
        for y in xs:
            vv.append([x, y, z + np.tan(tilt) * x])
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = (i + 1) * n + j
            tri1 = [a, b, a + 1]
            tri2 = [b, b + 1, a + 1]
            if flip:
                tri1 = tri1[::-1]
                tri2 = tri2[::-1]
            tt.append(tri1)
            tt.append(tri2)
    return TriangleMesh(np.array(vv, dtype=np.float64), np.array(tt, np.int32))


class TestTriangleMetrics:
    def test_equilateral_all_ones(self):
        q = triangle_metrics(*EQUILATERAL)
        np.testing.assert_allclose(q.as_tuple(), (1.0, 1.0, 1.0), atol=1e-9)

    def test_collinear_all_zero(self):
        q = triangle_metrics([0, 0, 0], [1, 1, 1], [2, 2, 2])
        assert q.as_tuple() == (0.0, 0.0, 0.0)

    def test_right_isoceles_closed_forms(self):
        q = triangle_metrics(*RIGHT_ISOCELES)
        # r_in = (2 - sqrt(2))/2, R_circ = sqrt(2)/2
        aspect = 2.0 * ((2 - np.sqrt(2)) / 2) / (np.sqrt(2) / 2)
        circ = 18.0 / (np.sqrt(3) * (2 + np.sqrt(2)) ** 2)
        shape = np.sqrt(3) / 2
        np.testing.assert_allclose(q.aspect_ratio, aspect, atol=1e-9)
        np.testing.assert_allclose(q.circularity, circ, atol=1e-9)
        np.testing.assert_allclose(q.shape_regularity, shape, atol=1e-9)

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=40, deadline=None)
    def test_similarity_invariance(self, seed):
        rng = np.random.default_rng(seed)
        tri = rng.standard_normal((3, 3))
        base = triangle_metrics(*tri)
        # random rotation (QR of a Gaussian matrix), scaling and translation
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        s = float(rng.uniform(0.1, 10.0))
        t = rng.standard_normal(3)
        moved = [s * (q @ p) + t for p in tri]
        out = triangle_metrics(*moved)
        np.testing.assert_allclose(out.as_tuple(), base.as_tuple(), atol=1e-9)

    def test_monotonic_degradation_under_stretch(self):
        prev = triangle_metrics(*EQUILATERAL).as_tuple()
        for stretch in (1.5, 2.5, 4.0):
            a, b, c = (p.copy() for p in EQUILATERAL)
            for p in (a, b, c):
                p[0] *= stretch
            cur = triangle_metrics(a, b, c).as_tuple()
            assert all(x < y for x, y in zip(cur, prev))
            prev = cur


class TestQualitySummary:
    def test_all_equilateral(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0],
                      [2, 0, 0], [3, 0, 0], [2.5, np.sqrt(3) / 2, 0]], dtype=np.float64)
        t = np.array([[0, 1, 2], [3, 4, 5]], np.int32)
        s = mesh_quality_summary(TriangleMesh(v, t))
        for key in ("aspect_ratio", "circularity", "shape_regularity"):
            np.testing.assert_allclose(s[f"{key}_mean"], 1.0, atol=1e-9)
            np.testing.assert_allclose(s[f"{key}_var"], 0.0, atol=1e-12)

    def test_two_triangle_hand_computed(self):
        v = np.vstack([EQUILATERAL, RIGHT_ISOCELES + np.array([3.0, 0, 0])])
        t = np.array([[0, 1, 2], [3, 4, 5]], np.int32)
        s = mesh_quality_summary(TriangleMesh(v, t))
        qe = triangle_metrics(*EQUILATERAL)
        qr = triangle_metrics(*RIGHT_ISOCELES)
        exp_mean = (qe.aspect_ratio + qr.aspect_ratio) / 2
        exp_var = ((qe.aspect_ratio - exp_mean) ** 2 + (qr.aspect_ratio - exp_mean) ** 2) / 2
        np.testing.assert_allclose(s["aspect_ratio_mean"], exp_mean, atol=1e-12)
        np.testing.assert_allclose(s["aspect_ratio_var"], exp_var, atol=1e-12)

    def test_icosphere_beats_perturbed_icosphere(self):
        mesh = icosphere([0, 0, 0], 1.0, subdivisions=2)
        rng = np.random.default_rng(0)
        noisy = TriangleMesh(mesh.vertices + 0.05 * rng.standard_normal(mesh.vertices.shape),
                             mesh.triangles)
        a = mesh_quality_summary(mesh)
        b = mesh_quality_summary(noisy)
        for key in ("aspect_ratio", "circularity", "shape_regularity"):
            assert a[f"{key}_mean"] > b[f"{key}_mean"]

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError):
            mesh_quality_summary(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32)))


class TestNearestTriangle:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        mesh = icosphere([0, 0, 0], 1.0, subdivisions=2)
        idx = NearestTriangleIndex(mesh)
        pts = rng.standard_normal((200, 3)) * 1.5
        d, f = idx.query(pts)
        corners = mesh.corners()
        from roomdiff.geometry import point_triangle_distance
        brute = np.full(len(pts), np.inf)
        for tri in corners:
            brute = np.minimum(brute, point_triangle_distance(pts, tri[0], tri[1], tri[2]))
        np.testing.assert_allclose(d, brute, atol=1e-11)


class TestNormalError:
    def test_identical_meshes_perfect(self):
        mesh = icosphere([0, 0, 0], 1.0, subdivisions=2)
        rep = normal_error(mesh, mesh, samples=2000, rng=np.random.default_rng(0))
        assert rep.ratios == (100.0, 100.0, 100.0)
        for m in rep.means:
            assert m < 1e-6

    def test_flipped_winding_all_outliers(self):
        plane = plane_mesh()
        flipped = plane_mesh(flip=True)
        rep = normal_error(plane, flipped, samples=1000, rng=np.random.default_rng(0))
        assert rep.ratios[0] == 0.0  # nothing under 90 degrees

    def test_ten_degree_tilt(self):
        plane = plane_mesh()
        tilted = plane_mesh(tilt=np.radians(10.0))
        rep = normal_error(tilted, plane, samples=5000, rng=np.random.default_rng(0))
        idx45 = rep.thresholds.index(45.0)
        assert rep.ratios[idx45] == 100.0
        assert abs(rep.means[idx45] - 10.0) <= 0.1

    def test_threshold_nesting_invariant(self):
        rng = np.random.default_rng(2)
        a = icosphere([0, 0, 0], 1.0, 2)
        b = TriangleMesh(a.vertices + 0.03 * rng.standard_normal(a.vertices.shape),
                         a.triangles)
        rep = normal_error(a, b, samples=3000, rng=rng)
        assert rep.ratios[0] >= rep.ratios[1] >= rep.ratios[2]
        for t, m in zip(rep.thresholds, rep.means):
            assert m <= t

    def test_empty_mesh_rejected(self):
        mesh = icosphere([0, 0, 0], 1.0, 1)
        empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32))
        with pytest.raises(ValueError):
            normal_error(mesh, empty)

    def test_report_validates_nesting(self):
        with pytest.raises(ValueError):
            NormalErrorReport((90.0, 45.0), (50.0, 80.0), (10.0, 5.0), 100)


class TestSampling:
    def test_area_weighting(self):
        # two triangles, one with 9x the area: sample counts follow areas
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [5, 0, 0], [8, 0, 0], [5, 3, 0]], dtype=np.float64)
        t = np.array([[0, 1, 2], [3, 4, 5]], np.int32)
        mesh = TriangleMesh(v, t)
        pts, faces = sample_surface(mesh, 20000, np.random.default_rng(3))
        frac = (faces == 1).mean()
        assert abs(frac - 0.9) < 0.02
