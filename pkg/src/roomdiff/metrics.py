"""Geometry-quality evaluation: per-triangle shape scores and surface
normal-error statistics between a predicted and a reference mesh.

Triangle scores, each normalized to 1 for the equilateral triangle and 0
for degenerate ones:

    aspect_ratio     = 2 r_in / R_circ
    circularity      = 36 A / (sqrt(3) P^2)
    shape_regularity = 4 sqrt(3) A / (e1^2 + e2^2 + e3^2)

The exact formulas vary across tools, so reported numbers are comparable
only within this implementation.  Summary statistics use the population
variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, point_triangle_distance

__all__ = [
    "TriangleQuality",
    "triangle_metrics",
    "mesh_quality_summary",
    "NormalErrorReport",
    "normal_error",
    "sample_surface",
    "NearestTriangleIndex",
    "format_quality_grid",
    "format_normal_grid",
]

DEFAULT_THRESHOLDS = (90.0, 45.0, 30.0)
DEFAULT_SAMPLES = 100_000


@dataclass(frozen=True)
class TriangleQuality:
    aspect_ratio: float
    circularity: float
    shape_regularity: float

    def as_tuple(self):
        return (self.aspect_ratio, self.circularity, self.shape_regularity)


def _metric_arrays(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Vectorized metric triple over (N, 3) corner arrays."""
    e1 = np.linalg.norm(b - c, axis=-1)
    e2 = np.linalg.norm(c - a, axis=-1)
    e3 = np.linalg.norm(a - b, axis=-1)
    cross = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cross, axis=-1)
    perim = e1 + e2 + e3
    edge_sq = e1 ** 2 + e2 ** 2 + e3 ** 2
    good = (area > 0) & (perim > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_in = 2.0 * area / perim                       # A / s
        r_circ = e1 * e2 * e3 / (4.0 * area)
        aspect = np.where(good, 2.0 * r_in / np.where(good, r_circ, 1.0), 0.0)
        circ = np.where(good, 36.0 * area / (np.sqrt(3.0) * perim ** 2), 0.0)
        shape = np.where(good, 4.0 * np.sqrt(3.0) * area / np.where(good, edge_sq, 1.0), 0.0)
    return aspect, circ, shape


def triangle_metrics(a, b, c) -> TriangleQuality:
    """Shape scores of one triangle; degenerate triangles score all zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    aspect, circ, shape = _metric_arrays(a[None], b[None], c[None])
    return TriangleQuality(float(aspect[0]), float(circ[0]), float(shape[0]))


def mesh_quality_summary(mesh: TriangleMesh) -> dict:
    """Unweighted per-face mean and population variance of each score."""
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    c = mesh.corners().astype(np.float64)
    aspect, circ, shape = _metric_arrays(c[:, 0], c[:, 1], c[:, 2])
    if not (aspect > 0).any():
        raise ValueError("mesh has no non-degenerate triangle")
    out = {}
    for name, vals in (("aspect_ratio", aspect), ("circularity", circ),
                       ("shape_regularity", shape)):
        out[f"{name}_mean"] = float(vals.mean())
        out[f"{name}_var"] = float(vals.var())  # population variance
    out["n_faces"] = mesh.n_triangles
    return out


# ---------------------------------------------------------------------------
# surface sampling and exact nearest-triangle queries


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator):
    """Area-weighted point samples; returns (points, face_index)."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    faces = rng.choice(mesh.n_triangles, size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    c = mesh.corners()[faces]
    pts = c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])
    return pts, faces


class NearestTriangleIndex:
    """Exact nearest-triangle queries via a centroid KD-tree with a
    completeness radius guard.

    A candidate set from the k nearest centroids is exact once every
    triangle whose centroid ball could beat the current best is examined;
    `max_radius` (the largest centroid-to-corner distance) provides that
    bound, so a widening ball query finishes the rare stragglers.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_triangles == 0:
            raise ValueError("empty mesh")
        self.mesh = mesh
        self.corners = mesh.corners().astype(np.float64)
        self.centroids = self.corners.mean(axis=1)
        self.tree = cKDTree(self.centroids)
        self.max_radius = float(np.linalg.norm(
            self.corners - self.centroids[:, None, :], axis=2).max())

    def query(self, points: np.ndarray, k: int = 12):
        """Returns (distance, face index) of the exact nearest triangle."""
        points = np.asarray(points, dtype=np.float64)
        k = min(k, self.mesh.n_triangles)
        cd, ci = self.tree.query(points, k=k, workers=-1)
        if k == 1:
            cd = cd[:, None]
            ci = ci[:, None]
        best_d = np.full(len(points), np.inf)
        best_f = np.zeros(len(points), dtype=np.int64)
        for col in range(k):
            face = ci[:, col]
            d = _distance_to_faces(points, self.corners, face)
            better = d < best_d
            best_d[better] = d[better]
            best_f[better] = face[better]
        # a farther centroid can still hide a closer triangle: check all
        # triangles whose centroid lies within best + max_radius
        need = cd[:, -1] < best_d + self.max_radius
        for i in np.nonzero(need)[0]:
            cand = self.tree.query_ball_point(points[i], best_d[i] + self.max_radius)
            for face in cand:
                d = point_triangle_distance(points[i:i + 1],
                                            self.corners[face, 0],
                                            self.corners[face, 1],
                                            self.corners[face, 2])[0]
                if d < best_d[i]:
                    best_d[i] = d
                    best_f[i] = face
        return best_d, best_f


def _distance_to_faces(points, corners, face_idx):
    """Pointwise distance where each point has its own candidate face."""
    a = corners[face_idx, 0]
    b = corners[face_idx, 1]
    c = corners[face_idx, 2]
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = (ap * ab).sum(1)
    d2 = (ap * ac).sum(1)
    bp = points - b
    d3 = (bp * ab).sum(1)
    d4 = (bp * ac).sum(1)
    cp = points - c
    d5 = (cp * ab).sum(1)
    d6 = (cp * ac).sum(1)
    closest = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    def settle(cond, value):
        nonlocal done
        take = cond & ~done
        closest[take] = value[take]
        done |= cond

    settle((d1 <= 0) & (d2 <= 0), a)
    settle((d3 >= 0) & (d4 <= d3), b)
    settle((d6 >= 0) & (d5 <= d6), c)
    vc = d1 * d4 - d3 * d2
    t = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[:, None] * ab)
    vb = d5 * d2 - d1 * d6
    t = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[:, None] * ac)
    va = d3 * d6 - d5 * d4
    denom = (d4 - d3) + (d5 - d6)
    t = (d4 - d3) / np.where(denom == 0, 1.0, denom)
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t[:, None] * (c - b))
    if not done.all():
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v = (vb / denom)[:, None]
        w = (vc / denom)[:, None]
        rest = a + v * ab + w * ac
        closest[~done] = rest[~done]
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# normal error


@dataclass(frozen=True)
class NormalErrorReport:
    """Per-threshold inlier ratios (%) and inlier mean errors (degrees)."""

    thresholds: tuple[float, ...]
    ratios: tuple[float, ...]
    means: tuple[float, ...]
    samples: int

    def __post_init__(self):
        ordered = sorted(self.thresholds, reverse=True)
        if list(self.thresholds) != ordered:
            raise ValueError("thresholds must be given in decreasing order")
        for r_hi, r_lo in zip(self.ratios, self.ratios[1:]):
            if r_lo > r_hi + 1e-9:
                raise ValueError("inlier ratios must nest with the thresholds")

    def as_dict(self) -> dict:
        out = {"samples": self.samples}
        for t, r, m in zip(self.thresholds, self.ratios, self.means):
            out[f"lt{int(t)}_ratio"] = r
            out[f"lt{int(t)}_mean"] = m
        return out


def normal_error(pred: TriangleMesh, gt: TriangleMesh,
                 samples: int = DEFAULT_SAMPLES,
                 thresholds=DEFAULT_THRESHOLDS,
                 rng: np.random.Generator | None = None) -> NormalErrorReport:
    """Angle between face normals at area-weighted samples of `pred` and
    the nearest point on `gt`; errors in [0, 180] degrees.

    For each threshold T the report carries the percentage of samples with
    error below T and the mean error of those inliers.
    """
    if pred.n_triangles == 0 or gt.n_triangles == 0:
        raise ValueError("both meshes must be non-empty")
    rng = rng or np.random.default_rng(0)
    pts, faces = sample_surface(pred, samples, rng)
    pred_n = pred.face_normals()[faces]
    index = NearestTriangleIndex(gt)
    _, gt_faces = index.query(pts)
    gt_n = gt.face_normals()[gt_faces]
    cos = np.clip((pred_n * gt_n).sum(axis=1), -1.0, 1.0)
    err = np.degrees(np.arccos(cos))
    ratios = []
    means = []
    for t in thresholds:
        inlier = err < t
        ratios.append(100.0 * inlier.mean())
        means.append(float(err[inlier].mean()) if inlier.any() else 0.0)
    return NormalErrorReport(tuple(thresholds), tuple(ratios), tuple(means), samples)


# ---------------------------------------------------------------------------
# report formatting


def format_quality_grid(summary: dict, label: str = "mesh") -> str:
    lines = [f"mesh quality ({label}; population variance, {summary['n_faces']} faces)"]
    for key, short in (("aspect_ratio", "Aspect"), ("circularity", "Circ."),
                       ("shape_regularity", "Shape")):
        lines.append(f"  {short:<7} mean {summary[f'{key}_mean']:.4f}"
                     f"   var {summary[f'{key}_var']:.4f}")
    return "\n".join(lines)


def format_normal_grid(report: NormalErrorReport) -> str:
    lines = [f"normal error ({report.samples} samples)"]
    for t, r, m in zip(report.thresholds, report.ratios, report.means):
        lines.append(f"  <{int(t):>2} deg   ratio {r:6.2f}%   inlier mean {m:6.2f} deg")
    return "\n".join(lines)
