"""TSDF data pipeline: meshes, voxelization, truncation, isosurface
extraction, crop augmentation and a procedural room generator.

Conventions
-----------
* Signed distance is negative inside solids.
* A voxel grid of extent (H, W, L) with voxel size h covers the metric box
  [origin, origin + extent * h); voxel (i, j, k) has its center at
  origin + (i + 0.5) h.
* Normalized TSDF units are meters / voxel_size, so the default truncation
  0.12 m at 0.04 m voxels spans [-3, 3].  Unobserved voxels carry the raw
  default 1.0 m, which clamps to +truncation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .grids import GridExtent, OccupancyMask, SparseVolume

__all__ = [
    "TriangleMesh",
    "TsdfVolume",
    "CropAugmentation",
    "load_mesh",
    "save_mesh",
    "box_mesh",
    "cylinder_mesh",
    "icosphere",
    "merge_meshes",
    "voxelize_to_sdf",
    "truncate_and_normalize",
    "marching_cubes",
    "random_crop",
    "synthetic_rooms",
    "NonWatertightError",
]

DEFAULT_VOXEL_SIZE = 0.04      # meters
DEFAULT_TRUNCATION = 0.12      # meters, 3 voxels
RAW_DEFAULT_TSDF = 1.0         # meters, unobserved voxels


class NonWatertightError(ValueError):
    """Ray-parity inconsistency: the mesh does not bound a solid."""


# ---------------------------------------------------------------------------
# mesh type and primitives


@dataclass
class TriangleMesh:
    vertices: np.ndarray           # (V, 3) float
    triangles: np.ndarray          # (F, 3) int
    normals: np.ndarray | None = None  # optional per-vertex normals

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).any():
                raise ValueError("degenerate triangle with repeated vertex indices")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self):
        """(F, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    def face_normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def face_areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris = [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


_BOX_FACES = [
    # (axis, side, quad corners as bit patterns) -- outward CCW winding
    (0, 0, [0b000, 0b001, 0b011, 0b010]),
    (0, 1, [0b100, 0b110, 0b111, 0b101]),
    (1, 0, [0b000, 0b100, 0b101, 0b001]),
    (1, 1, [0b010, 0b011, 0b111, 0b110]),
    (2, 0, [0b000, 0b010, 0b110, 0b100]),
    (2, 1, [0b001, 0b101, 0b111, 0b011]),
]


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box with outward-facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[hi[0] if b & 4 else lo[0],
                         hi[1] if b & 2 else lo[1],
                         hi[2] if b & 1 else lo[2]] for b in range(8)])
    tris = []
    for _, _, quad in _BOX_FACES:
        a, b, c, d = quad
        tris.append([a, b, c])
        tris.append([a, c, d])
    return TriangleMesh(corners, np.array(tris, np.int32))


def cylinder_mesh(center_xy, z0, z1, radius, segments: int = 16) -> TriangleMesh:
    """Closed vertical prism approximating a cylinder."""
    cx, cy = center_xy
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, z0)])
    top = np.column_stack([ring, np.full(segments, z1)])
    verts = np.vstack([bottom, top, [[cx, cy, z0]], [[cx, cy, z1]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append([i, j, segments + j])          # side
        tris.append([i, segments + j, segments + i])
        tris.append([cb, j, i])                    # bottom cap (faces -z)
        tris.append([ct, segments + i, segments + j])  # top cap (faces +z)
    return TriangleMesh(verts, np.array(tris, np.int32))


def icosphere(center, radius: float, subdivisions: int = 3) -> TriangleMesh:
    """Subdivided icosahedron; all vertices lie exactly on the sphere."""
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict = {}
        new_faces = []
        verts_list = [v for v in verts]

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(np.asarray(center) + radius * verts, faces.astype(np.int32))


# ---------------------------------------------------------------------------
# mesh file formats (ASCII OBJ, binary little-endian PLY)


def save_mesh(mesh: TriangleMesh, path):
    path = Path(path)
    if mesh.n_vertices == 0 or mesh.n_triangles == 0:
        raise ValueError("refusing to save an empty mesh")
    if path.suffix.lower() == ".obj":
        with open(path, "w") as f:
            f.write("# roomdiff triangle mesh\n")
            for v in mesh.vertices.astype(np.float32):
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles + 1:
                f.write(f"f {t[0]} {t[1]} {t[2]}\n")
    elif path.suffix.lower() == ".ply":
        with open(path, "wb") as f:
            header = (
                "ply\nformat binary_little_endian 1.0\n"
                f"element vertex {mesh.n_vertices}\n"
                "property float x\nproperty float y\nproperty float z\n"
                f"element face {mesh.n_triangles}\n"
                "property list uchar int vertex_indices\nend_header\n")
            f.write(header.encode("ascii"))
            f.write(mesh.vertices.astype("<f4").tobytes())
            face = np.empty(mesh.n_triangles,
                            dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            face["n"] = 3
            face["idx"] = mesh.triangles
            f.write(face.tobytes())
    else:
        raise ValueError(f"unsupported mesh format {path.suffix!r}")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        verts, tris = [], []
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise ValueError("only triangular faces are supported")
                    tris.append([i - 1 for i in idx])
        if not verts or not tris:
            raise ValueError(f"empty or malformed OBJ file: {path}")
        return TriangleMesh(np.array(verts), np.array(tris, np.int32))
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    raise ValueError(f"unsupported mesh format {path.suffix!r}")


def _load_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = f.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise ValueError("only binary little-endian PLY is supported")
        n_vert = n_face = 0
        vert_props = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated PLY header")
            line = line.strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"element":
                element = parts[1]
                if element == b"vertex":
                    n_vert = int(parts[2])
                elif element == b"face":
                    n_face = int(parts[2])
            elif parts[0] == b"property" and element == b"vertex":
                if parts[1] != b"float":
                    raise ValueError("only float vertex properties are supported")
                vert_props.append(parts[2].decode())
        if n_vert == 0 or n_face == 0:
            raise ValueError("empty PLY mesh")
        vdata = np.frombuffer(f.read(4 * len(vert_props) * n_vert), dtype="<f4")
        vdata = vdata.reshape(n_vert, len(vert_props))
        cols = [vert_props.index(c) for c in ("x", "y", "z")]
        verts = vdata[:, cols].astype(np.float64)
        normals = None
        if all(c in vert_props for c in ("nx", "ny", "nz")):
            normals = vdata[:, [vert_props.index(c) for c in ("nx", "ny", "nz")]]
        face = np.frombuffer(f.read(n_face * 13),
                             dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        if (face["n"] != 3).any():
            raise ValueError("only triangular faces are supported")
        return TriangleMesh(verts, face["idx"].astype(np.int32), normals)


# ---------------------------------------------------------------------------
# exact point-triangle distance (vectorized Ericson closest-point)


def point_triangle_distance(points: np.ndarray, a, b, c) -> np.ndarray:
    """Exact distances from points (N, 3) to one triangle (a, b, c)."""
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = ap @ ab
    d2 = ap @ ac
    bp = points - b
    d3 = bp @ ab
    d4 = bp @ ac
    cp = points - c
    d5 = cp @ ab
    d6 = cp @ ac

    closest = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    def settle(cond, value):
        nonlocal done
        take = cond & ~done
        if take.any():
            closest[take] = value[take] if value.ndim > 1 else value
        done |= cond

    settle((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, points.shape))           # vertex A
    settle((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, points.shape))          # vertex B
    settle((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, points.shape))          # vertex C
    vc = d1 * d4 - d3 * d2
    v_ab = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + np.outer(v_ab, ab))          # edge AB
    vb = d5 * d2 - d1 * d6
    w_ac = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + np.outer(w_ac, ac))          # edge AC
    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = (d4 - d3) / np.where(denom_bc == 0, 1.0, denom_bc)
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + np.outer(w_bc, c - b))                                          # edge BC
    if not done.all():
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v = vb / denom
        w = vc / denom
        face = a + np.outer(v, ab) + np.outer(w, ac)
        closest[~done] = face[~done]
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# voxelization


def _column_crossings(mesh: TriangleMesh, origin, h, hw, ww):
    """z-levels where triangles cross each (i, j) grid column.

    Columns pass through voxel centers (origin + (i + .5) h).  Shared
    projected edges are counted once via CCW normalization plus a top-left
    tie rule, so closed meshes yield an even crossing count per column.
    """
    cols: list[np.ndarray] = [np.empty(0)] * (hw * ww)
    counts = np.zeros(hw * ww, dtype=np.int64)
    per_col: dict[int, list] = {}
    corners = mesh.corners()
    for tri in corners:
        (x1, y1, z1), (x2, y2, z2), (x3, y3, z3) = tri
        area2 = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
        if area2 == 0:
            continue  # vertical face: tangent to z-columns
        if area2 < 0:  # normalize to CCW in the projection
            (x2, y2, z2), (x3, y3, z3) = (x3, y3, z3), (x2, y2, z2)
            area2 = -area2
        i_lo = max(int(np.ceil((min(x1, x2, x3) - origin[0]) / h - 0.5)), 0)
        i_hi = min(int(np.floor((max(x1, x2, x3) - origin[0]) / h - 0.5)), hw - 1)
        j_lo = max(int(np.ceil((min(y1, y2, y3) - origin[1]) / h - 0.5)), 0)
        j_hi = min(int(np.floor((max(y1, y2, y3) - origin[1]) / h - 0.5)), ww - 1)
        if i_lo > i_hi or j_lo > j_hi:
            continue
        xs = origin[0] + (np.arange(i_lo, i_hi + 1) + 0.5) * h
        ys = origin[1] + (np.arange(j_lo, j_hi + 1) + 0.5) * h
        px, py = np.meshgrid(xs, ys, indexing="ij")
        px = px.ravel()
        py = py.ravel()

        def edge(ax, ay, bx, by):
            val = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            # half-open: include boundary on "top-left" edges only
            top_left = (by - ay < 0) | ((by == ay) & (bx - ax < 0))
            return np.where(val != 0, val > 0, top_left)

        inside = (edge(x1, y1, x2, y2) & edge(x2, y2, x3, y3) & edge(x3, y3, x1, y1))
        if not inside.any():
            continue
        qx, qy = px[inside], py[inside]
        lam2 = ((qx - x1) * (y3 - y1) - (qy - y1) * (x3 - x1)) / area2
        lam3 = ((x2 - x1) * (qy - y1) - (y2 - y1) * (qx - x1)) / area2
        zc = z1 + lam2 * (z2 - z1) + lam3 * (z3 - z1)
        ii = np.round((qx - origin[0]) / h - 0.5).astype(np.int64)
        jj = np.round((qy - origin[1]) / h - 0.5).astype(np.int64)
        flat = ii * ww + jj
        for fidx, z in zip(flat, zc):
            per_col.setdefault(int(fidx), []).append(z)
    for fidx, zs in per_col.items():
        arr = np.sort(np.asarray(zs))
        cols[fidx] = arr
        counts[fidx] = len(arr)
    return cols, counts


def voxelize_to_sdf(mesh: TriangleMesh, voxel_size: float = DEFAULT_VOXEL_SIZE,
                    bounds=None, band: float | None = None):
    """Signed distance at voxel centers, negative inside the mesh.

    Distances within `band` meters of the surface (default: one truncation
    plus a voxel) are exact point-to-triangle; farther magnitudes fall back
    to nearest-vertex distance, an overestimate by at most half the longest
    edge.  The sign comes from z-column ray parity; an odd crossing count in
    any column raises NonWatertightError.

    Returns (sdf, origin): a dense (H, W, L) float64 array and the metric
    position of the grid corner.
    """
    if mesh.n_triangles == 0:
        raise ValueError("cannot voxelize an empty mesh")
    h = float(voxel_size)
    if bounds is None:
        margin = DEFAULT_TRUNCATION + 2 * h
        lo = mesh.vertices.min(axis=0) - margin
        hi = mesh.vertices.max(axis=0) + margin
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    dims = np.maximum(np.ceil((hi - lo) / h - 1e-9).astype(int), 1)
    hw, ww, lw = (int(d) for d in dims)
    origin = lo
    if band is None:
        band = DEFAULT_TRUNCATION + 2 * h

    ii = origin[0] + (np.arange(hw) + 0.5) * h
    jj = origin[1] + (np.arange(ww) + 0.5) * h
    kk = origin[2] + (np.arange(lw) + 0.5) * h

    # magnitude: nearest-vertex lower-resolution field everywhere
    gx, gy, gz = np.meshgrid(ii, jj, kk, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tree = cKDTree(mesh.vertices)
    dist = tree.query(centers, workers=-1)[0]

    # exact refinement near the surface, one dilated box per triangle
    corners = mesh.corners()
    for tri in corners:
        t_lo = tri.min(axis=0) - band
        t_hi = tri.max(axis=0) + band
        sl = []
        ok = True
        for ax, (n, axis_lo) in enumerate(zip((hw, ww, lw), origin)):
            a0 = max(int(np.ceil((t_lo[ax] - axis_lo) / h - 0.5)), 0)
            a1 = min(int(np.floor((t_hi[ax] - axis_lo) / h - 0.5)), n - 1)
            if a0 > a1:
                ok = False
                break
            sl.append((a0, a1))
        if not ok:
            continue
        (i0, i1), (j0, j1), (k0, k1) = sl
        px, py, pz = np.meshgrid(ii[i0:i1 + 1], jj[j0:j1 + 1], kk[k0:k1 + 1],
                                 indexing="ij")
        pts = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
        d = point_triangle_distance(pts, tri[0], tri[1], tri[2])
        lin = ((np.arange(i0, i1 + 1)[:, None, None] * ww
                + np.arange(j0, j1 + 1)[None, :, None]) * lw
               + np.arange(k0, k1 + 1)[None, None, :]).ravel()
        np.minimum.at(dist, lin, d)

    # sign from column parity
    cols, counts = _column_crossings(mesh, origin, h, hw, ww)
    if (counts % 2).any():
        bad = int((counts % 2).sum())
        raise NonWatertightError(
            f"inconsistent ray parity in {bad} columns; input must be watertight")
    sign = np.ones((hw * ww, lw))
    for fidx in range(hw * ww):
        zs = cols[fidx]
        if len(zs) == 0:
            continue
        below = np.searchsorted(zs, kk, side="left")
        sign[fidx] = np.where(below % 2 == 1, -1.0, 1.0)
    sdf = dist.reshape(hw, ww, lw) * sign.reshape(hw, ww, lw)
    return sdf, origin


# ---------------------------------------------------------------------------
# truncation / normalization and the TSDF container


@dataclass
class TsdfVolume:
    """Normalized truncated SDF on a sparse active set."""

    volume: SparseVolume
    voxel_size: float = DEFAULT_VOXEL_SIZE
    truncation: float = DEFAULT_TRUNCATION
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.voxel_size <= 0 or self.truncation <= 0:
            raise ValueError("voxel size and truncation must be positive")
        limit = self.truncation / self.voxel_size
        if self.volume.n_active and np.abs(self.volume.feats).max() > limit + 1e-5:
            raise ValueError("normalized TSDF exceeds the truncation band")

    @property
    def extent(self) -> GridExtent:
        return self.volume.extent

    @property
    def clip_limit(self) -> float:
        return self.truncation / self.voxel_size

    @property
    def default_normalized(self) -> float:
        """Clamped raw default for unobserved voxels, in normalized units."""
        return float(np.clip(RAW_DEFAULT_TSDF, -self.truncation, self.truncation)
                     / self.voxel_size)

    def to_dense(self) -> np.ndarray:
        return self.volume.to_dense(default=self.default_normalized)[..., 0]

    def to_meters(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized) * self.voxel_size

    def with_volume(self, volume: SparseVolume) -> "TsdfVolume":
        return TsdfVolume(volume, self.voxel_size, self.truncation, self.origin)


def truncate_and_normalize(sdf: np.ndarray, voxel_size: float = DEFAULT_VOXEL_SIZE,
                           truncation: float = DEFAULT_TRUNCATION,
                           origin=np.zeros(3)) -> TsdfVolume:
    """Clamp to +-truncation, scale into voxel units, mark the active band.

    Voxels with |sdf| strictly below the truncation are active; the
    boundary itself is excluded.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    extent = GridExtent(*sdf.shape)
    active = np.abs(sdf) < truncation
    mask = OccupancyMask.from_dense(active, extent)
    normalized = np.clip(sdf, -truncation, truncation) / voxel_size
    vol = SparseVolume.from_dense(normalized[..., None].astype(np.float32), mask)
    return TsdfVolume(vol, voxel_size, truncation, origin)


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(tsdf: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-surface of the densified TSDF, vertices in meters.

    Inactive voxels take the clamped default (outside), except unobserved
    regions fully enclosed by the active band, which close at -truncation;
    without that sign completion the inner edge of the truncation band
    would extrude a phantom interior shell.  Returns an empty mesh with a
    warning when no zero crossing exists.
    """
    dense = tsdf.to_dense()
    active = tsdf.volume.mask().to_dense()
    if (~active).any() and active.any():
        # sign completion: each unobserved connected region takes the sign of
        # the truncation-band values it touches (negative = interior)
        from scipy import ndimage
        six = ndimage.generate_binary_structure(3, 1)
        labels, n_labels = ndimage.label(~active, structure=six)
        sums = np.zeros(n_labels + 1)
        counts = np.zeros(n_labels + 1)
        for axis in range(3):
            for side in (1, -1):
                lab = np.roll(labels, side, axis=axis)
                edge_sl = [slice(None)] * 3
                edge_sl[axis] = 0 if side == 1 else -1
                lab[tuple(edge_sl)] = 0
                touch = active & (lab > 0)
                np.add.at(sums, lab[touch], dense[touch])
                np.add.at(counts, lab[touch], 1.0)
        region_sign = np.where(sums < 0, -1.0, 1.0)
        region_sign[counts == 0] = 1.0  # isolated regions default to outside
        dense[~active] = region_sign[labels[~active]] * tsdf.clip_limit
    if tsdf.volume.n_active == 0 or dense.min() > iso or dense.max() < iso:
        warnings.warn("no iso-surface crossing; returning an empty mesh")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32))
    h = tsdf.voxel_size
    # negative-inside convention: "descent" yields outward normals and winding
    verts, faces, normals, _ = measure.marching_cubes(
        dense, level=iso, spacing=(h, h, h), gradient_direction="descent")
    verts = verts + tsdf.origin + 0.5 * h
    return TriangleMesh(verts, faces.astype(np.int32), normals)


# ---------------------------------------------------------------------------
# crop augmentation


@dataclass(frozen=True)
class CropAugmentation:
    """Rotation about the vertical axis plus translation inside the active
    bounding box; crops never leave the occupied region.

    rotation / center default to None, meaning "draw uniformly"; fixing them
    makes the crop deterministic.
    """

    crop_size: int = 96
    rotation: float | None = None
    center: tuple[float, float, float] | None = None


def _active_bbox(mask: OccupancyMask):
    c = mask.coords
    return c.min(axis=0), c.max(axis=0) + 1


def random_crop(tsdf: TsdfVolume, aug: CropAugmentation,
                rng: np.random.Generator) -> TsdfVolume:
    """Rotated, translated cube crop of the TSDF.

    Values resample trilinearly; a crop voxel stays active only when all
    eight contributing source voxels are active (no fabricated surface
    values).  Scenes too small for the requested crop fall back to an
    axis-aligned center crop with zero rotation.
    """
    s = aug.crop_size
    if tsdf.volume.n_active == 0:
        raise ValueError("cannot crop an empty volume")
    lo, hi = _active_bbox(tsdf.volume.mask())
    size = hi - lo
    theta = float(rng.uniform(0.0, 2 * np.pi)) if aug.rotation is None \
        else float(aug.rotation)
    half = s / 2.0
    # footprint half-width of the rotated crop in the xy plane
    fx = half * (abs(np.cos(theta)) + abs(np.sin(theta)))
    feasible = (size[0] >= 2 * fx and size[1] >= 2 * fx and size[2] >= s)
    if aug.center is not None:
        center = np.asarray(aug.center, dtype=np.float64)
    elif not feasible:
        theta = 0.0
        center = (lo + hi) / 2.0
    else:
        cmin = lo + np.array([fx, fx, half])
        cmax = hi - np.array([fx, fx, half])
        center = np.array([rng.uniform(a, b) if b > a else (a + b) / 2
                           for a, b in zip(cmin, cmax)])

    # target voxel centers relative to the crop center, rotated into source
    offs = np.arange(s) + 0.5 - half
    ti, tj, tk = np.meshgrid(offs, offs, offs, indexing="ij")
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_i = center[0] + cos_t * ti - sin_t * tj
    src_j = center[1] + sin_t * ti + cos_t * tj
    src_k = center[2] + tk

    dense = tsdf.to_dense()
    active = tsdf.volume.mask().to_dense()
    vals, ok = _trilinear(dense, active, src_i - 0.5, src_j - 0.5, src_k - 0.5,
                          fill=tsdf.default_normalized)
    out = np.where(ok, vals, tsdf.default_normalized)
    out = np.clip(out, -tsdf.clip_limit, tsdf.clip_limit)
    mask = OccupancyMask.from_dense(ok, GridExtent(s, s, s))
    vol = SparseVolume.from_dense(out[..., None].astype(np.float32), mask)
    return TsdfVolume(vol, tsdf.voxel_size, tsdf.truncation, np.zeros(3))


def _trilinear(dense: np.ndarray, active: np.ndarray, fi, fj, fk, fill: float):
    """Trilinear values plus a conservative all-sources-active flag."""
    shape = dense.shape
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    k0 = np.floor(fk).astype(np.int64)
    di = fi - i0
    dj = fj - j0
    dk = fk - k0
    vals = np.zeros(fi.shape)
    ok = np.ones(fi.shape, dtype=bool)
    for oi in (0, 1):
        for oj in (0, 1):
            for ok_ in (0, 1):
                w = ((di if oi else 1 - di) * (dj if oj else 1 - dj)
                     * (dk if ok_ else 1 - dk))
                ci = np.clip(i0 + oi, 0, shape[0] - 1)
                cj = np.clip(j0 + oj, 0, shape[1] - 1)
                ck = np.clip(k0 + ok_, 0, shape[2] - 1)
                inb = ((i0 + oi >= 0) & (i0 + oi < shape[0])
                       & (j0 + oj >= 0) & (j0 + oj < shape[1])
                       & (k0 + ok_ >= 0) & (k0 + ok_ < shape[2]))
                v = np.where(inb, dense[ci, cj, ck], fill)
                contributes = w > 1e-12
                ok &= np.where(contributes, active[ci, cj, ck] & inb, True)
                vals += w * v
    return vals, ok


# ---------------------------------------------------------------------------
# synthetic rooms


def synthetic_rooms(seed: int, extent=(64, 64, 32), count: int = 1,
                    voxel_size: float = DEFAULT_VOXEL_SIZE,
                    truncation: float = DEFAULT_TRUNCATION,
                    max_furniture: int = 6):
    """Procedural watertight rooms: floor and perimeter walls plus boxes and
    cylinder prisms, all snapped to the voxel lattice and pairwise disjoint
    (so ray parity stays consistent).  Returns [(TsdfVolume, TriangleMesh)].
    """
    ext = GridExtent(*extent)
    h = voxel_size
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        boxes_vox = []  # (lo, hi) in voxel units, for collision checks
        pieces = []

        def add_box(lo_v, hi_v):
            boxes_vox.append((np.asarray(lo_v), np.asarray(hi_v)))
            pieces.append(box_mesh(np.asarray(lo_v) * h, np.asarray(hi_v) * h))

        H, W, L = ext.h, ext.w, ext.l
        wall_h = max(L // 3, 6)
        # floor slab and four perimeter walls, one voxel of clearance apart
        add_box((0, 0, 0), (H, W, 1))
        z0, z1 = 2, 2 + wall_h
        add_box((0, 0, z0), (H, 2, z1))
        add_box((0, W - 2, z0), (H, W, z1))
        add_box((0, 3, z0), (2, W - 3, z1))
        add_box((H - 2, 3, z0), (H, W - 3, z1))

        n_furniture = int(rng.integers(2, max_furniture + 1))
        tries = 0
        placed = 0
        while placed < n_furniture and tries < 200:
            tries += 1
            fw = int(rng.integers(4, max(H // 4, 6)))
            fd = int(rng.integers(4, max(W // 4, 6)))
            fh = int(rng.integers(3, max(wall_h - 2, 5)))
            x0 = int(rng.integers(4, H - 4 - fw)) if H - 8 - fw > 0 else 4
            y0 = int(rng.integers(4, W - 4 - fd)) if W - 8 - fd > 0 else 4
            lo_v = np.array([x0, y0, 2])
            hi_v = np.array([x0 + fw, y0 + fd, 2 + fh])
            clear = all((hi_v + 1 <= b_lo).any() or (lo_v - 1 >= b_hi).any()
                        for b_lo, b_hi in boxes_vox[1:])
            if not clear:
                continue
            if rng.random() < 0.3:
                r = min(fw, fd) * h / 2 - h / 2
                cx = (x0 + fw / 2) * h
                cy = (y0 + fd / 2) * h
                boxes_vox.append((lo_v, hi_v))
                pieces.append(cylinder_mesh((cx, cy), 2 * h, (2 + fh) * h, r,
                                            segments=14))
            else:
                add_box(lo_v, hi_v)
            placed += 1

        mesh = merge_meshes(pieces)
        sdf, origin = voxelize_to_sdf(mesh, voxel_size,
                                      bounds=(np.zeros(3), np.array([H, W, L]) * h))
        tsdf = truncate_and_normalize(sdf, voxel_size, truncation, origin)
        out.append((tsdf, mesh))
    return out
