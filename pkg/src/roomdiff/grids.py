"""Coordinate-hashed sparse voxel volumes.

A sparse volume stores per-voxel feature vectors only at "active"
coordinates of a bounded H x W x L grid.  Coordinates are kept unique and
lexicographically sorted at all times; every reduction in the package runs
in this canonical order, which makes results independent of construction
order and bit-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridExtent",
    "OccupancyMask",
    "SparseVolume",
    "linear_keys",
    "lookup_rows",
]

# Room-scale ceiling from the scene generation setup (512 x 512 x 128).
MAX_SCENE_EXTENT = (512, 512, 128)


@dataclass(frozen=True)
class GridExtent:
    """Positive voxel counts along the three grid axes."""

    h: int
    w: int
    l: int

    def __post_init__(self):
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"extent must be positive, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.l)

    @property
    def volume(self) -> int:
        return self.h * self.w * self.l

    def scaled(self, factor: int) -> "GridExtent":
        return GridExtent(self.h * factor, self.w * factor, self.l * factor)

    def downsampled(self, factor: int) -> "GridExtent":
        if self.h % factor or self.w % factor or self.l % factor:
            raise ValueError(f"extent {self.as_tuple()} not divisible by {factor}")
        return GridExtent(self.h // factor, self.w // factor, self.l // factor)

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Boolean mask of rows of an (N, 3) int array that lie inside."""
        c = np.asarray(coords)
        lo = (c >= 0).all(axis=1)
        hi = (c[:, 0] < self.h) & (c[:, 1] < self.w) & (c[:, 2] < self.l)
        return lo & hi


def linear_keys(coords: np.ndarray, extent: GridExtent) -> np.ndarray:
    """Row-major linear index; numeric order equals lexicographic (i,j,k)."""
    c = coords.astype(np.int64, copy=False)
    return (c[:, 0] * extent.w + c[:, 1]) * extent.l + c[:, 2]


def lookup_rows(sorted_keys: np.ndarray, query_keys: np.ndarray):
    """Locate query keys in a sorted key array.

    Returns (rows, found): rows[i] is the position of query_keys[i] in
    sorted_keys (unspecified where found[i] is False).
    """
    rows = np.searchsorted(sorted_keys, query_keys)
    rows_clipped = np.minimum(rows, len(sorted_keys) - 1) if len(sorted_keys) else rows
    if len(sorted_keys) == 0:
        return rows, np.zeros(len(query_keys), dtype=bool)
    found = sorted_keys[rows_clipped] == query_keys
    return rows_clipped, found


def _canonicalize(coords: np.ndarray, extent: GridExtent, feats=None):
    coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int32).reshape(-1, 3))
    if len(coords) and not extent.contains(coords).all():
        raise ValueError("coordinates outside grid extent")
    keys = linear_keys(coords, extent)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    if len(keys) > 1 and (keys[1:] == keys[:-1]).any():
        raise ValueError("duplicate coordinates")
    coords = coords[order]
    if feats is None:
        return coords, keys
    feats = np.asarray(feats)
    if feats.ndim != 2 or len(feats) != len(coords):
        raise ValueError("features must be (n_active, channels)")
    return coords, keys, feats[order]


class OccupancyMask:
    """Binary sparsity pattern: the set of active voxels of a grid."""

    def __init__(self, extent: GridExtent, coords: np.ndarray, _sorted: bool = False):
        self.extent = extent
        if _sorted:
            self.coords = coords
            self.keys = linear_keys(coords, extent)
        else:
            self.coords, self.keys = _canonicalize(coords, extent)
        self._plan_cache: dict = {}

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, OccupancyMask):
            return NotImplemented
        return self.extent == other.extent and np.array_equal(self.coords, other.coords)

    @classmethod
    def full(cls, extent: GridExtent) -> "OccupancyMask":
        ii, jj, kk = np.meshgrid(
            np.arange(extent.h), np.arange(extent.w), np.arange(extent.l), indexing="ij"
        )
        coords = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.int32)
        return cls(extent, coords, _sorted=True)

    @classmethod
    def from_dense(cls, dense: np.ndarray, extent: GridExtent | None = None) -> "OccupancyMask":
        dense = np.asarray(dense)
        extent = extent or GridExtent(*dense.shape)
        coords = np.argwhere(dense).astype(np.int32)
        return cls(extent, coords, _sorted=True)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.extent.as_tuple(), dtype=bool)
        if len(self.coords):
            out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = True
        return out

    def occupancy(self) -> float:
        return len(self) / self.extent.volume

    def maxpool(self, factor: int = 2) -> "OccupancyMask":
        """Parent cells with at least one active child (mask downsampling).

        Cached per factor so repeated passes reuse one mask object (and with
        it the conv plans built on that mask).
        """
        cached = self._plan_cache.get(("maxpool", factor))
        if cached is not None:
            return cached
        ext = self.extent.downsampled(factor)
        if not len(self.coords):
            out = OccupancyMask(ext, np.zeros((0, 3), np.int32), _sorted=True)
        else:
            parents = self.coords // factor
            keys = linear_keys(parents, ext)
            uniq, idx = np.unique(keys, return_index=True)
            out = OccupancyMask(ext, parents[idx][np.argsort(uniq, kind="stable")])
        self._plan_cache[("maxpool", factor)] = out
        return out

    def intersect_box(self, origin, size) -> np.ndarray:
        """Row indices of active voxels inside an axis-aligned box."""
        o = np.asarray(origin)
        s = np.asarray(size)
        c = self.coords
        inside = ((c >= o) & (c < o + s)).all(axis=1)
        return np.nonzero(inside)[0]


class SparseVolume:
    """Feature vectors on the active voxels of a bounded grid."""

    def __init__(self, extent: GridExtent, coords: np.ndarray, feats: np.ndarray,
                 _sorted: bool = False):
        self.extent = extent
        if _sorted:
            self.coords = coords
            self.keys = linear_keys(coords, extent)
            self.feats = feats
        else:
            self.coords, self.keys, self.feats = _canonicalize(coords, extent, feats)
        if self.feats.dtype not in (np.float32, np.float64):
            self.feats = self.feats.astype(np.float32)
        if len(self.feats) and not np.isfinite(self.feats).all():
            raise ValueError("non-finite feature values")
        self._mask: OccupancyMask | None = None

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def n_active(self) -> int:
        return len(self.coords)

    def mask(self) -> OccupancyMask:
        # cached so conv plans built on the mask are reused across calls
        if self._mask is None:
            self._mask = OccupancyMask(self.extent, self.coords, _sorted=True)
        return self._mask

    @classmethod
    def on_mask(cls, mask: OccupancyMask, feats: np.ndarray) -> "SparseVolume":
        vol = cls(mask.extent, mask.coords, np.asarray(feats), _sorted=True)
        vol._mask = mask
        return vol

    def with_feats(self, feats: np.ndarray) -> "SparseVolume":
        """Same active set, new feature matrix."""
        feats = np.asarray(feats)
        if feats.shape[0] != self.n_active:
            raise ValueError("feature row count must match active set")
        vol = SparseVolume(self.extent, self.coords, feats, _sorted=True)
        vol._mask = self._mask
        return vol

    def same_mask(self, other: "SparseVolume | OccupancyMask") -> bool:
        coords = other.coords
        return self.extent == other.extent and np.array_equal(self.coords, coords)

    @classmethod
    def zeros(cls, mask: OccupancyMask, channels: int, dtype=np.float32) -> "SparseVolume":
        return cls(mask.extent, mask.coords,
                   np.zeros((len(mask), channels), dtype=dtype), _sorted=True)

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: OccupancyMask) -> "SparseVolume":
        """Restrict a dense (H, W, L, C) array to the mask's active set."""
        dense = np.asarray(dense)
        if dense.ndim == 3:
            dense = dense[..., None]
        if dense.shape[:3] != mask.extent.as_tuple():
            raise ValueError("dense array shape does not match mask extent")
        c = mask.coords
        feats = dense[c[:, 0], c[:, 1], c[:, 2]]
        return cls(mask.extent, c, np.ascontiguousarray(feats), _sorted=True)

    def to_dense(self, default: float = 0.0) -> np.ndarray:
        """Densify to (H, W, L, C); inactive voxels take `default`."""
        out = np.full(self.extent.as_tuple() + (self.channels,), default,
                      dtype=self.feats.dtype)
        c = self.coords
        if len(c):
            out[c[:, 0], c[:, 1], c[:, 2]] = self.feats
        return out

    def restricted(self, mask: OccupancyMask) -> "SparseVolume":
        """Values at the mask's voxels; every mask voxel must be active here."""
        rows, found = lookup_rows(self.keys, mask.keys)
        if not found.all():
            raise ValueError("mask contains voxels inactive in the volume")
        return SparseVolume(mask.extent, mask.coords, self.feats[rows], _sorted=True)

    def nn_upsample(self, factor: int, target_mask: OccupancyMask) -> "SparseVolume":
        """Nearest-neighbour upsampling: each target voxel copies its parent.

        Used for injecting coarse conditions at finer resolutions; every
        target voxel's parent cell must be active.
        """
        if target_mask.extent != self.extent.scaled(factor):
            raise ValueError("target extent must be source extent x factor")
        parents = target_mask.coords // factor
        rows, found = lookup_rows(self.keys, linear_keys(parents, self.extent))
        if not found.all():
            raise ValueError("target voxel with inactive parent")
        return SparseVolume(target_mask.extent, target_mask.coords,
                            self.feats[rows], _sorted=True)
