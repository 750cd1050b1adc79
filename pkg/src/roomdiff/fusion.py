"""Joint diffusion over overlapping crops of a large scene.

A scene too large for the denoiser is tiled into overlapping crops.  All
crops hold the same global state restricted to their box; each timestep
every crop takes one reverse step independently and a fusion barrier
rebuilds the global volume and writes it back into the crops.

Stochastic fusion draws, per voxel, one covering crop uniformly at random,
which preserves the per-voxel sample distribution; averaging the crops
(the ablation baseline) shrinks the variance by 1/|cover|.  Selections
come from a counter-based hash keyed by (voxel, timestep, seed), so
results do not depend on crop processing order or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diffusion import (NoiseSchedule, ddim_step, ddim_timesteps,
                        ddpm_reverse_step, noise_like)
from .grids import GridExtent, OccupancyMask, SparseVolume

__all__ = [
    "CropBox",
    "CropLayout",
    "FusionPolicy",
    "plan_crops",
    "stochastic_fuse",
    "average_fuse",
    "fused_diffusion_loop",
    "refine_from_occupancy",
    "seam_statistics",
]

DEFAULT_CROP = 96
DEFAULT_OVERLAP = 32  # one third of the default crop


@dataclass(frozen=True)
class CropBox:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def contains(self, coords: np.ndarray) -> np.ndarray:
        o = np.asarray(self.origin)
        s = np.asarray(self.size)
        return ((coords >= o) & (coords < o + s)).all(axis=1)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.size) / 2.0


@dataclass(frozen=True)
class FusionPolicy:
    """Fusion mode plus the seed of the per-voxel selection stream."""

    mode: str = "stochastic"  # stochastic | average | independent
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("stochastic", "average", "independent"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")


def _axis_origins(extent: int, size: int, stride: int) -> list[int]:
    if extent <= size:
        return [0]
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)
    return origins


class CropLayout:
    """Crop boxes plus the per-voxel cover index over a scene mask.

    Every active voxel is covered by at least one crop; the cover arrays
    are CSR-style: voxel row -> slots -> (crop id, row within the crop).
    """

    def __init__(self, mask: OccupancyMask, boxes: list[CropBox]):
        self.mask = mask
        self.boxes = boxes
        self.crop_rows = []   # global row indices per crop, crop-local order
        n = len(mask)
        degree = np.zeros(n, dtype=np.int64)
        per_crop = []
        for box in boxes:
            rows = mask.intersect_box(box.origin, box.size)
            self.crop_rows.append(rows)
            per_crop.append(rows)
            degree[rows] += 1
        if (degree == 0).any():
            raise ValueError("coverage gap: active voxels outside every crop")
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(degree, out=self.indptr[1:])
        total = int(self.indptr[-1])
        self.cover_crop = np.empty(total, dtype=np.int32)
        self.cover_value_row = np.empty(total, dtype=np.int64)
        fill = self.indptr[:-1].copy()
        offset = 0
        for k, rows in enumerate(per_crop):
            slots = fill[rows]
            self.cover_crop[slots] = k
            self.cover_value_row[slots] = offset + np.arange(len(rows))
            fill[rows] += 1
            offset += len(rows)
        self.degree = degree
        self._region = None

    @property
    def n_crops(self) -> int:
        return len(self.boxes)

    def cover_count(self, row: int) -> int:
        return int(self.degree[row])

    def region_of_voxels(self) -> np.ndarray:
        """Owning crop per voxel: the nearest crop center, lowest id on ties.

        Defines the assembly regions for independent mode and the seam
        planes used by the discontinuity statistics.
        """
        if self._region is None:
            centers = np.stack([b.center for b in self.boxes])
            c = self.mask.coords.astype(np.float64) + 0.5
            d = np.linalg.norm(c[:, None, :] - centers[None], axis=2)
            nearest = np.argmin(d, axis=1)  # argmin takes the lowest id on ties
            # the nearest center's crop may not cover the voxel; fall back to
            # the covering crop with the nearest center
            region = np.empty(len(c), dtype=np.int64)
            for i in range(len(c)):
                slots = slice(self.indptr[i], self.indptr[i + 1])
                crops = self.cover_crop[slots]
                if nearest[i] in crops:
                    region[i] = nearest[i]
                else:
                    region[i] = crops[np.argmin(d[i, crops])]
            self._region = region
        return self._region


def plan_crops(mask: OccupancyMask, crop_size: int = DEFAULT_CROP,
               overlap: int = DEFAULT_OVERLAP) -> CropLayout:
    """Axis-aligned overlapping tiling of the scene's active set.

    Stride is crop_size - overlap with the last tile clamped to the
    boundary; crops without active voxels are dropped.  A scene smaller
    than the crop yields a single clamped crop.
    """
    if overlap >= crop_size:
        raise ValueError("overlap must be smaller than the crop size")
    ext = mask.extent
    sizes = tuple(min(crop_size, e) for e in ext.as_tuple())
    stride = crop_size - overlap
    axes = [_axis_origins(e, s, stride) for e, s in zip(ext.as_tuple(), sizes)]
    boxes = []
    for oi in axes[0]:
        for oj in axes[1]:
            for ok in axes[2]:
                box = CropBox((oi, oj, ok), sizes)
                if box.contains(mask.coords).any():
                    boxes.append(box)
    return CropLayout(mask, boxes)


# ---------------------------------------------------------------------------
# counter-based selection stream


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _selection_uniforms(layout: CropLayout, seed: int, t: int) -> np.ndarray:
    """One deterministic uniform per active voxel, keyed by (voxel, t, seed)."""
    with np.errstate(over="ignore"):
        key = layout.mask.keys.astype(np.uint64)
        salt = _splitmix64(np.uint64([seed & 0xFFFFFFFFFFFFFFFF]))[0]
        tkey = _splitmix64(np.uint64([np.uint64(t) + np.uint64(0x1234567)]))[0]
        u = _splitmix64(key ^ salt ^ tkey)
    return (u >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def stochastic_fuse(crop_feats: list[np.ndarray], layout: CropLayout,
                    policy: FusionPolicy, t: int) -> np.ndarray:
    """Per voxel, copy the value of one covering crop drawn uniformly.

    Keeps the per-voxel marginal distribution of the crops (the average
    would shrink the variance by the cover count).
    """
    values = np.concatenate([np.asarray(f) for f in crop_feats], axis=0)
    u = _selection_uniforms(layout, policy.seed, t)
    sel = np.minimum((u * layout.degree).astype(np.int64), layout.degree - 1)
    chosen = layout.indptr[:-1] + sel
    return values[layout.cover_value_row[chosen]]


def average_fuse(crop_feats: list[np.ndarray], layout: CropLayout) -> np.ndarray:
    """Arithmetic mean over the covering crops (ablation baseline)."""
    values = np.concatenate([np.asarray(f) for f in crop_feats], axis=0)
    n = len(layout.mask)
    out = np.zeros((n, values.shape[1]), dtype=np.float64)
    rows = np.repeat(np.arange(n), layout.degree)
    np.add.at(out, rows, values[layout.cover_value_row])
    out /= layout.degree[:, None]
    return out.astype(values.dtype)


# ---------------------------------------------------------------------------
# the joint reverse loop


class _CropState:
    def __init__(self, layout: CropLayout, k: int, scene: SparseVolume,
                 condition: SparseVolume | None):
        box = layout.boxes[k]
        rows = layout.crop_rows[k]
        self.rows = rows
        ext = GridExtent(*box.size)
        coords = scene.coords[rows] - np.asarray(box.origin, dtype=np.int32)
        self.volume = SparseVolume(ext, coords, scene.feats[rows], _sorted=True)
        self.condition = None
        if condition is not None:
            cond = SparseVolume(ext, coords, condition.feats[rows], _sorted=True)
            cond._mask = self.volume.mask()
            self.condition = cond
        self.t = None

    def write_back(self, global_feats: np.ndarray):
        self.volume = self.volume.with_feats(global_feats[self.rows])


def fused_diffusion_loop(denoiser, scene_mask: OccupancyMask,
                         condition: SparseVolume | None, layout: CropLayout,
                         schedule: NoiseSchedule, policy: FusionPolicy,
                         steps: int, rng: np.random.Generator,
                         method: str = "ddim",
                         clip: tuple[float, float] | None = None,
                         channels: int | None = None,
                         threads: int = 1) -> SparseVolume:
    """Reverse diffusion where each timestep runs per crop, then a fusion
    barrier synchronizes all crops.

    `independent` mode never synchronizes; the final volume is assembled
    from each voxel's owning crop, which exposes the seams this algorithm
    exists to remove.  Deterministic for a fixed seed regardless of
    `threads`.
    """
    if layout.mask is not scene_mask and not (layout.mask == scene_mask):
        raise ValueError("layout was planned for a different mask")
    if channels is None:
        channels = denoiser.spec.in_channels
    if condition is not None and not condition.same_mask(scene_mask):
        raise ValueError("condition must live on the scene mask")
    x = noise_like(scene_mask, channels, rng)
    states = [_CropState(layout, k, x, condition) for k in range(layout.n_crops)]
    crop_rngs = [np.random.default_rng([policy.seed, 7919, k])
                 for k in range(layout.n_crops)]

    if method == "ddim":
        taus = ddim_timesteps(schedule.T, steps)
        pairs = list(zip(taus[:-1], taus[1:]))
    elif method == "ddpm":
        pairs = [(t, t - 1) for t in range(schedule.T, 0, -1)]
    else:
        raise ValueError(f"unknown sampling method {method!r}")

    for s in states:
        s.t = schedule.T

    def step_crop(args):
        s, crop_rng, t, t_prev = args
        if s.t != t:
            raise ValueError("crop timestep out of sync with the barrier")
        eps = denoiser(s.volume, s.condition, schedule.alpha_bar_at(t))
        if method == "ddim":
            nxt = ddim_step(s.volume, t, t_prev, eps, schedule, clip=clip)
        else:
            nxt = ddpm_reverse_step(s.volume, t, eps, schedule, crop_rng)
        s.volume = nxt
        s.t = t_prev
        return s

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        feats = x.feats
        for t, t_prev in pairs:
            work = [(s, r, t, t_prev) for s, r in zip(states, crop_rngs)]
            if pool is not None:
                list(pool.map(step_crop, work))
            else:
                for w in work:
                    step_crop(w)
            if policy.mode == "independent":
                continue
            crop_feats = [s.volume.feats for s in states]
            ts = {s.t for s in states}
            if len(ts) != 1:
                raise ValueError("inconsistent crop timesteps at the barrier")
            if policy.mode == "stochastic":
                feats = stochastic_fuse(crop_feats, layout, policy, t_prev)
            else:
                feats = average_fuse(crop_feats, layout)
            for s in states:
                s.write_back(feats)
    finally:
        if pool is not None:
            pool.shutdown()

    if policy.mode == "independent":
        region = layout.region_of_voxels()
        feats = np.empty((len(scene_mask), channels), dtype=np.float32)
        for k, s in enumerate(states):
            own = region[s.rows] == k
            feats[s.rows[own]] = s.volume.feats[own]
    if method == "ddpm" and clip is not None:
        feats = np.clip(feats, clip[0], clip[1])
    return SparseVolume.on_mask(scene_mask, np.asarray(feats, dtype=np.float32))


def refine_from_occupancy(occupancy: OccupancyMask,
                          tsdf_condition: SparseVolume | None,
                          denoiser, schedule: NoiseSchedule,
                          policy: FusionPolicy, steps: int,
                          rng: np.random.Generator,
                          crop_size: int = DEFAULT_CROP,
                          overlap: int = DEFAULT_OVERLAP,
                          method: str = "ddim",
                          clip: tuple[float, float] | None = (-3.0, 3.0),
                          threads: int = 1) -> SparseVolume:
    """Generate TSDF values on a given occupancy, optionally conditioned on
    an existing (e.g. multi-view-stereo) TSDF volume on the same mask."""
    if len(occupancy) == 0:
        raise ValueError("occupancy is empty")
    expected = denoiser.spec.cond_channels
    if tsdf_condition is None:
        if expected != 0:
            raise ValueError("denoiser expects condition channels")
    else:
        if not tsdf_condition.same_mask(occupancy):
            raise ValueError("condition mask does not match the occupancy")
        if expected != tsdf_condition.channels:
            raise ValueError("condition channels do not match the denoiser")
    layout = plan_crops(occupancy, crop_size, overlap)
    return fused_diffusion_loop(denoiser, occupancy, tsdf_condition, layout,
                                schedule, policy, steps, rng, method=method,
                                clip=clip, threads=threads)


# ---------------------------------------------------------------------------
# seam statistics


def seam_statistics(volume: SparseVolume, layout: CropLayout) -> dict:
    """Absolute neighbor differences across crop-region boundaries vs within
    regions; large seam/intra gaps indicate visible crop seams."""
    region = layout.region_of_voxels()
    keys = volume.keys
    seam = []
    intra = []
    ext = volume.extent
    offsets = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.int32)
    from .grids import linear_keys, lookup_rows
    for off in offsets:
        nb = volume.coords + off
        inb = ext.contains(nb)
        rows = np.nonzero(inb)[0]
        nb_rows, found = lookup_rows(keys, linear_keys(nb[inb], ext))
        rows = rows[found]
        nb_rows = nb_rows[found]
        diffs = np.abs(volume.feats[rows] - volume.feats[nb_rows]).mean(axis=1)
        crossing = region[rows] != region[nb_rows]
        seam.append(diffs[crossing])
        intra.append(diffs[~crossing])
    seam = np.concatenate(seam) if seam else np.zeros(0)
    intra = np.concatenate(intra) if intra else np.zeros(0)

    def stats(arr):
        if len(arr) == 0:
            return {"mean": 0.0, "p99": 0.0, "count": 0}
        return {"mean": float(arr.mean()), "p99": float(np.quantile(arr, 0.99)),
                "count": int(len(arr))}

    return {"seam": stats(seam), "intra": stats(intra)}
