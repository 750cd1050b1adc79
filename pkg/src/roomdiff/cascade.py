"""Three-stage coarse-to-fine scene sampling.

Stage 1 draws the coarsest occupancy latent on a user-provided mask,
stage 2 draws the finer latent on the mask decoded from stage 1, and
stage 3 draws the TSDF on the full-resolution decoded mask, conditioned on
both latents.  Masks flow between stages exclusively through the occupancy
decoders, so a degenerate layout is caught (and aborts generation) before
any expensive stage runs.

Latents are standardized per channel (statistics collected from the
training set and stored in each stage checkpoint) so the diffusion prior
always sees unit-scale data; samples are mapped back and snapped to the
codebook before decoding or conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam
from .diffusion import (Denoiser, DenoiserSpec, DiffusionSample, NoiseSchedule,
                        make_cosine_schedule, make_linear_schedule, sample,
                        train_step)
from .errors import DegenerateLayoutError
from .fusion import FusionPolicy, fused_diffusion_loop, plan_crops
from .geometry import TriangleMesh, TsdfVolume, marching_cubes
from .grids import GridExtent, OccupancyMask, SparseVolume
from .vq import LatentVolume, OccupancyVq, quantize

__all__ = [
    "LatentStats",
    "StageConfig",
    "CascadeConfig",
    "StageArtifacts",
    "stage1_sample",
    "stage2_sample",
    "stage3_sample",
    "generate_scene",
    "encode_training_latents",
    "latent_statistics",
    "train_stage",
]

SCENE_EXTENT_CAP = (512, 512, 128)
MASK_THRESHOLD = 0.5
DEGENERATE_RATE = 1e-3   # decoded-occupancy rate below this aborts the run
CLIP_INSET = 1e-3        # sampled TSDF kept strictly inside the clamp band


@dataclass(frozen=True)
class LatentStats:
    """Per-channel standardization of the quantized latents."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std).astype(np.float32)

    def denormalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats * self.std + self.mean).astype(np.float32)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32))


def make_schedule(kind: str, T: int, beta_start: float = 1e-6,
                  beta_end: float = 0.01) -> NoiseSchedule:
    if kind == "cosine":
        return make_cosine_schedule(T)
    if kind == "linear":
        return make_linear_schedule(T, beta_start, beta_end)
    raise ValueError(f"unknown schedule {kind!r}")


@dataclass
class StageConfig:
    denoiser_spec: DenoiserSpec
    schedule: NoiseSchedule
    sample_steps: int
    method: str = "ddim"


@dataclass
class CascadeConfig:
    """Everything needed to run the three stages end to end."""

    vq: OccupancyVq
    stages: dict  # {1: (Denoiser, StageConfig, LatentStats|None), ...}
    mask_threshold: float = MASK_THRESHOLD
    crop_size: int = 96
    overlap: int = 32
    extent_cap: tuple[int, int, int] = SCENE_EXTENT_CAP

    def stage(self, n: int):
        return self.stages[n]


@dataclass
class StageArtifacts:
    z1: LatentVolume
    z2: LatentVolume
    mask_z1: OccupancyMask
    mask_z2: OccupancyMask
    mask_x: OccupancyMask
    tsdf: SparseVolume
    mesh: TriangleMesh | None = None


def _threshold_mask(logits: SparseVolume, threshold: float) -> OccupancyMask:
    logit_thr = float(np.log(threshold / (1.0 - threshold)))
    keep = logits.feats[:, 0] > logit_thr
    return OccupancyMask(logits.extent, logits.coords[keep], _sorted=True)


def _check_degenerate(mask: OccupancyMask, capacity: int, stage: str):
    if len(mask) < max(1, int(DEGENERATE_RATE * capacity)):
        raise DegenerateLayoutError(
            f"{stage}: decoded occupancy rate {len(mask)}/{capacity} "
            f"below {DEGENERATE_RATE:.0e}; stopping generation early")


def _snap_to_codebook(vq: OccupancyVq, vol: SparseVolume, level: int) -> LatentVolume:
    snapped, idx = quantize(vol, vq.codebook)
    return LatentVolume(level, snapped, idx)


def stage1_sample(config: CascadeConfig, mask_z1: OccupancyMask,
                  rng: np.random.Generator) -> LatentVolume:
    """Unconditional draw of the coarsest latent on a user-chosen mask."""
    if len(mask_z1) == 0:
        raise ValueError("stage-1 mask is empty")
    den, stage_cfg, stats = config.stage(1)
    z_hat = sample(den, mask_z1, None, stage_cfg.schedule, stage_cfg.sample_steps,
                   rng, method=stage_cfg.method)
    z = z_hat.with_feats(stats.denormalize(z_hat.feats))
    return _snap_to_codebook(config.vq, z, level=1)


def stage2_sample(config: CascadeConfig, z1: LatentVolume,
                  rng: np.random.Generator) -> LatentVolume:
    """Decode M_z2 from z1, then draw the finer latent conditioned on z1."""
    logits = config.vq.decode_mask_level1(z1)
    mask_z2 = _threshold_mask(logits, config.mask_threshold)
    _check_degenerate(mask_z2, 8 * z1.volume.n_active, "stage 2")
    den, stage_cfg, stats = config.stage(2)
    _, _, stats1 = config.stage(1)
    cond = z1.volume.with_feats(stats1.normalize(z1.volume.feats))
    cond_up = cond.nn_upsample(2, mask_z2)
    z_hat = sample(den, mask_z2, cond_up, stage_cfg.schedule,
                   stage_cfg.sample_steps, rng, method=stage_cfg.method)
    z = z_hat.with_feats(stats.denormalize(z_hat.feats))
    return _snap_to_codebook(config.vq, z, level=2)


def _latent_condition(config: CascadeConfig, z1: LatentVolume, z2: LatentVolume,
                      mask_x: OccupancyMask) -> SparseVolume:
    _, _, stats1 = config.stage(1)
    _, _, stats2 = config.stage(2)
    z1n = z1.volume.with_feats(stats1.normalize(z1.volume.feats))
    z2n = z2.volume.with_feats(stats2.normalize(z2.volume.feats))
    # chain through the intermediate grid so parent checks stay local
    mid = z2n.mask()
    up1 = z1n.nn_upsample(2, mid).nn_upsample(4, mask_x)
    up2 = z2n.nn_upsample(4, mask_x)
    return SparseVolume.on_mask(mask_x,
                                np.concatenate([up1.feats, up2.feats], axis=1))


def stage3_sample(config: CascadeConfig, z1: LatentVolume, z2: LatentVolume,
                  rng: np.random.Generator,
                  fusion: FusionPolicy | None = None,
                  threads: int = 1) -> tuple[SparseVolume, OccupancyMask]:
    """Draw the TSDF on the decoded full-resolution mask.

    Scenes larger than the crop size run the joint crop-fusion loop;
    smaller scenes sample directly.  Values are clipped to the normalized
    truncation band (kept strictly inside so file round trips preserve the
    active set).
    """
    occ_logits, _ = config.vq.decode_mask_level2(z1, z2)
    mask_x = _threshold_mask(occ_logits, config.mask_threshold)
    _check_degenerate(mask_x, 64 * z2.volume.n_active, "stage 3")
    den, stage_cfg, _ = config.stage(3)
    cond = _latent_condition(config, z1, z2, mask_x)
    clip = (-3.0 + CLIP_INSET, 3.0 - CLIP_INSET)
    ext = mask_x.extent.as_tuple()
    fusion = fusion or FusionPolicy("stochastic", 0)
    if all(e <= config.crop_size for e in ext):
        x = sample(den, mask_x, cond, stage_cfg.schedule, stage_cfg.sample_steps,
                   rng, method=stage_cfg.method, clip=clip)
        x = x.with_feats(np.clip(x.feats, clip[0], clip[1]))
    else:
        layout = plan_crops(mask_x, config.crop_size, config.overlap)
        x = fused_diffusion_loop(den, mask_x, cond, layout, stage_cfg.schedule,
                                 fusion, stage_cfg.sample_steps, rng,
                                 method=stage_cfg.method, clip=clip,
                                 threads=threads)
        x = x.with_feats(np.clip(x.feats, clip[0], clip[1]))
    return x, mask_x


def generate_scene(config: CascadeConfig, extent, seed: int,
                   mask_z1: OccupancyMask | None = None,
                   fusion_mode: str = "stochastic",
                   threads: int = 1,
                   voxel_size: float = 0.04,
                   truncation: float = 0.12) -> StageArtifacts:
    """Full three-stage generation; deterministic given the seed."""
    ext = GridExtent(*extent)
    cap = config.extent_cap
    if ext.h > cap[0] or ext.w > cap[1] or ext.l > cap[2]:
        raise ValueError(f"extent {extent} exceeds the scene cap {cap}")
    if ext.h % 8 or ext.w % 8 or ext.l % 8:
        raise ValueError("scene extent must be divisible by 8")
    if mask_z1 is None:
        mask_z1 = OccupancyMask.full(ext.downsampled(8))
    rng1 = np.random.default_rng([seed, 1])
    rng2 = np.random.default_rng([seed, 2])
    rng3 = np.random.default_rng([seed, 3])
    z1 = stage1_sample(config, mask_z1, rng1)
    z2 = stage2_sample(config, z1, rng2)
    policy = FusionPolicy(fusion_mode, seed)
    x, mask_x = stage3_sample(config, z1, z2, rng3, fusion=policy, threads=threads)
    tsdf = TsdfVolume(x, voxel_size, truncation)
    mesh = marching_cubes(tsdf)
    return StageArtifacts(z1=z1, z2=z2, mask_z1=mask_z1, mask_z2=z2.mask,
                          mask_x=mask_x, tsdf=x, mesh=mesh)


# ---------------------------------------------------------------------------
# stage training


def encode_training_latents(vq: OccupancyVq, volumes: list[SparseVolume]):
    """Hard-quantized latent pairs of every training volume."""
    return [vq.encode_latents(v) for v in volumes]


def latent_statistics(latents: list[LatentVolume]) -> LatentStats:
    feats = np.concatenate([lv.volume.feats for lv in latents], axis=0)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std < 1e-4, 1.0, std)
    return LatentStats(mean.astype(np.float32), std.astype(np.float32))


def _stage_samples(stage: int, vq: OccupancyVq, volumes: list[SparseVolume],
                   latents, stats1: LatentStats | None,
                   stats2: LatentStats | None,
                   condition_mode: str = "latents"):
    """DiffusionSample list for one stage over the training set."""
    samples = []
    for vol, (z1, z2) in zip(volumes, latents):
        if stage == 1:
            feats = stats1.normalize(z1.volume.feats)
            v = z1.volume.with_feats(feats)
            samples.append(DiffusionSample(v, v.mask()))
        elif stage == 2:
            v = z2.volume.with_feats(stats2.normalize(z2.volume.feats))
            cond = z1.volume.with_feats(stats1.normalize(z1.volume.feats))
            cond = cond.nn_upsample(2, v.mask())
            samples.append(DiffusionSample(v, v.mask(), cond))
        else:
            mask_x = vol.mask()
            if condition_mode == "latents":
                mid = z2.volume.mask()
                up1 = z1.volume.with_feats(stats1.normalize(z1.volume.feats)) \
                    .nn_upsample(2, mid).nn_upsample(4, mask_x)
                up2 = z2.volume.with_feats(stats2.normalize(z2.volume.feats)) \
                    .nn_upsample(4, mask_x)
                cond = SparseVolume.on_mask(
                    mask_x, np.concatenate([up1.feats, up2.feats], axis=1))
            elif condition_mode == "tsdf":
                cond = vol
            else:
                cond = None
            samples.append(DiffusionSample(vol, mask_x, cond))
    return samples


def train_stage(stage: int, vq: OccupancyVq, volumes: list[SparseVolume],
                spec: DenoiserSpec, schedule: NoiseSchedule, steps: int,
                lr: float = 1e-4, lr_final: float | None = None,
                batch_size: int = 1, seed: int = 0,
                condition_mode: str = "latents",
                denoiser: Denoiser | None = None,
                log_every: int = 0, log=print):
    """Train one diffusion stage on pre-encoded latents / TSDF volumes.

    Returns (denoiser, stats1, stats2, loss_history).  Pass an existing
    denoiser to resume training; `lr_final` turns on cosine decay.
    """
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    latents = encode_training_latents(vq, volumes)
    stats1 = latent_statistics([z1 for z1, _ in latents])
    stats2 = latent_statistics([z2 for _, z2 in latents])
    samples = _stage_samples(stage, vq, volumes, latents, stats1, stats2,
                             condition_mode)
    rng = np.random.default_rng(seed)
    den = denoiser or Denoiser(spec, seed=seed)
    opt = Adam(den.parameters(), lr=lr)
    history = []
    for step in range(steps):
        if lr_final is not None and steps > 1:
            frac = step / (steps - 1)
            opt.lr = lr_final + (lr - lr_final) * 0.5 * (1 + np.cos(np.pi * frac))
        idx = rng.integers(0, len(samples), size=batch_size)
        batch = [samples[i] for i in idx]
        loss = train_step(batch, den, schedule, opt, rng)
        history.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log(f"stage {stage} step {step + 1}/{steps} loss {loss:.4f}")
    return den, stats1, stats2, history
