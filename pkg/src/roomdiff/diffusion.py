"""Masked denoising diffusion on sparse volumes.

The forward process perturbs data on the active set only:

    q(v_t | v_0) = N(sqrt(abar_t) v_0, (1 - abar_t) I)   on active voxels,

with abar_t the cumulative product of alpha_t = 1 - beta_t.  The denoiser
predicts the added noise; the reverse chain runs either as stochastic
ancestral sampling (fixed variance beta_t) or as the deterministic DDIM
update over a strided timestep subsequence.  The network is conditioned on
abar_t itself (not the integer step), so schedules and step counts can be
retuned at inference without retraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sparse_ops as ops
from .autodiff import Adam, Module, Tensor, concat_cols, silu
from .errors import NumericalError
from .grids import OccupancyMask, SparseVolume
from .nn import AttentionBlock, ConvLayer, GroupNormLayer, Linear, ResBlock, conv_param

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "make_cosine_schedule",
    "DiffusionSample",
    "q_sample",
    "ddpm_reverse_step",
    "ddim_step",
    "ddim_timesteps",
    "masked_mse_loss",
    "alpha_embedding",
    "DenoiserSpec",
    "Denoiser",
    "train_step",
    "sample",
    "noise_like",
]


# ---------------------------------------------------------------------------
# noise schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t plus derived alpha / cumulative tables."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty 1-d array")
        if (beta <= 0).any() or (beta >= 1).any():
            raise ValueError("beta values must lie in (0, 1)")
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """abar_t with the t = 0 convention abar_0 = 1 (clean data)."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_linear_schedule(T: int = 2000, beta_start: float = 1e-6,
                         beta_end: float = 0.01) -> NoiseSchedule:
    """Linearly spaced beta_t, endpoints inclusive."""
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    beta = np.full(1, beta_start) if T == 1 else np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(beta)


def make_cosine_schedule(T: int = 2000, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine abar profile with offset s; beta clipped to <= 0.999."""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    abar = f / f[0]
    beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)
    return NoiseSchedule(beta)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending timestep subsequence with uniform stride, ending at 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stride = max(T // steps, 1)
    taus = list(range(T, 0, -stride))
    taus.append(0)
    return taus


# ---------------------------------------------------------------------------
# forward / reverse steps


@dataclass
class DiffusionSample:
    """A diffused volume with its mask and optional condition channels."""

    volume: SparseVolume
    mask: OccupancyMask
    condition: SparseVolume | None = None

    def __post_init__(self):
        if not self.volume.same_mask(self.mask):
            raise ValueError("volume active set must equal the mask")
        if self.condition is not None and not self.condition.same_mask(self.mask):
            raise ValueError("condition active set must equal the mask")


def noise_like(mask: OccupancyMask, channels: int, rng: np.random.Generator) -> SparseVolume:
    """I.i.d. standard-normal features on the mask's active set."""
    return SparseVolume.on_mask(
        mask, rng.standard_normal((len(mask), channels)).astype(np.float32))


def q_sample(x0: SparseVolume, t: int, noise: SparseVolume,
             schedule: NoiseSchedule) -> SparseVolume:
    """Closed-form forward marginal sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    if not x0.same_mask(noise):
        raise ValueError("noise must share the volume's active set")
    abar = schedule.alpha_bar_at(t)
    feats = np.sqrt(abar) * x0.feats + np.sqrt(1.0 - abar) * noise.feats
    return x0.with_feats(feats.astype(x0.feats.dtype))


def ddpm_reverse_step(xt: SparseVolume, t: int, eps_pred: SparseVolume,
                      schedule: NoiseSchedule, rng: np.random.Generator) -> SparseVolume:
    """Ancestral step: mean from the predicted noise, variance beta_t.

    No noise is added at t = 1 (the step onto clean data).
    """
    if t < 1:
        raise ValueError("reverse step requires t >= 1")
    if not xt.same_mask(eps_pred):
        raise ValueError("eps_pred must share the volume's active set")
    beta = float(schedule.beta[t - 1])
    alpha = 1.0 - beta
    abar = schedule.alpha_bar_at(t)
    mean = (xt.feats - beta / np.sqrt(1.0 - abar) * eps_pred.feats) / np.sqrt(alpha)
    if t > 1:
        mean = mean + np.sqrt(beta) * rng.standard_normal(mean.shape)
    return xt.with_feats(mean.astype(xt.feats.dtype))


def ddim_step(xt: SparseVolume, t: int, t_prev: int, eps_pred: SparseVolume,
              schedule: NoiseSchedule, clip: tuple[float, float] | None = None
              ) -> SparseVolume:
    """Deterministic (eta = 0) update: estimate x0, re-noise to abar_{t_prev}."""
    if t_prev > t:
        raise ValueError("t_prev must not exceed t")
    if not xt.same_mask(eps_pred):
        raise ValueError("eps_pred must share the volume's active set")
    abar_t = schedule.alpha_bar_at(t)
    abar_p = schedule.alpha_bar_at(t_prev)
    x0 = (xt.feats - np.sqrt(1.0 - abar_t) * eps_pred.feats) / np.sqrt(abar_t)
    if clip is not None:
        x0 = np.clip(x0, clip[0], clip[1])
    out = np.sqrt(abar_p) * x0 + np.sqrt(1.0 - abar_p) * eps_pred.feats
    return xt.with_feats(out.astype(xt.feats.dtype))


def masked_mse_loss(eps_true: SparseVolume, eps_pred, mask: OccupancyMask | None = None):
    """Mean squared error over active voxels x channels.

    Accepts the prediction either as a SparseVolume (returns a float) or as
    an autodiff Tensor of features (returns a scalar Tensor whose gradient
    flows to the prediction only).
    """
    if mask is not None and not eps_true.same_mask(mask):
        raise ValueError("eps_true does not live on the given mask")
    if eps_true.n_active == 0:
        raise ValueError("loss over an empty mask")
    if isinstance(eps_pred, SparseVolume):
        if not eps_true.same_mask(eps_pred):
            raise ValueError("prediction mask mismatch")
        diff = eps_pred.feats.astype(np.float64) - eps_true.feats.astype(np.float64)
        return float(np.mean(diff * diff))
    pred: Tensor = eps_pred
    if pred.data.shape != eps_true.feats.shape:
        raise ValueError("prediction shape mismatch")
    target = eps_true.feats
    diff = pred.data - target
    n = diff.size

    def bwd(g):
        return (g * 2.0 * diff / n,)

    return Tensor(np.asarray(np.mean(diff * diff)), (pred,), bwd)


# ---------------------------------------------------------------------------
# alpha conditioning


def alpha_embedding(alpha_bar: float, dim: int) -> np.ndarray:
    """Sinusoidal features of a monotone transform of abar (the step proxy)."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in (0, 1]")
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    u = 1000.0 * (1.0 - alpha_bar)
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = (1.0 / 10000.0) ** exponents
    ang = u * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


# ---------------------------------------------------------------------------
# denoiser network


@dataclass(frozen=True)
class DenoiserSpec:
    """Toy UNet configuration over the sparse kernel taxonomy."""

    in_channels: int
    cond_channels: int = 0
    channels: tuple[int, ...] = (16, 32)
    blocks_per_level: int = 1
    attention_levels: tuple[int, ...] = ()
    heads: int = 2
    emb_dim: int = 16
    kernel_size: int = 3
    attention_cap: int = ops.ATTENTION_CAP

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "cond_channels": self.cond_channels,
            "channels": list(self.channels),
            "blocks_per_level": self.blocks_per_level,
            "attention_levels": list(self.attention_levels),
            "heads": self.heads,
            "emb_dim": self.emb_dim,
            "kernel_size": self.kernel_size,
            "attention_cap": self.attention_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


class Denoiser(Module):
    """UNet-like noise predictor on a fixed active set.

    Levels below the input resolution use maxpooled masks; the up path
    returns to each finer mask through transposed convolutions and additive
    skip connections, so the output active set always equals the input's.
    """

    def __init__(self, spec: DenoiserSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        k = spec.kernel_size
        cin = spec.in_channels + spec.cond_channels
        chans = spec.channels
        self.conv_in = ConvLayer(rng, k, cin, chans[0])
        self.emb_mlp = Linear(rng, spec.emb_dim, spec.emb_dim)
        self.down_blocks = []
        self.downs = []
        self.attn_blocks = []
        for lvl, c in enumerate(chans):
            blocks = [ResBlock(rng, c, spec.emb_dim, k)
                      for _ in range(spec.blocks_per_level)]
            self.down_blocks.append(blocks)
            self.attn_blocks.append(
                AttentionBlock(rng, c, spec.heads, spec.attention_cap)
                if lvl in spec.attention_levels else None)
            if lvl + 1 < len(chans):
                self.downs.append(conv_param(rng, 2, c, chans[lvl + 1]))
        self.mid_block = ResBlock(rng, chans[-1], spec.emb_dim, k)
        self.ups = []
        self.up_blocks = []
        for lvl in range(len(chans) - 2, -1, -1):
            self.ups.append(conv_param(rng, 2, chans[lvl + 1], chans[lvl]))
            self.up_blocks.append([ResBlock(rng, chans[lvl], spec.emb_dim, k)
                                   for _ in range(spec.blocks_per_level)])
        self.norm_out = GroupNormLayer(chans[0])
        self.conv_out = ConvLayer(rng, k, chans[0], spec.in_channels, zero_init=True)

    # -- internal -------------------------------------------------------

    def _level_masks(self, mask: OccupancyMask) -> list[OccupancyMask]:
        masks = [mask]
        for _ in range(len(self.spec.channels) - 1):
            masks.append(masks[-1].maxpool(2))
        return masks

    def forward(self, volume: SparseVolume, condition: SparseVolume | None,
                alpha_bar: float) -> Tensor:
        spec = self.spec
        if volume.channels != spec.in_channels:
            raise ValueError("volume channel count does not match the spec")
        if spec.cond_channels:
            if condition is None or condition.channels != spec.cond_channels:
                raise ValueError("condition channels do not match the spec")
            if not volume.same_mask(condition):
                raise ValueError("condition must share the volume's mask")
            x = concat_cols([Tensor(volume.feats), Tensor(condition.feats)])
        else:
            if condition is not None:
                raise ValueError("denoiser is unconditional")
            x = Tensor(volume.feats)
        masks = self._level_masks(volume.mask())
        plans = [ops.ConvPlan.cached(m, spec.kernel_size) for m in masks]
        emb = silu(self.emb_mlp(Tensor(alpha_embedding(alpha_bar, spec.emb_dim))))

        h = self.conv_in(x, plans[0])
        skips = []
        for lvl in range(len(spec.channels)):
            for block in self.down_blocks[lvl]:
                h = block(h, plans[lvl], emb)
            if self.attn_blocks[lvl] is not None:
                h = self.attn_blocks[lvl](h)
            skips.append(h)
            if lvl + 1 < len(spec.channels):
                dplan = ops.DownsamplePlan.cached(masks[lvl], 2)
                h = ops.downsample_node(h, self.downs[lvl], dplan)
        h = self.mid_block(h, plans[-1], emb)
        for i, lvl in enumerate(range(len(spec.channels) - 2, -1, -1)):
            uplan = ops.UpsamplePlan.cached(masks[lvl + 1], 2, masks[lvl])
            h = ops.upsample_node(h, self.ups[i], uplan) + skips[lvl]
            for block in self.up_blocks[i]:
                h = block(h, plans[lvl], emb)
        out = self.conv_out(silu(self.norm_out(h)), plans[0])
        return out

    def __call__(self, volume: SparseVolume, condition: SparseVolume | None,
                 alpha_bar: float) -> SparseVolume:
        out = self.forward(volume, condition, alpha_bar)
        return volume.with_feats(out.data)


# ---------------------------------------------------------------------------
# training and sampling


def train_step(batch: list[DiffusionSample], denoiser: Denoiser,
               schedule: NoiseSchedule, optimizer: Adam,
               rng: np.random.Generator) -> float:
    """One Adam update on the masked noise-prediction loss.

    Timesteps are drawn uniformly per sample; a non-finite loss aborts the
    step without touching the parameters.
    """
    if not batch:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    total = 0.0
    for item in batch:
        t = int(rng.integers(1, schedule.T + 1))
        noise = noise_like(item.mask, item.volume.channels, rng)
        xt = q_sample(item.volume, t, noise, schedule)
        pred = denoiser.forward(xt, item.condition, schedule.alpha_bar_at(t))
        loss = masked_mse_loss(noise, pred)
        if not np.isfinite(loss.data):
            raise NumericalError("non-finite diffusion loss; step aborted")
        # seed the batch-mean scale directly; a python-float multiply would
        # promote the whole backward pass to float64
        loss.backward(np.asarray(1.0 / len(batch), dtype=loss.dtype))
        total += loss.item()
    optimizer.step()
    return total / len(batch)


def sample(denoiser, mask: OccupancyMask, condition: SparseVolume | None,
           schedule: NoiseSchedule, steps: int, rng: np.random.Generator,
           method: str = "ddim", clip: tuple[float, float] | None = None,
           channels: int | None = None) -> SparseVolume:
    """Draw a volume on `mask`, starting from Gaussian noise.

    `denoiser` is any callable (volume, condition, alpha_bar) -> SparseVolume.
    With steps = 0 the initial noise is returned unchanged.  The active set
    of every intermediate equals `mask` by construction.
    """
    if len(mask) == 0:
        raise ValueError("cannot sample on an empty mask")
    if channels is None:
        channels = denoiser.spec.in_channels
    x = noise_like(mask, channels, rng)
    if steps == 0:
        return x
    if condition is not None and not condition.same_mask(mask):
        raise ValueError("condition must live on the sampling mask")
    if method == "ddim":
        taus = ddim_timesteps(schedule.T, steps)
        for t, t_prev in zip(taus[:-1], taus[1:]):
            eps = denoiser(x, condition, schedule.alpha_bar_at(t))
            x = ddim_step(x, t, t_prev, eps, schedule, clip=clip)
    elif method == "ddpm":
        for t in range(schedule.T, 0, -1):
            eps = denoiser(x, condition, schedule.alpha_bar_at(t))
            x = ddpm_reverse_step(x, t, eps, schedule, rng)
        if clip is not None:
            x = x.with_feats(np.clip(x.feats, clip[0], clip[1]))
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return x
