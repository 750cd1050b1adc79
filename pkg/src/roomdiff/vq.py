"""Multi-scale vector-quantized occupancy autoencoder.

A TSDF crop x on its active set M_x is encoded progressively into two
discrete latent volumes: z2 on the 4x-maxpooled mask and z1 on the
8x-maxpooled mask.  Two decoders invert the hierarchy mask-first:

    G1(z1, M_z1)      -> occupancy logits for the 2^3 children of every
                         active z1 cell (the predicted M_z2);
    G2(z1, z2, M_z2)  -> occupancy logits and TSDF values for the 4^3
                         children of every active z2 cell (the predicted
                         M_x and the reconstruction x_hat).

Because logits exist only under active parents, thresholded masks respect
parent/child containment by construction, and dense supervision inside the
crop reduces exactly to supervision on the children slots (every voxel
outside them is structurally negative with zero loss).

Quantization runs either as nearest-neighbour lookup with straight-through
gradients or as Gumbel-Softmax relaxation over codebook logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sparse_ops as ops
from .autodiff import (Adam, Module, Parameter, Tensor, concat_cols,
                       gather_rows, relu, scatter_rows, silu)
from .errors import NumericalError
from .grids import GridExtent, OccupancyMask, SparseVolume, linear_keys, lookup_rows
from .nn import ConvLayer, GroupNormLayer, ResBlock, conv_param

__all__ = [
    "Codebook",
    "LatentVolume",
    "VqSpec",
    "VqLossWeights",
    "quantize",
    "gumbel_quantize",
    "OccupancyVq",
    "PatchDiscriminator",
    "vqgan_loss",
    "VqTrainer",
    "expand_children",
    "mask_iou",
]

LEVEL1_STRIDE = 8   # z1 lives on the 8x-maxpooled grid
LEVEL2_STRIDE = 4   # z2 one octave finer


class Codebook(Module):
    """K x d table of discrete latent embeddings."""

    def __init__(self, size: int, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = Parameter(rng.standard_normal((size, dim)))

    @property
    def size(self) -> int:
        return self.table.data.shape[0]

    @property
    def dim(self) -> int:
        return self.table.data.shape[1]


@dataclass
class LatentVolume:
    """Quantized latent at one hierarchy level."""

    level: int  # 1 (coarsest) or 2
    volume: SparseVolume
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.level not in (1, 2):
            raise ValueError("level must be 1 or 2")
        if self.indices is not None and len(self.indices) != self.volume.n_active:
            raise ValueError("one codebook index per active voxel")

    @property
    def mask(self) -> OccupancyMask:
        return self.volume.mask()


@dataclass(frozen=True)
class VqLossWeights:
    """lambda_1 scales the quantizer loss, lambda_2 the adversarial loss."""

    vq: float = 1.0
    gan: float = 0.2
    adaptive_gan: bool = True

    def __post_init__(self):
        if self.vq < 0 or self.gan < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# quantizers


def nearest_indices(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Per-row nearest codebook entry; ties resolve to the lowest index."""
    d2 = (np.square(z).sum(axis=1, keepdims=True)
          - 2.0 * z @ table.T
          + np.square(table).sum(axis=1))
    return np.argmin(d2, axis=1)


def quantize(z_pre, codebook: Codebook):
    """Nearest-neighbour quantization with straight-through gradients.

    SparseVolume in -> (LatentVolume-ready SparseVolume, indices).
    Tensor in -> (Tensor whose backward passes through unchanged, indices).
    """
    if isinstance(z_pre, SparseVolume):
        idx = nearest_indices(z_pre.feats, codebook.table.data)
        zq = codebook.table.data[idx].astype(z_pre.feats.dtype)
        return z_pre.with_feats(zq), idx
    z: Tensor = z_pre
    idx = nearest_indices(z.data, codebook.table.data)
    zq = codebook.table.data[idx].astype(z.data.dtype)
    return Tensor(zq, (z,), lambda g: (g,)), idx


def gumbel_quantize(logits, codebook: Codebook, temperature: float,
                    rng: np.random.Generator | None = None, hard: bool = False):
    """Gumbel-Softmax relaxed codebook selection.

    Soft mode (training) perturbs the logits with Gumbel noise and mixes
    codebook entries by the tempered softmax; hard mode (inference) takes
    the noise-free argmax.  Returns (embedding, indices, assignment).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    is_tensor = isinstance(logits, Tensor)
    raw = logits.data if is_tensor else logits.feats
    if raw.shape[1] != codebook.size:
        raise ValueError("logit channels must equal the codebook size")
    if hard:
        idx = np.argmax(raw, axis=1)
        emb = codebook.table.data[idx].astype(raw.dtype)
        if is_tensor:
            return Tensor(emb), idx, None
        return logits.with_feats(emb), idx, None
    if rng is None:
        raise ValueError("soft sampling needs an rng")
    noise = rng.gumbel(size=raw.shape)
    noisy = (raw + noise) / temperature
    noisy = noisy - noisy.max(axis=1, keepdims=True)
    expn = np.exp(noisy)
    soft = expn / expn.sum(axis=1, keepdims=True)
    idx = np.argmax(noisy, axis=1)
    if not is_tensor:
        emb = (soft @ codebook.table.data).astype(raw.dtype)
        return logits.with_feats(emb), idx, soft

    def bwd(g):
        # d soft / d logits of the tempered softmax (noise is constant)
        inner = g - (g * soft).sum(axis=1, keepdims=True)
        return (soft * inner / temperature,)

    soft_t = Tensor(soft, (logits,), bwd)
    return soft_t @ codebook.table, idx, soft_t


# ---------------------------------------------------------------------------
# children expansion


def children_layout(parent_mask: OccupancyMask, factor: int):
    """Sorted child mask of all factor^3 children plus the row permutation
    mapping sorted child rows back to (parent_row * factor^3 + slot)."""
    key = ("children", factor)
    cached = parent_mask._plan_cache.get(key)
    if cached is not None:
        return cached
    ext = parent_mask.extent.scaled(factor)
    offsets = ops.kernel_offsets(factor, centered=False)
    n = len(parent_mask)
    coords = (parent_mask.coords[:, None, :] * factor + offsets[None, :, :])
    coords = coords.reshape(n * factor ** 3, 3)
    order = np.argsort(linear_keys(coords, ext), kind="stable")
    child_mask = OccupancyMask(ext, coords[order], _sorted=True)
    result = (child_mask, order)
    parent_mask._plan_cache[key] = result
    return result


def expand_children(values: Tensor, parent_mask: OccupancyMask, factor: int,
                    channels: int = 1):
    """Reshape per-parent children channels to rows of the child grid.

    values has factor^3 * channels columns, laid out slot-major; the result
    is (n_parents * factor^3, channels) in the child mask's canonical order.
    """
    child_mask, order = children_layout(parent_mask, factor)
    n = values.data.shape[0]
    flat = values.reshape(n * factor ** 3, channels)
    return gather_rows(flat, order), child_mask


def rows_in_mask(child_mask: OccupancyMask, sub: OccupancyMask) -> np.ndarray:
    rows, found = lookup_rows(child_mask.keys, sub.keys)
    if not found.all():
        raise ValueError("mask voxels missing from the children grid")
    return rows


def membership_targets(child_mask: OccupancyMask, positive: OccupancyMask) -> np.ndarray:
    rows, found = lookup_rows(child_mask.keys, positive.keys)
    t = np.zeros((len(child_mask), 1), dtype=np.float64)
    t[rows[found]] = 1.0
    return t


def mask_iou(a: OccupancyMask, b: OccupancyMask) -> float:
    ka, kb = set(a.keys.tolist()), set(b.keys.tolist())
    union = len(ka | kb)
    return len(ka & kb) / union if union else 1.0


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with the usual overflow-safe form."""
    x = logits.data
    t = targets
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - t) / n,)

    return Tensor(np.asarray(loss.mean()), (logits,), bwd)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.data - target
    n = diff.size

    def bwd(g):
        return (g * np.sign(diff) / n,)

    return Tensor(np.asarray(np.abs(diff).mean()), (pred,), bwd)


def commitment_loss(z_pre: Tensor, idx: np.ndarray, codebook: Codebook,
                    beta: float = 0.25) -> Tensor:
    """Codebook pull + beta-weighted commitment, straight-through convention."""
    entries = gather_rows(codebook.table, idx)
    stop_z = Tensor(z_pre.data.copy())
    stop_e = codebook.table.data[idx].copy()
    pull = ((entries - stop_z) ** 2).mean()
    commit = ((z_pre - Tensor(stop_e)) ** 2).mean()
    return pull + beta * commit


def kl_uniform_loss(soft: Tensor, codebook_size: int) -> Tensor:
    """KL(q || uniform) of the soft assignments; keeps codebook usage spread."""
    q = soft.data
    eps = 1e-10
    val = (q * np.log(q * codebook_size + eps)).sum(axis=1).mean()
    n = q.shape[0]

    def bwd(g):
        return (g * (np.log(q * codebook_size + eps) + 1.0) / n,)

    return Tensor(np.asarray(val), (soft,), bwd)


# ---------------------------------------------------------------------------
# the autoencoder


@dataclass(frozen=True)
class VqSpec:
    """Architecture of the encoder, quantizers and occupancy decoders."""

    embed_dim: int = 4
    codebook_size: int = 8192
    enc_channels: tuple[int, ...] = (8, 16, 32, 32)  # full, /2, /4, /8
    dec_channels: tuple[int, int] = (32, 32)         # G1 at /8, G2 at /4
    blocks: int = 1
    quantizer: str = "gumbel"  # "gumbel" | "nearest"
    kernel_size: int = 3

    def __post_init__(self):
        if self.quantizer not in ("gumbel", "nearest"):
            raise ValueError("quantizer must be 'gumbel' or 'nearest'")
        if len(self.enc_channels) != 4:
            raise ValueError("enc_channels covers strides 1, 2, 4, 8")

    def to_dict(self) -> dict:
        return {"embed_dim": self.embed_dim, "codebook_size": self.codebook_size,
                "enc_channels": list(self.enc_channels),
                "dec_channels": list(self.dec_channels), "blocks": self.blocks,
                "quantizer": self.quantizer, "kernel_size": self.kernel_size}

    @classmethod
    def from_dict(cls, d: dict) -> "VqSpec":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        d["dec_channels"] = tuple(d["dec_channels"])
        return cls(**d)


class HeadConv(Module):
    """GN -> SiLU -> conv projection head."""

    def __init__(self, rng, k, cin, cout):
        self.norm = GroupNormLayer(cin)
        self.conv = ConvLayer(rng, k, cin, cout)

    def __call__(self, x, plan):
        return self.conv(silu(self.norm(x)), plan)


class OccupancyVq(Module):
    def __init__(self, spec: VqSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        k = spec.kernel_size
        c0, c1, c2, c3 = spec.enc_channels
        d = spec.embed_dim
        head_out = spec.codebook_size if spec.quantizer == "gumbel" else d

        self.enc_in = ConvLayer(rng, k, 1, c0)
        self.enc_res0 = [ResBlock(rng, c0, k=k) for _ in range(spec.blocks)]
        self.enc_down0 = conv_param(rng, 2, c0, c1)
        self.enc_res1 = [ResBlock(rng, c1, k=k) for _ in range(spec.blocks)]
        self.enc_down1 = conv_param(rng, 2, c1, c2)
        self.enc_res2 = [ResBlock(rng, c2, k=k) for _ in range(spec.blocks)]
        self.z2_head = HeadConv(rng, k, c2, head_out)
        self.enc_down2 = conv_param(rng, 2, c2, c3)
        self.enc_res3 = [ResBlock(rng, c3, k=k) for _ in range(spec.blocks)]
        self.z1_head = HeadConv(rng, k, c3, head_out)

        self.codebook = Codebook(spec.codebook_size, d, seed=seed + 1)

        g1, g2 = spec.dec_channels
        self.g1_in = ConvLayer(rng, k, d, g1)
        self.g1_res = [ResBlock(rng, g1, k=k) for _ in range(spec.blocks)]
        self.g1_head = HeadConv(rng, k, g1, 8)
        self.g2_in = ConvLayer(rng, k, 2 * d, g2)
        self.g2_res = [ResBlock(rng, g2, k=k) for _ in range(spec.blocks)]
        self.g2_occ_head = HeadConv(rng, k, g2, 64)
        self.g2_tsdf_head = HeadConv(rng, k, g2, 64)

    # -- encoder ----------------------------------------------------------

    def mask_chain(self, mask: OccupancyMask):
        """(M_x, /2, M_z2, M_z1) maxpooled hierarchy."""
        m1 = mask.maxpool(2)
        m2 = m1.maxpool(2)
        m3 = m2.maxpool(2)
        return mask, m1, m2, m3

    def encode(self, x: SparseVolume):
        """TSDF crop -> pre-quantization latent feature tensors.

        Returns (z1_pre, z2_pre, M_z1, M_z2); empty input yields empty
        latents.  The crop extent must be divisible by the total stride.
        """
        ext = x.extent
        if ext.h % LEVEL1_STRIDE or ext.w % LEVEL1_STRIDE or ext.l % LEVEL1_STRIDE:
            raise ValueError(f"extent {ext.as_tuple()} not divisible by {LEVEL1_STRIDE}")
        m0, m1, m2, m3 = self.mask_chain(x.mask())
        if x.n_active == 0:
            head_out = self.z1_head.conv.w.data.shape[2]
            empty = Tensor(np.zeros((0, head_out), np.float32))
            return empty, empty, m3, m2
        k = self.spec.kernel_size
        p0 = ops.ConvPlan.cached(m0, k)
        p1 = ops.ConvPlan.cached(m1, k)
        p2 = ops.ConvPlan.cached(m2, k)
        p3 = ops.ConvPlan.cached(m3, k)
        h = self.enc_in(Tensor(x.feats), p0)
        for b in self.enc_res0:
            h = b(h, p0)
        h = ops.downsample_node(h, self.enc_down0, ops.DownsamplePlan.cached(m0, 2))
        for b in self.enc_res1:
            h = b(h, p1)
        h = ops.downsample_node(h, self.enc_down1, ops.DownsamplePlan.cached(m1, 2))
        for b in self.enc_res2:
            h = b(h, p2)
        z2_pre = self.z2_head(h, p2)
        h = ops.downsample_node(h, self.enc_down2, ops.DownsamplePlan.cached(m2, 2))
        for b in self.enc_res3:
            h = b(h, p3)
        z1_pre = self.z1_head(h, p3)
        return z1_pre, z2_pre, m3, m2

    def quantize_level(self, pre: Tensor, temperature: float,
                       rng: np.random.Generator | None, hard: bool):
        """Dispatch to the configured quantizer; returns (z_q, idx, aux)."""
        if self.spec.quantizer == "nearest":
            zq, idx = quantize(pre, self.codebook)
            return zq, idx, None
        return gumbel_quantize(pre, self.codebook, temperature, rng, hard=hard)

    # -- decoders ----------------------------------------------------------

    def decode_level1_logits(self, z1: Tensor, m_z1: OccupancyMask):
        """Children occupancy logits of every active z1 cell (Tensor path)."""
        k = self.spec.kernel_size
        plan = ops.ConvPlan.cached(m_z1, k)
        h = self.g1_in(z1, plan)
        for b in self.g1_res:
            h = b(h, plan)
        logits = self.g1_head(h, plan)
        return expand_children(logits, m_z1, 2)

    def decode_level2_logits(self, z1: Tensor, z2: Tensor,
                             m_z1: OccupancyMask, m_z2: OccupancyMask):
        """Full-resolution children logits and TSDF values under M_z2."""
        k = self.spec.kernel_size
        plan = ops.ConvPlan.cached(m_z2, k)
        z1_up = self._nn_upsample_node(z1, m_z1, m_z2)
        h = self.g2_in(concat_cols([z2, z1_up]), plan)
        for b in self.g2_res:
            h = b(h, plan)
        occ, child_mask = expand_children(self.g2_occ_head(h, plan), m_z2, 4)
        tsdf, _ = expand_children(self.g2_tsdf_head(h, plan), m_z2, 4)
        return occ, tsdf, child_mask

    @staticmethod
    def _nn_upsample_node(z: Tensor, src: OccupancyMask, dst: OccupancyMask) -> Tensor:
        parents = dst.coords // 2
        rows, found = lookup_rows(src.keys, linear_keys(parents, src.extent))
        if not found.all():
            raise ValueError("fine voxel with inactive coarse parent")
        return gather_rows(z, rows)

    # -- volume-level decoding (cascade surface) ---------------------------

    def decode_mask_level1(self, z1: LatentVolume) -> SparseVolume:
        """Eq.-(1)-style decoder: occupancy logits on the children grid."""
        if z1.volume.n_active == 0:
            ext = z1.volume.extent.scaled(2)
            return SparseVolume(ext, np.zeros((0, 3), np.int32),
                                np.zeros((0, 1), np.float32))
        logits, child_mask = self.decode_level1_logits(
            Tensor(z1.volume.feats), z1.mask)
        return SparseVolume.on_mask(child_mask, logits.data.astype(np.float32))

    def decode_mask_level2(self, z1: LatentVolume, z2: LatentVolume):
        """Occupancy logits and TSDF prediction on the full-resolution grid."""
        if z2.volume.n_active == 0:
            ext = z2.volume.extent.scaled(4)
            empty = SparseVolume(ext, np.zeros((0, 3), np.int32),
                                 np.zeros((0, 1), np.float32))
            return empty, empty
        occ, tsdf, child_mask = self.decode_level2_logits(
            Tensor(z1.volume.feats), Tensor(z2.volume.feats), z1.mask, z2.mask)
        occ_vol = SparseVolume.on_mask(child_mask, occ.data.astype(np.float32))
        tsdf_vol = SparseVolume.on_mask(child_mask, tsdf.data.astype(np.float32))
        return occ_vol, tsdf_vol

    def encode_latents(self, x: SparseVolume, rng=None) -> tuple[LatentVolume, LatentVolume]:
        """Encode and hard-quantize a crop into its two latent volumes."""
        z1_pre, z2_pre, m_z1, m_z2 = self.encode(x)
        if self.spec.quantizer == "gumbel":
            z1q, i1, _ = gumbel_quantize(z1_pre, self.codebook, 1.0, hard=True)
            z2q, i2, _ = gumbel_quantize(z2_pre, self.codebook, 1.0, hard=True)
        else:
            z1q, i1 = quantize(z1_pre, self.codebook)
            z2q, i2 = quantize(z2_pre, self.codebook)
        v1 = SparseVolume.on_mask(m_z1, z1q.data.astype(np.float32))
        v2 = SparseVolume.on_mask(m_z2, z2q.data.astype(np.float32))
        return LatentVolume(1, v1, i1), LatentVolume(2, v2, i2)

    def reconstruct(self, x: SparseVolume, threshold: float = 0.5):
        """Round-trip a crop; returns (pred M_x mask, x_hat on it, iou)."""
        z1, z2 = self.encode_latents(x)
        occ, tsdf = self.decode_mask_level2(z1, z2)
        logit_thr = float(np.log(threshold / (1.0 - threshold)))
        keep = occ.feats[:, 0] > logit_thr
        pred_mask = OccupancyMask(occ.extent, occ.coords[keep], _sorted=True)
        x_hat = SparseVolume.on_mask(pred_mask, tsdf.feats[keep])
        return pred_mask, x_hat, mask_iou(pred_mask, x.mask())


# ---------------------------------------------------------------------------
# discriminator and the combined loss


class PatchDiscriminator(Module):
    """Strided-conv patch critic on densified TSDF crops."""

    def __init__(self, channels=(8, 16, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.downs = []
        cin = 1
        for c in channels:
            self.downs.append(conv_param(rng, 2, cin, c))
            cin = c
        self.head = ConvLayer(rng, 3, cin, 1)
        self._mask_cache: dict = {}

    def _full_mask(self, extent: GridExtent) -> OccupancyMask:
        key = extent.as_tuple()
        if key not in self._mask_cache:
            self._mask_cache[key] = OccupancyMask.full(extent)
        return self._mask_cache[key]

    def __call__(self, dense_feats: Tensor, extent: GridExtent) -> Tensor:
        """dense_feats is (extent.volume, 1) in canonical order."""
        mask = self._full_mask(extent)
        h = dense_feats
        for w in self.downs:
            plan = ops.DownsamplePlan.cached(mask, 2)
            h = silu(ops.downsample_node(h, w, plan))
            mask = plan.out_mask
        return self.head(h, ops.ConvPlan.cached(mask, 3))


def densify_rows(values: Tensor, rows: np.ndarray, volume: int, default: float) -> Tensor:
    base = np.full((volume, 1), default, dtype=values.data.dtype)
    return scatter_rows(values, rows, base)


def vqgan_loss(x: SparseVolume, tsdf_pred: Tensor, occ_full: Tensor,
               occ_l2: Tensor, child_full: OccupancyMask, child_l2: OccupancyMask,
               m_x: OccupancyMask, m_z2: OccupancyMask,
               vq_term: Tensor, weights: VqLossWeights,
               gan_term: Tensor | None = None, lambda_gan: float | None = None):
    """Assemble L = L_rec + lambda1 L_vq + lambda2 L_GAN.

    L_rec is BCE on both predicted occupancy levels plus an L1 TSDF term on
    the true active voxels; the report dict carries each part and the
    weights actually applied.
    """
    t_full = membership_targets(child_full, m_x)
    t_l2 = membership_targets(child_l2, m_z2)
    bce_full = bce_with_logits(occ_full, t_full)
    bce_l2 = bce_with_logits(occ_l2, t_l2)
    rows = rows_in_mask(child_full, m_x)
    l1 = l1_loss(gather_rows(tsdf_pred, rows), x.feats.astype(np.float64))
    rec = bce_full + bce_l2 + l1
    total = rec + weights.vq * vq_term
    lam2 = 0.0
    if gan_term is not None:
        lam2 = weights.gan if lambda_gan is None else lambda_gan
        total = total + lam2 * gan_term
    report = {
        "bce_full": bce_full.item(), "bce_l2": bce_l2.item(), "l1": l1.item(),
        "vq": vq_term.item(), "gan": gan_term.item() if gan_term is not None else 0.0,
        "lambda1": weights.vq, "lambda2": lam2, "rec": rec.item(),
        "total": total.item(),
    }
    return total, rec, report


# ---------------------------------------------------------------------------
# trainer


@dataclass
class VqTrainConfig:
    lr: float = 1e-5
    steps: int = 1000
    batch_size: int = 1
    gumbel_temp_start: float = 1.0
    gumbel_temp_end: float = 0.1
    commitment_beta: float = 0.25
    kl_weight: float = 5e-4
    gan_enabled: bool = False
    gan_start_step: int = 0
    disc_lr: float = 1e-5
    dead_entry_reinit: bool = False
    reinit_every: int = 0


class VqTrainer:
    """Joint training of encoder, quantizers, decoders and (optionally) the
    patch discriminator with the adaptive adversarial weight rule."""

    def __init__(self, model: OccupancyVq, config: VqTrainConfig,
                 weights: VqLossWeights | None = None, seed: int = 0):
        self.model = model
        self.config = config
        self.weights = weights or VqLossWeights()
        self.rng = np.random.default_rng(seed)
        self.opt = Adam(model.parameters(), lr=config.lr)
        self.disc = PatchDiscriminator(seed=seed + 7) if config.gan_enabled else None
        self.disc_opt = Adam(self.disc.parameters(), lr=config.disc_lr) \
            if self.disc else None
        self.step_count = 0
        self._usage = np.zeros(model.codebook.size, dtype=np.int64)

    def temperature(self) -> float:
        c = self.config
        if c.steps <= 1:
            return c.gumbel_temp_end
        frac = min(self.step_count / max(c.steps - 1, 1), 1.0)
        return c.gumbel_temp_start + frac * (c.gumbel_temp_end - c.gumbel_temp_start)

    def _forward_losses(self, x: SparseVolume):
        model = self.model
        tau = self.temperature()
        z1_pre, z2_pre, m_z1, m_z2 = model.encode(x)
        zq1, i1, aux1 = model.quantize_level(z1_pre, tau, self.rng, hard=False)
        zq2, i2, aux2 = model.quantize_level(z2_pre, tau, self.rng, hard=False)
        self._usage[i1] += 1
        self._usage[i2] += 1
        if model.spec.quantizer == "nearest":
            vq_term = (commitment_loss(z1_pre, i1, model.codebook, self.config.commitment_beta)
                       + commitment_loss(z2_pre, i2, model.codebook, self.config.commitment_beta))
        else:
            vq_term = self.config.kl_weight * (
                kl_uniform_loss(aux1, model.codebook.size)
                + kl_uniform_loss(aux2, model.codebook.size))
        occ_l2, child_l2 = model.decode_level1_logits(zq1, m_z1)
        occ_full, tsdf, child_full = model.decode_level2_logits(zq1, zq2, m_z1, m_z2)
        return dict(x=x, tsdf=tsdf, occ_full=occ_full, occ_l2=occ_l2,
                    child_full=child_full, child_l2=child_l2,
                    m_x=x.mask(), m_z2=m_z2, vq_term=vq_term)

    def _gan_pieces(self, parts):
        """Generator hinge term plus the adaptive weight, or (None, None)."""
        if self.disc is None or self.step_count < self.config.gan_start_step:
            return None, None
        x: SparseVolume = parts["x"]
        rows = rows_in_mask(parts["child_full"], parts["m_x"])
        fake_dense = densify_rows(gather_rows(parts["tsdf"], rows),
                                  x.mask().keys, x.extent.volume, 3.0)
        logits_fake = self.disc(fake_dense, x.extent)
        g_loss = -logits_fake.mean()
        # adaptive lambda2: ||grad_rec|| / ||grad_gan|| at the TSDF head
        probe = self.model.g2_tsdf_head.conv.w
        _, rec, _ = vqgan_loss(x, parts["tsdf"], parts["occ_full"], parts["occ_l2"],
                               parts["child_full"], parts["child_l2"],
                               parts["m_x"], parts["m_z2"], parts["vq_term"],
                               self.weights)
        probe.zero_grad()
        rec.backward()
        rec_norm = float(np.linalg.norm(probe.grad)) if probe.grad is not None else 0.0
        probe.zero_grad()
        g_loss.backward()
        gan_norm = float(np.linalg.norm(probe.grad)) if probe.grad is not None else 0.0
        for p in self.model.parameters():
            p.zero_grad()
        for p in self.disc.parameters():
            p.zero_grad()
        lam = np.clip(rec_norm / (gan_norm + 1e-6), 0.0, 1e4) * self.weights.gan
        # rebuild the generator graph for the real backward pass
        logits_fake2 = self.disc(densify_rows(gather_rows(parts["tsdf"], rows),
                                              x.mask().keys, x.extent.volume, 3.0),
                                 x.extent)
        return -logits_fake2.mean(), float(lam)

    def _disc_step(self, parts):
        x: SparseVolume = parts["x"]
        rows = rows_in_mask(parts["child_full"], parts["m_x"])
        fake = densify_rows(Tensor(parts["tsdf"].data[rows]), x.mask().keys,
                            x.extent.volume, 3.0)
        real = densify_rows(Tensor(x.feats.astype(np.float64)), x.mask().keys,
                            x.extent.volume, 3.0)
        self.disc_opt.zero_grad()
        loss = relu(1.0 - self.disc(real, x.extent)).mean() \
            + relu(1.0 + self.disc(fake, x.extent)).mean()
        loss.backward()
        self.disc_opt.step()
        return loss.item()

    def train_step(self, batch: list[SparseVolume]) -> dict:
        """One optimizer update over a batch of TSDF crops."""
        self.opt.zero_grad()
        report = None
        for x in batch:
            parts = self._forward_losses(x)
            gan_term, lam = self._gan_pieces(parts)
            total, _, report = vqgan_loss(
                x, parts["tsdf"], parts["occ_full"], parts["occ_l2"],
                parts["child_full"], parts["child_l2"], parts["m_x"],
                parts["m_z2"], parts["vq_term"], self.weights,
                gan_term=gan_term, lambda_gan=lam)
            if not np.isfinite(total.data):
                raise NumericalError("non-finite autoencoder loss")
            total.backward(np.asarray(1.0 / len(batch), dtype=total.dtype))
            if self.disc is not None and self.step_count >= self.config.gan_start_step:
                report["d_loss"] = self._disc_step(parts)
        self.opt.step()
        self.step_count += 1
        if (self.config.dead_entry_reinit and self.config.reinit_every
                and self.step_count % self.config.reinit_every == 0):
            self._reinit_dead_entries()
        return report

    def _reinit_dead_entries(self):
        dead = self._usage == 0
        if dead.any():
            table = self.model.codebook.table
            table.data[dead] = self.rng.standard_normal(
                (int(dead.sum()), table.data.shape[1])).astype(np.float32)
        self._usage[:] = 0
