"""Sparse neural kernels: submanifold convolution, pooled down/upsampling,
group normalization, SiLU and full attention over active voxels.

Each kernel exists at two levels:

* a fused autodiff node over (n_active, channels) feature matrices, taking
  a precomputed index plan (``conv_node`` etc.) -- the building blocks of
  the denoiser and autoencoder;
* a volume-level wrapper matching the engine surface (``sparse_conv3d``
  etc.) that builds the plan from the input's mask and returns a new
  SparseVolume.

Plans are cached on the OccupancyMask they were built from, so repeated
passes over a fixed active set (the common case during training) pay the
neighbor search once.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .autodiff import Parameter, Tensor
from .grids import GridExtent, OccupancyMask, SparseVolume, linear_keys, lookup_rows

__all__ = [
    "ConvPlan",
    "sparse_conv3d",
    "sparse_downsample",
    "sparse_upsample",
    "group_norm",
    "silu",
    "sparse_attention",
    "count_ops",
    "OpCostReport",
]

ATTENTION_CAP = 16384  # full pairwise attention; quadratic in active voxels


def kernel_offsets(size: int, centered: bool = True) -> np.ndarray:
    """Lexicographic (di, dj, dk) offsets of a cubic kernel window."""
    rng = range(-(size // 2), size // 2 + 1) if centered else range(size)
    return np.array(list(product(rng, rng, rng)), dtype=np.int32)


class ConvPlan:
    """Padded neighbor-row table per kernel offset for a fixed active set.

    Row n (one past the active rows) is the zero-feature pad that inactive
    or out-of-bounds taps gather from, so the whole convolution collapses
    into one gather and one GEMM.
    """

    def __init__(self, mask: OccupancyMask, size: int):
        if size % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.size = size
        self.n = len(mask)
        offsets = kernel_offsets(size)
        center = len(offsets) // 2
        self.nb = np.full((self.n, len(offsets)), self.n, dtype=np.int64)
        self.nb[:, center] = np.arange(self.n)
        for idx, off in enumerate(offsets):
            if idx == center:
                continue
            nb = mask.coords + off
            inb = mask.extent.contains(nb)
            rows_out = np.nonzero(inb)[0]
            rows_in, found = lookup_rows(mask.keys, linear_keys(nb[inb], mask.extent))
            self.nb[rows_out[found], idx] = rows_in[found]

    @classmethod
    def cached(cls, mask: OccupancyMask, size: int) -> "ConvPlan":
        key = ("conv", size)
        plan = mask._plan_cache.get(key)
        if plan is None:
            plan = cls(mask, size)
            mask._plan_cache[key] = plan
        return plan


class DownsamplePlan:
    """Child gather indices per offset of the pooling window."""

    def __init__(self, mask: OccupancyMask, factor: int):
        self.factor = factor
        self.out_mask = mask.maxpool(factor)
        offsets = kernel_offsets(factor, centered=False)
        self.pairs = []
        out_keys = self.out_mask.keys
        for off in offsets:
            child = self.out_mask.coords * factor + off
            rows_in, found = lookup_rows(mask.keys, linear_keys(child, mask.extent))
            rows_out = np.nonzero(found)[0]
            self.pairs.append((rows_out, rows_in[found]) if found.any() else None)

    @classmethod
    def cached(cls, mask: OccupancyMask, factor: int) -> "DownsamplePlan":
        key = ("down", factor)
        plan = mask._plan_cache.get(key)
        if plan is None:
            plan = cls(mask, factor)
            mask._plan_cache[key] = plan
        return plan


class UpsamplePlan:
    """Parent row per target voxel plus its offset slot within the window."""

    def __init__(self, mask: OccupancyMask, factor: int, target: OccupancyMask):
        if target.extent != mask.extent.scaled(factor):
            raise ValueError("target extent must be input extent x factor")
        self.factor = factor
        self.target = target
        parents = target.coords // factor
        rows, found = lookup_rows(mask.keys, linear_keys(parents, mask.extent))
        if not found.all():
            raise ValueError("orphan target voxel: parent cell inactive")
        rel = target.coords - parents * factor
        slot = (rel[:, 0] * factor + rel[:, 1]) * factor + rel[:, 2]
        self.parent_rows = rows
        self.slot = slot
        # rows grouped per window slot; parents are unique within a slot
        self.slot_groups = [np.nonzero(slot == o)[0] for o in range(factor ** 3)]

    @classmethod
    def cached(cls, mask: OccupancyMask, factor: int, target: OccupancyMask) -> "UpsamplePlan":
        key = ("up", factor, id(target))
        plan = mask._plan_cache.get(key)
        if plan is None:
            plan = cls(mask, factor, target)
            mask._plan_cache[key] = plan
        return plan


# ---------------------------------------------------------------------------
# fused autodiff nodes


def conv_node(x: Tensor, weight: Tensor, bias: Tensor | None, plan: ConvPlan) -> Tensor:
    """Submanifold convolution: out[p] = sum_o x[p+o] W[o] (+ b)."""
    w = weight.data
    if w.ndim != 3 or w.shape[0] != plan.size ** 3:
        raise ValueError("kernel must have shape (k^3, c_in, c_out)")
    if w.shape[1] != x.data.shape[1]:
        raise ValueError(f"channel mismatch: input {x.data.shape[1]}, kernel {w.shape[1]}")
    taps, c_in = w.shape[0], w.shape[1]
    c_out = w.shape[2]
    xp = np.concatenate([x.data, np.zeros((1, c_in), dtype=x.data.dtype)])
    gathered = xp[plan.nb]  # (n, taps, c_in); pad row covers inactive taps
    out = gathered.reshape(plan.n, taps * c_in) @ w.reshape(taps * c_in, c_out)
    if bias is not None:
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        # d x[q] = sum_o g[q + o] W[flip(o)]^T: the adjoint is the same
        # gather with the spatially flipped, transposed kernel
        gp = np.concatenate([g, np.zeros((1, c_out), dtype=g.dtype)])
        g_gathered = gp[plan.nb]
        w_adj = w[::-1].transpose(0, 2, 1).reshape(taps * c_out, c_in)
        gx = g_gathered.reshape(plan.n, taps * c_out) @ w_adj
        gw = (gathered.reshape(plan.n, taps * c_in).T @ g).reshape(taps, c_in, c_out)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor(out, parents, bwd)


def downsample_node(x: Tensor, weight: Tensor, plan: DownsamplePlan) -> Tensor:
    """Strided convolution over the pooling window's active children."""
    w = weight.data
    if w.shape[0] != plan.factor ** 3:
        raise ValueError("kernel must have shape (factor^3, c_in, c_out)")
    if w.shape[1] != x.data.shape[1]:
        raise ValueError("channel mismatch")
    out = np.zeros((len(plan.out_mask), w.shape[2]), dtype=x.data.dtype)
    for o, pair in enumerate(plan.pairs):
        if pair is None:
            continue
        rows_out, rows_in = pair
        # each child belongs to exactly one parent per offset: plain indexing
        out[rows_out] += x.data[rows_in] @ w[o]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w)
        for o, pair in enumerate(plan.pairs):
            if pair is None:
                continue
            rows_out, rows_in = pair
            gx[rows_in] += g[rows_out] @ w[o].T
            gw[o] = x.data[rows_in].T @ g[rows_out]
        return gx, gw

    return Tensor(out, (x, weight), bwd)


def upsample_node(x: Tensor, weight: Tensor, plan: UpsamplePlan) -> Tensor:
    """Transposed strided convolution onto a given finer active set."""
    w = weight.data
    if w.shape[0] != plan.factor ** 3:
        raise ValueError("kernel must have shape (factor^3, c_in, c_out)")
    if w.shape[1] != x.data.shape[1]:
        raise ValueError("channel mismatch")
    out = np.empty((len(plan.slot), w.shape[2]), dtype=x.data.dtype)
    for o, sel in enumerate(plan.slot_groups):
        out[sel] = x.data[plan.parent_rows[sel]] @ w[o]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w)
        for o, sel in enumerate(plan.slot_groups):
            rows = plan.parent_rows[sel]
            gx[rows] += g[sel] @ w[o].T
            gw[o] = x.data[rows].T @ g[sel]
        return gx, gw

    return Tensor(out, (x, weight), bwd)


def group_norm_node(x: Tensor, groups: int, scale: Tensor, shift: Tensor,
                    eps: float = 1e-5) -> Tensor:
    """Normalize over (active voxels x channels-in-group), then affine."""
    n, c = x.data.shape
    if n == 0:
        raise ValueError("group normalization over zero active voxels")
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    xg = x.data.reshape(n, groups, c // groups)
    # float64 statistics: constant inputs cancel exactly instead of leaving
    # rounding noise amplified by 1/sqrt(eps)
    mu = xg.mean(axis=(0, 2), keepdims=True, dtype=np.float64)
    var = np.square(xg - mu).mean(axis=(0, 2), keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    mu = mu.astype(x.data.dtype)
    xhat = ((xg - mu) * inv).reshape(n, c)
    out = xhat * scale.data + shift.data

    def bwd(g):
        m = n * (c // groups)
        dxhat = (g * scale.data).reshape(n, groups, c // groups)
        xh = xhat.reshape(n, groups, c // groups)
        sum_dxhat = dxhat.sum(axis=(0, 2), keepdims=True)
        sum_dxhat_xhat = (dxhat * xh).sum(axis=(0, 2), keepdims=True)
        dx = inv * (dxhat - sum_dxhat / m - xh * sum_dxhat_xhat / m)
        return (dx.reshape(n, c),
                (g * xhat).sum(axis=0),
                g.sum(axis=0))

    return Tensor(out, (x, scale, shift), bwd)


def silu_node(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor(x.data * s, (x,),
                  lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def attention_node(x: Tensor, w_qkv: Tensor, b_qkv: Tensor, w_proj: Tensor,
                   b_proj: Tensor, heads: int, cap: int = ATTENTION_CAP) -> Tensor:
    """Full softmax attention over all active voxels, residual added."""
    n, c = x.data.shape
    if n > cap:
        raise ValueError(f"{n} active voxels exceed attention cap {cap}")
    if c % heads:
        raise ValueError("channels not divisible by heads")
    dh = c // heads
    qkv = x.data @ w_qkv.data + b_qkv.data
    q, k, v = np.split(qkv, 3, axis=1)
    scale = 1.0 / np.sqrt(dh)
    attn = []
    heads_out = np.empty_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=1, keepdims=True)
        attn.append(a)
        heads_out[:, sl] = a @ v[:, sl]
    out = x.data + heads_out @ w_proj.data + b_proj.data

    def bwd(g):
        g_heads = g @ w_proj.data.T
        gqkv = np.empty_like(qkv)
        gq, gk, gv = np.split(gqkv, 3, axis=1)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            a = attn[h]
            da = g_heads[:, sl] @ v[:, sl].T
            gv[:, sl] = a.T @ g_heads[:, sl]
            ds = a * (da - (da * a).sum(axis=1, keepdims=True))
            gq[:, sl] = (ds @ k[:, sl]) * scale
            gk[:, sl] = (ds.T @ q[:, sl]) * scale
        gx = g + gqkv @ w_qkv.data.T
        return (gx,
                x.data.T @ gqkv,
                gqkv.sum(axis=0),
                heads_out.T @ g,
                g.sum(axis=0))

    return Tensor(out, (x, w_qkv, b_qkv, w_proj, b_proj), bwd)


# ---------------------------------------------------------------------------
# volume-level surface


def _as_param(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(np.asarray(p))


def sparse_conv3d(vol: SparseVolume, kernel, bias=None) -> SparseVolume:
    """Submanifold 3D convolution; the active set is preserved."""
    kt = _as_param(kernel)
    size = round(kt.data.shape[0] ** (1 / 3))
    if size ** 3 != kt.data.shape[0]:
        raise ValueError("kernel tap count is not a cube")
    plan = ConvPlan.cached(vol.mask(), size)
    out = conv_node(Tensor(vol.feats), kt,
                    None if bias is None else _as_param(bias), plan)
    return vol.with_feats(out.data)


def sparse_downsample(vol: SparseVolume, factor: int, kernel) -> SparseVolume:
    """Stride-`factor` convolution; output active set = maxpooled mask."""
    plan = DownsamplePlan.cached(vol.mask(), factor)
    out = downsample_node(Tensor(vol.feats), _as_param(kernel), plan)
    return SparseVolume.on_mask(plan.out_mask, out.data)


def sparse_upsample(vol: SparseVolume, factor: int, target_mask: OccupancyMask,
                    kernel) -> SparseVolume:
    """Transposed convolution onto `target_mask` (parents must be active)."""
    plan = UpsamplePlan.cached(vol.mask(), factor, target_mask)
    out = upsample_node(Tensor(vol.feats), _as_param(kernel), plan)
    return SparseVolume.on_mask(target_mask, out.data)


def group_norm(vol: SparseVolume, groups: int, scale, shift, eps: float = 1e-5) -> SparseVolume:
    out = group_norm_node(Tensor(vol.feats), groups, _as_param(scale),
                          _as_param(shift), eps)
    return vol.with_feats(out.data)


def silu(vol: SparseVolume) -> SparseVolume:
    return vol.with_feats(silu_node(Tensor(vol.feats)).data)


def sparse_attention(vol: SparseVolume, w_qkv, b_qkv, w_proj, b_proj,
                     heads: int, cap: int = ATTENTION_CAP) -> SparseVolume:
    out = attention_node(Tensor(vol.feats), _as_param(w_qkv), _as_param(b_qkv),
                         _as_param(w_proj), _as_param(b_proj), heads, cap)
    return vol.with_feats(out.data)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class OpCostReport:
    """Multiply-accumulate tally for sparse execution vs the dense equivalent.

    Counts model a gather-style executor: every output voxel pays one
    weight tap per in-bounds kernel offset (inactive neighbors gather
    zeros), so for convolutions the sparse/dense ratio tracks the
    occupancy rate up to boundary weighting.
    """

    mac_sparse: int
    mac_dense: int
    active_voxels: int

    def __post_init__(self):
        if self.mac_sparse > self.mac_dense:
            raise ValueError("sparse MAC count cannot exceed dense equivalent")

    @property
    def ratio(self) -> float:
        return self.mac_sparse / self.mac_dense if self.mac_dense else 0.0


def _inbounds_taps(coords: np.ndarray, extent: GridExtent, size: int) -> int:
    total = 0
    for off in kernel_offsets(size):
        total += int(extent.contains(coords + off).sum())
    return total


def _dense_taps(extent: GridExtent, size: int) -> int:
    r = size // 2
    total = 1
    # per axis: number of (voxel, offset) pairs staying in bounds
    per_axis = []
    for n in (extent.h, extent.w, extent.l):
        pairs = sum(n - abs(d) for d in range(-r, r + 1))
        per_axis.append(pairs)
    return per_axis[0] * per_axis[1] * per_axis[2]


def count_ops(layers, mask: OccupancyMask) -> OpCostReport:
    """Tally MACs of a layer stack on `mask` against its dense equivalent.

    Layers are (kind, *args) tuples:
      ("conv3d", kernel_size, c_in, c_out)   active set preserved
      ("downsample", factor, c_in, c_out)    active set -> maxpool
      ("upsample", factor, c_in, c_out)      active set -> top of down stack
      ("attention", channels)                active set preserved
    """
    mac_sparse = 0
    mac_dense = 0
    cur = mask
    dense_extent = mask.extent
    stack: list[OccupancyMask] = []
    for layer in layers:
        kind = layer[0]
        if kind == "conv3d":
            _, size, cin, cout = layer
            mac_sparse += _inbounds_taps(cur.coords, cur.extent, size) * cin * cout
            mac_dense += _dense_taps(dense_extent, size) * cin * cout
        elif kind == "downsample":
            _, factor, cin, cout = layer
            stack.append(cur)
            cur = cur.maxpool(factor)
            mac_sparse += len(cur) * factor ** 3 * cin * cout
            mac_dense += dense_extent.volume * cin * cout
            dense_extent = dense_extent.downsampled(factor)
        elif kind == "upsample":
            _, factor, cin, cout = layer
            fine = stack.pop() if stack else OccupancyMask.full(dense_extent.scaled(factor))
            mac_sparse += len(fine) * cin * cout
            dense_extent = dense_extent.scaled(factor)
            mac_dense += dense_extent.volume * cin * cout
            cur = fine
        elif kind == "attention":
            _, c = layer
            n = len(cur)
            nd = dense_extent.volume
            mac_sparse += 2 * n * n * c + 4 * n * c * c
            mac_dense += 2 * nd * nd * c + 4 * nd * c * c
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return OpCostReport(mac_sparse=mac_sparse, mac_dense=mac_dense,
                        active_voxels=len(mask))
