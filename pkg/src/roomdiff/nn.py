"""Shared network building blocks over the sparse kernels.

Every convolution is preceded by group normalization and SiLU, matching the
pre-activation layout used throughout the denoisers and the autoencoder.
"""

from __future__ import annotations

import numpy as np

from . import sparse_ops as ops
from .autodiff import Module, Parameter, Tensor, silu, vslice

__all__ = ["conv_param", "norm_groups", "ConvLayer", "Linear", "GroupNormLayer",
           "ResBlock", "AttentionBlock"]


def conv_param(rng, k: int, cin: int, cout: int, scale: float = 1.0) -> Parameter:
    fan_in = k ** 3 * cin
    return Parameter(rng.standard_normal((k ** 3, cin, cout)) * (scale / np.sqrt(fan_in)))


def norm_groups(channels: int) -> int:
    """min(32, channels), relaxed to the nearest divisor for odd widths."""
    g = min(32, channels)
    while channels % g:
        g -= 1
    return g


class ConvLayer(Module):
    def __init__(self, rng, k, cin, cout, zero_init=False):
        self.k = k
        self.w = conv_param(rng, k, cin, cout, scale=0.0 if zero_init else 1.0)
        self.b = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor, plan: ops.ConvPlan) -> Tensor:
        return ops.conv_node(x, self.w, self.b, plan)


class Linear(Module):
    def __init__(self, rng, nin, nout, zero_init=False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(nin)
        self.w = Parameter(rng.standard_normal((nin, nout)) * scale)
        self.b = Parameter(np.zeros(nout))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class GroupNormLayer(Module):
    def __init__(self, channels):
        self.groups = norm_groups(channels)
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm_node(x, self.groups, self.scale, self.shift)


class ResBlock(Module):
    """Pre-activation residual block: (GN -> SiLU -> conv) x2.

    With an embedding the second normalization is adaptive: the embedding
    projects to a per-channel (scale, shift) applied after the norm, so the
    block can re-gain its features per noise level, not just re-bias them.
    """

    def __init__(self, rng, channels, emb_dim=0, k=3):
        self.norm1 = GroupNormLayer(channels)
        self.conv1 = ConvLayer(rng, k, channels, channels)
        self.emb_proj = Linear(rng, emb_dim, 2 * channels) if emb_dim else None
        self.norm2 = GroupNormLayer(channels)
        self.conv2 = ConvLayer(rng, k, channels, channels, zero_init=True)
        self._channels = channels

    def __call__(self, x: Tensor, plan, emb: Tensor | None = None) -> Tensor:
        h = self.conv1(silu(self.norm1(x)), plan)
        h = self.norm2(h)
        if self.emb_proj is not None and emb is not None:
            gains = self.emb_proj(emb)
            c = self._channels
            scale = vslice(gains, 0, c)
            shift = vslice(gains, c, 2 * c)
            h = h * (Tensor(np.ones(c, dtype=np.float32)) + scale) + shift
        h = self.conv2(silu(h), plan)
        return x + h


class AttentionBlock(Module):
    def __init__(self, rng, channels, heads, cap=ops.ATTENTION_CAP):
        self.heads = heads
        self.cap = cap
        std = 1.0 / np.sqrt(channels)
        self.w_qkv = Parameter(rng.standard_normal((channels, 3 * channels)) * std)
        self.b_qkv = Parameter(np.zeros(3 * channels))
        # zero-init projection: the block starts as the identity
        self.w_proj = Parameter(np.zeros((channels, channels)))
        self.b_proj = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.attention_node(x, self.w_qkv, self.b_qkv, self.w_proj,
                                  self.b_proj, self.heads, self.cap)
