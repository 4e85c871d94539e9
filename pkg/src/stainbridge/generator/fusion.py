"""Feature-map fusion: gated top-k cross attention from the Swin branch into the CNN branch.

For one fusion point the flow is:

1. ``align_features``: Swin tokens -> (B, C_cnn, H, W) via 1x1 conv + bilinear resize.
2. ``compute_gating_map``: ``sigmoid(conv(F))`` gives one gate per position.
3. ``select_top_k``: the ``ceil(fraction * H * W)`` highest gates per batch item.
4. ``gated_cross_attention``: CNN features query the aligned Swin features at
   those positions.
5. ``reintegrate``: the attended vectors overwrite the selected CNN positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from stainbridge.errors import ConfigurationError, InputValidationError
from stainbridge.generator.swin import SwinStageOutput


@dataclass
class SelectedSet:
    indices: torch.Tensor  # (B, k) flat spatial positions, int64
    k: int


class FeatureAligner(nn.Module):
    def __init__(self, in_dim: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_dim, out_channels, 1)

    def forward(self, s: SwinStageOutput, size: tuple[int, int]) -> torch.Tensor:
        x = self.proj(s.as_map())
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


def align_features(s: SwinStageOutput, target: torch.Tensor, aligner: FeatureAligner) -> torch.Tensor:
    out = aligner(s, tuple(target.shape[-2:]))
    if out.shape != target.shape:
        raise ConfigurationError(
            f"aligned features {tuple(out.shape)} do not match target {tuple(target.shape)}"
        )
    return out


class GatingLayer(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(f))


def compute_gating_map(f: torch.Tensor, gate: GatingLayer) -> torch.Tensor:
    return gate(f)


def top_k_count(fraction: float, num_positions: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"top_k_fraction must be in (0, 1], got {fraction}")
    return min(num_positions, max(1, math.ceil(fraction * num_positions)))


def select_top_k(g: torch.Tensor, top_k_fraction: float) -> SelectedSet:
    """Pick the highest-gated positions of a (B, 1, H, W) or (B, N) gating map.

    Ties are broken by ascending flat index (stable descending sort).
    """
    flat = g.reshape(g.shape[0], -1)
    if flat.numel() == 0 or flat.shape[1] == 0:
        raise InputValidationError("empty gating map")
    k = top_k_count(top_k_fraction, flat.shape[1])
    order = torch.sort(flat.detach(), dim=1, descending=True, stable=True).indices
    return SelectedSet(order[:, :k], k)


def gather_positions(x: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W), (B, k) -> (B, k, C)."""
    b, c = x.shape[:2]
    flat = x.reshape(b, c, -1)
    idx = indices.unsqueeze(1).expand(b, c, indices.shape[1])
    return flat.gather(2, idx).transpose(1, 2)


class CrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value sources."""

    def __init__(self, dim: int, num_heads: int = 8):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.view(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        if query.shape != context.shape:
            raise InputValidationError(
                f"query {tuple(query.shape)} and context {tuple(context.shape)} must match"
            )
        if query.shape[1] == 0:
            raise InputValidationError("cross attention over zero positions")
        b, n, c = query.shape
        q, k, v = self._heads(self.q(query)), self._heads(self.k(context)), self._heads(self.v(context))
        if return_weights:
            weights = ((q * q.shape[-1] ** -0.5) @ k.transpose(-2, -1)).softmax(-1)
            out = weights @ v
        else:
            # memory-efficient kernel; k can reach tens of thousands at full patch size
            out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(out.transpose(1, 2).reshape(b, n, c))
        if return_weights:
            return out, weights
        return out


def gated_cross_attention(f_k: torch.Tensor, s_k: torch.Tensor, attention: CrossAttention,
                          return_weights: bool = False):
    return attention(f_k, s_k, return_weights=return_weights)


def reintegrate(f: torch.Tensor, attended: torch.Tensor, sel: SelectedSet) -> torch.Tensor:
    """Overwrite the selected positions of ``f`` with ``attended`` (B, k, C)."""
    b, c, h, w = f.shape
    if attended.shape != (b, sel.k, c):
        raise InputValidationError(
            f"attended shape {tuple(attended.shape)} != {(b, sel.k, c)}"
        )
    if sel.indices.min() < 0 or sel.indices.max() >= h * w:
        raise InputValidationError(f"selected index outside [0, {h * w})")
    idx = sel.indices.unsqueeze(1).expand(b, c, sel.k)
    out = f.reshape(b, c, h * w).scatter(2, idx, attended.transpose(1, 2).to(f.dtype))
    return out.view(b, c, h, w)


class FeatureMapFusion(nn.Module):
    """One fusion point between a Swin stage and a CNN feature map."""

    def __init__(self, swin_dim: int, cnn_channels: int, num_heads: int = 8,
                 top_k_fraction: float = 0.25):
        super().__init__()
        self.top_k_fraction = top_k_fraction
        self.align = FeatureAligner(swin_dim, cnn_channels)
        self.gate = GatingLayer(cnn_channels)
        self.attention = CrossAttention(cnn_channels, num_heads)

    def forward(self, f: torch.Tensor, s: SwinStageOutput, return_details: bool = False):
        aligned = align_features(s, f, self.align)
        g = compute_gating_map(f, self.gate)
        sel = select_top_k(g, self.top_k_fraction)
        f_k = gather_positions(f, sel.indices)
        s_k = gather_positions(aligned, sel.indices)
        attended = gated_cross_attention(f_k, s_k, self.attention)
        # straight-through gate: the factor is exactly 1 in value but gives the
        # gating conv a gradient, since top-k selection alone is piecewise constant
        g_k = g.reshape(g.shape[0], -1).gather(1, sel.indices).unsqueeze(-1)
        attended = attended * (g_k / g_k.detach())
        out = reintegrate(f, attended, sel)
        if return_details:
            return out, {"gate": g, "selected": sel, "aligned": aligned, "attended": attended}
        return out
