"""Swin Transformer auxiliary branch.

Window attention pads the token grid up to a multiple of the window size
and masks the padded keys, so any grid size is accepted.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from stainbridge.errors import ConfigurationError, NumericError

# additive logit for disallowed (query, key) pairs; exp() underflows to 0 in fp16/fp32
MASK_VALUE = -1.0e4


@dataclass
class SwinStageOutput:
    tokens: torch.Tensor  # (B, H*W, C)
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.dim() != 3 or self.tokens.shape[1] != h * w:
            raise ConfigurationError(
                f"token tensor {tuple(self.tokens.shape)} inconsistent with grid {self.grid}"
            )

    def as_map(self) -> torch.Tensor:
        """Tokens reshaped to (B, C, H, W)."""
        b, _, c = self.tokens.shape
        h, w = self.grid
        return self.tokens.transpose(1, 2).reshape(b, c, h, w)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window, window, C); H and W divisible by window."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window, window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    """Multi-head self attention inside square windows, with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer(
            "relative_position_index", relative_position_index(window_size), persistent=False
        )
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def position_bias(self) -> torch.Tensor:
        n = self.window_size**2
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                return_weights: bool = False):
        """
        Args:
            x: (B * nW, N, C) window tokens.
            mask: optional (nW, N, N) additive mask.
        """
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class ShiftedWindowMSA(nn.Module):
    """W-MSA (shift 0) or SW-MSA (shift > 0) over a (B, H*W, C) token grid."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift_size: int = 0):
        super().__init__()
        if not 0 <= shift_size < window_size:
            raise ConfigurationError(f"shift {shift_size} must be in [0, {window_size})")
        self.window_size = window_size
        self.shift_size = shift_size
        self.attn = WindowAttention(dim, window_size, num_heads)
        self._mask_cache: dict[tuple, torch.Tensor | None] = {}

    def _mask(self, h: int, w: int, device, dtype) -> torch.Tensor | None:
        key = (h, w, device, dtype)
        if key in self._mask_cache:
            return self._mask_cache[key]
        ws, s = self.window_size, self.shift_size
        hp, wp = h + (-h) % ws, w + (-w) % ws
        if s == 0 and (hp, wp) == (h, w):
            self._mask_cache[key] = None
            return None
        region = torch.zeros(1, hp, wp, 1)
        if s > 0:
            cnt = 0
            for hs in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
                for wsl in (slice(0, -ws), slice(-ws, -s), slice(-s, None)):
                    region[:, hs, wsl, :] = cnt
                    cnt += 1
        padded = torch.zeros(1, hp, wp, 1)
        padded[:, h:, :, :] = 1
        padded[:, :, w:, :] = 1
        if s > 0:
            padded = torch.roll(padded, (-s, -s), (1, 2))
        region = window_partition(region, ws).view(-1, ws * ws)
        padded = window_partition(padded, ws).view(-1, ws * ws)
        blocked = (region[:, :, None] != region[:, None, :]) | (padded[:, None, :] > 0)
        mask = torch.zeros(blocked.shape, dtype=dtype).masked_fill(blocked, MASK_VALUE).to(device)
        self._mask_cache[key] = mask
        return mask

    def forward(self, x: torch.Tensor, grid: tuple[int, int], return_weights: bool = False):
        b, n, c = x.shape
        h, w = grid
        ws, s = self.window_size, self.shift_size
        x = x.view(b, h, w, c)
        pad_b, pad_r = (-h) % ws, (-w) % ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = h + pad_b, w + pad_r
        if s > 0:
            x = torch.roll(x, (-s, -s), (1, 2))
        windows = window_partition(x, ws).view(-1, ws * ws, c)
        mask = self._mask(h, w, x.device, x.dtype)
        out = self.attn(windows, mask, return_weights=return_weights)
        if return_weights:
            out, weights = out
        x = window_reverse(out.view(-1, ws, ws, c), ws, hp, wp)
        if s > 0:
            x = torch.roll(x, (s, s), (1, 2))
        x = x[:, :h, :w, :].reshape(b, h * w, c)
        if return_weights:
            return x, weights
        return x


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm transformer block: ``x + MSA(LN(x))`` then ``+ MLP(LN(.))``."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift_size: int = 0,
                 mlp_ratio: float = 4.0, layer_index: int = 0):
        super().__init__()
        self.layer_index = layer_index
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ShiftedWindowMSA(dim, num_heads, window_size, shift_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    @property
    def shifted(self) -> bool:
        return self.attn.shift_size > 0

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), grid)
        x = x + self.mlp(self.norm2(x))
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activation in Swin layer {self.layer_index}")
        return x


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> SwinStageOutput:
        x = self.proj(x)
        h, w = x.shape[-2:]
        return SwinStageOutput(self.norm(x.flatten(2).transpose(1, 2)), (h, w))


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighbours and project 4C -> 2C, halving the grid."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, s: SwinStageOutput) -> SwinStageOutput:
        b, _, c = s.tokens.shape
        h, w = s.grid
        if h % 2 or w % 2:
            raise ConfigurationError(f"patch merging needs an even grid, got {s.grid}")
        x = s.tokens.view(b, h, w, c)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        x = self.reduction(self.norm(x.view(b, -1, 4 * c)))
        return SwinStageOutput(x, (h // 2, w // 2))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int,
                 mlp_ratio: float, first_layer: int, downsample: bool):
        super().__init__()
        self.downsample = PatchMerging(dim // 2) if downsample else None
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size,
                      shift_size=0 if j % 2 == 0 else window_size // 2,
                      mlp_ratio=mlp_ratio, layer_index=first_layer + j)
            for j in range(depth)
        )

    def forward(self, s: SwinStageOutput) -> SwinStageOutput:
        if self.downsample is not None:
            s = self.downsample(s)
        x = s.tokens
        for block in self.blocks:
            x = block(x, s.grid)
        return SwinStageOutput(x, s.grid)


class SwinBranch(nn.Module):
    """Hierarchical Swin encoder returning the normalized output of every stage."""

    def __init__(self, in_channels: int = 3, embed_dim: int = 96,
                 depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24),
                 window_size: int = 7, patch_size: int = 4, mlp_ratio: float = 4.0):
        super().__init__()
        self.patch_embed = PatchEmbed(in_channels, embed_dim, patch_size)
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList(nn.LayerNorm(embed_dim * 2**i) for i in range(len(depths)))
        layer = 0
        for i, (depth, heads) in enumerate(zip(depths, num_heads)):
            self.stages.append(
                SwinStage(embed_dim * 2**i, depth, heads, window_size, mlp_ratio,
                          first_layer=layer, downsample=i > 0)
            )
            layer += depth

    def forward(self, x: torch.Tensor) -> list[SwinStageOutput]:
        s = self.patch_embed(x)
        outputs = []
        for stage, norm in zip(self.stages, self.norms):
            s = stage(s)
            outputs.append(SwinStageOutput(norm(s.tokens), s.grid))
        return outputs


def window_attention(tokens: torch.Tensor, grid: tuple[int, int], msa: ShiftedWindowMSA,
                     return_weights: bool = False):
    """Apply a (shifted) window attention module to ``tokens`` laid out on ``grid``."""
    return msa(tokens, grid, return_weights=return_weights)


def swin_block(s_prev: SwinStageOutput, block: SwinBlock) -> SwinStageOutput:
    return SwinStageOutput(block(s_prev.tokens, s_prev.grid), s_prev.grid)
