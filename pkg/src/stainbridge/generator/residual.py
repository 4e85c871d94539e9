"""Residual-CNN main branch (pix2pix ResNet generator layout)."""
from __future__ import annotations

import torch
import torch.nn as nn

from stainbridge.errors import ConfigurationError, InputValidationError


class ResidualBlock(nn.Module):
    """``x + block(x)`` with two reflect-padded 3x3 convolutions.

    Dropout between the convolutions plays the role of the generator noise
    input; it is active only in training mode.
    """

    def __init__(self, channels: int, dropout: float = 0.5):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
        ]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        layers += [
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            nn.InstanceNorm2d(channels),
        ]
        self.block = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.block(x)
        if out.shape != x.shape:
            raise ConfigurationError(
                f"residual skip {tuple(x.shape)} does not match block output {tuple(out.shape)}"
            )
        return x + out


def _stem(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ReflectionPad2d(3),
        nn.Conv2d(in_ch, out_ch, 7, bias=False),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _down(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _up(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1, bias=False),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _head(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ReflectionPad2d(3),
        nn.Conv2d(in_ch, out_ch, 7),
        nn.Tanh(),
    )


class ResidualBranch(nn.Module):
    """Encoder, residual bottleneck and mirrored decoder.

    Stages are indexed in execution order::

        0                   stem (7x7, base_width)
        1 .. D              stride-2 downsamples, channels doubling
        D + 1               residual bottleneck
        D + 2 .. 2D + 1     transposed-conv upsamples
        2D + 2              output head (7x7, tanh)

    The bottleneck is kept as a plain list so the generator can interleave
    feature-map fusion between its residual blocks.
    """

    def __init__(self, in_channels: int, out_channels: int, base_width: int = 64,
                 num_downsamples: int = 2, num_blocks: int = 9, dropout: float = 0.5):
        super().__init__()
        self.num_downsamples = num_downsamples
        self.stem = _stem(in_channels, base_width)
        self.down = nn.ModuleList(
            _down(base_width * 2**i, base_width * 2 ** (i + 1)) for i in range(num_downsamples)
        )
        width = base_width * 2**num_downsamples
        self.blocks = nn.ModuleList(ResidualBlock(width, dropout) for _ in range(num_blocks))
        self.up = nn.ModuleList(
            _up(base_width * 2 ** (i + 1), base_width * 2**i)
            for i in reversed(range(num_downsamples))
        )
        self.head = _head(base_width, out_channels)

    @property
    def num_stages(self) -> int:
        return 2 * self.num_downsamples + 3

    @property
    def bottleneck_stage(self) -> int:
        return self.num_downsamples + 1

    def stage(self, x: torch.Tensor, stage: int) -> torch.Tensor:
        """Run a single stage of the branch on ``x``."""
        if not 0 <= stage < self.num_stages:
            raise ConfigurationError(f"stage {stage} outside [0, {self.num_stages})")
        d = self.num_downsamples
        if stage == 0:
            return self.stem(x)
        if stage <= d:
            return self.down[stage - 1](x)
        if stage == d + 1:
            for block in self.blocks:
                x = block(x)
            return x
        if stage <= 2 * d + 1:
            return self.up[stage - d - 2](x)
        return self.head(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for layer in self.down:
            x = layer(x)
        return x

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.up:
            x = layer(x)
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in range(self.num_stages):
            x = self.stage(x, stage)
        return x


def residual_branch_stage(x: torch.Tensor, stage: int, branch: ResidualBranch) -> torch.Tensor:
    """Functional wrapper around :meth:`ResidualBranch.stage`."""
    if not torch.isfinite(x).all():
        raise InputValidationError("residual branch input contains non-finite values")
    return branch.stage(x, stage)
