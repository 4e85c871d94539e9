from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from stainbridge.errors import ConfigurationError, InputValidationError


@dataclass
class DiscriminatorConfig:
    input_channels: int = 6
    num_layers: int = 3
    base_width: int = 64

    def validate(self, generator_in: int = 3, generator_out: int = 3) -> None:
        if self.input_channels != generator_in + generator_out:
            raise ConfigurationError(
                f"discriminator input_channels {self.input_channels} != "
                f"{generator_in} + {generator_out}"
            )
        if self.num_layers < 1 or self.base_width < 1:
            raise ConfigurationError("num_layers and base_width must be >= 1")


class PatchDiscriminator(nn.Module):
    """PatchGAN conditioned on the H&E input by channel concatenation.

    With ``num_layers=3`` this is the 70x70 PatchGAN: five 4x4 convolutions
    with strides 2, 2, 2, 1, 1, mapping 256x256 to a 30x30 logit map.
    """

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        nf = config.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(config.input_channels, nf, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, True),
        ]
        mult = 1
        for n in range(1, config.num_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [
                nn.Conv2d(nf * prev, nf * mult, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(nf * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2**config.num_layers, 8)
        layers += [
            nn.Conv2d(nf * prev, nf * mult, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(nf * mult),
            nn.LeakyReLU(0.2, True),
        ]
        self.body = nn.Sequential(*layers)
        self.final = nn.Conv2d(nf * mult, 1, 4, stride=1, padding=1)

    def forward(self, hne: torch.Tensor, mihc: torch.Tensor) -> torch.Tensor:
        if hne.shape[0] != mihc.shape[0] or hne.shape[-2:] != mihc.shape[-2:]:
            raise InputValidationError(
                f"H&E {tuple(hne.shape)} and mIHC {tuple(mihc.shape)} batch/spatial dims differ"
            )
        return self.final(self.body(torch.cat([hne, mihc], dim=1)))


def patch_logit_size(size: int, num_layers: int = 3) -> int:
    """Logit map side for a square input, from k=4/p=1 convolution arithmetic."""
    for _ in range(num_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def discriminator_forward(hne, mihc, model: PatchDiscriminator) -> torch.Tensor:
    return model(hne, mihc)
