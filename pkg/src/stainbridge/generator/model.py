from __future__ import annotations

import torch
import torch.nn as nn

from stainbridge.errors import InputValidationError
from stainbridge.generator.config import GeneratorConfig
from stainbridge.generator.fusion import FeatureMapFusion
from stainbridge.generator.residual import ResidualBranch
from stainbridge.generator.swin import SwinBranch


def fusion_insertion_points(num_blocks: int, num_fusions: int) -> list[int]:
    """Number of bottleneck residual blocks run before each fusion point.

    Fusions are spread evenly through the bottleneck; the last one always sits
    after the final block, right before the decoder.
    """
    if num_fusions == 0:
        return []
    return [(i + 1) * num_blocks // num_fusions for i in range(num_fusions)]


class DualBranchGenerator(nn.Module):
    """Residual-CNN generator with a Swin Transformer auxiliary branch.

    Every Swin stage listed in ``config.fusion_stages`` is fused into the CNN
    bottleneck, the CNN resolution closest to the Swin token grids (the
    bottleneck and the first Swin stage share the stride ``patch_embed_size``
    in the default configuration). Finer Swin stages are fused first.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        config.validate()
        self.cnn = ResidualBranch(
            config.input_channels, config.output_channels, config.base_width,
            config.num_downsamples, config.num_residual_blocks, config.dropout,
        )
        self.swin = SwinBranch(
            config.input_channels, config.swin_embed_dim, config.swin_depths,
            config.swin_num_heads, config.swin_window_size, config.patch_embed_size,
            config.swin_mlp_ratio,
        )
        self.fusion_order = sorted(config.fusion_stages)
        self.fusions = nn.ModuleDict({
            str(stage): FeatureMapFusion(
                config.stage_dim(stage), config.bottleneck_channels,
                config.fusion_num_heads, config.top_k_fraction,
            )
            for stage in self.fusion_order
        })
        self.insertion_points = fusion_insertion_points(
            config.num_residual_blocks, len(self.fusion_order)
        )

    def validate_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.input_channels:
            raise InputValidationError(
                f"expected (B, {cfg.input_channels}, H, W) input, got {tuple(x.shape)}"
            )
        m = cfg.size_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise InputValidationError(
                f"height and width must be multiples of {m}, got {tuple(x.shape[-2:])}"
            )
        if not torch.isfinite(x).all():
            raise InputValidationError("input contains non-finite values")
        if x.min() < -1.0 or x.max() > 1.0:
            raise InputValidationError(
                f"input values must lie in [-1, 1], got [{x.min().item():.4f}, {x.max().item():.4f}]"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.validate_input(x)
        stages = self.swin(x)
        f = self.cnn.encode(x)
        done = 0
        for stage, point in zip(self.fusion_order, self.insertion_points):
            for block in self.cnn.blocks[done:point]:
                f = block(f)
            done = point
            f = self.fusions[str(stage)](f, stages[stage])
        for block in self.cnn.blocks[done:]:
            f = block(f)
        return self.cnn.decode(f)


def generator_forward(hne: torch.Tensor, model: DualBranchGenerator) -> torch.Tensor:
    return model(hne)
