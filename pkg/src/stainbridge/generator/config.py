from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from stainbridge.errors import ConfigurationError


@dataclass
class GeneratorConfig:
    """Hyperparameters of the dual-branch generator.

    Defaults follow the Swin-T auxiliary branch and the pix2pix residual
    generator for the main branch.
    """

    input_channels: int = 3
    output_channels: int = 3
    base_width: int = 64
    num_downsamples: int = 2
    num_residual_blocks: int = 9
    dropout: float = 0.5
    swin_embed_dim: int = 96
    swin_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    swin_num_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    swin_window_size: int = 7
    swin_mlp_ratio: float = 4.0
    patch_embed_size: int = 4
    fusion_stages: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    fusion_num_heads: int = 8
    top_k_fraction: float = 0.25

    def __post_init__(self):
        self.validate()

    @property
    def num_swin_stages(self) -> int:
        return len(self.swin_depths)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2**self.num_downsamples

    @property
    def size_multiple(self) -> int:
        """Input height/width must be a multiple of this value."""
        return max(
            self.patch_embed_size * 2 ** (self.num_swin_stages - 1),
            2**self.num_downsamples,
        )

    def stage_dim(self, stage: int) -> int:
        return self.swin_embed_dim * 2**stage

    def validate(self) -> None:
        if len(self.swin_depths) != len(self.swin_num_heads):
            raise ConfigurationError(
                f"swin_depths ({len(self.swin_depths)}) and swin_num_heads "
                f"({len(self.swin_num_heads)}) must have equal length"
            )
        if not self.swin_depths:
            raise ConfigurationError("at least one Swin stage is required")
        for i, heads in enumerate(self.swin_num_heads):
            if self.stage_dim(i) % heads:
                raise ConfigurationError(
                    f"Swin stage {i}: embed dim {self.stage_dim(i)} not divisible by {heads} heads"
                )
        for s in self.fusion_stages:
            if not 0 <= s < self.num_swin_stages:
                raise ConfigurationError(
                    f"fusion stage {s} out of range for {self.num_swin_stages} Swin stages"
                )
        if len(set(self.fusion_stages)) != len(self.fusion_stages):
            raise ConfigurationError(f"duplicate fusion stages: {self.fusion_stages}")
        if not 0.0 < self.top_k_fraction <= 1.0:
            raise ConfigurationError(f"top_k_fraction must be in (0, 1], got {self.top_k_fraction}")
        if self.bottleneck_channels % self.fusion_num_heads:
            raise ConfigurationError(
                f"bottleneck channels {self.bottleneck_channels} not divisible by "
                f"fusion_num_heads {self.fusion_num_heads}"
            )
        for name in ("input_channels", "output_channels", "base_width", "swin_embed_dim",
                     "swin_window_size", "patch_embed_size", "fusion_num_heads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.num_residual_blocks < 0 or self.num_downsamples < 0:
            raise ConfigurationError("num_residual_blocks and num_downsamples must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def small(cls, **overrides) -> "GeneratorConfig":
        """A narrow configuration for CPU smoke runs and tests."""
        params = dict(
            base_width=16,
            num_residual_blocks=3,
            swin_embed_dim=24,
            swin_depths=[2, 2, 2, 2],
            swin_num_heads=[1, 2, 3, 6],
            fusion_num_heads=4,
        )
        params.update(overrides)
        return cls(**params)
