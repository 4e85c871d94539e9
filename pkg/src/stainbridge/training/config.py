from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from stainbridge.errors import ConfigurationError


@dataclass
class TrainConfig:
    total_epochs: int = 100
    constant_lr_epochs: int = 50
    initial_lr: float = 3e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_l1: float = 100.0
    batch_size: int = 1
    seed: int = 0
    crop_size: int = 0  # 0 = train on full patches
    checkpoint_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        if not 0 <= self.constant_lr_epochs <= self.total_epochs:
            raise ConfigurationError(
                f"constant_lr_epochs {self.constant_lr_epochs} must be in [0, {self.total_epochs}]"
            )
        if self.initial_lr <= 0:
            raise ConfigurationError("initial_lr must be > 0")
        if self.lambda_l1 < 0:
            raise ConfigurationError("lambda_l1 must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
