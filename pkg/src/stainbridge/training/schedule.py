from __future__ import annotations

from stainbridge.errors import ConfigurationError


def lr_schedule(epoch: int, cfg) -> float:
    """Learning rate for a 1-based ``epoch``: constant, then linear decay to zero.

    >>> from stainbridge.training.config import TrainConfig
    >>> lr_schedule(75, TrainConfig())
    1.5e-05
    """
    if not 1 <= epoch <= cfg.total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [1, {cfg.total_epochs}]")
    if epoch <= cfg.constant_lr_epochs:
        return cfg.initial_lr
    span = cfg.total_epochs - cfg.constant_lr_epochs
    return cfg.initial_lr * ((cfg.total_epochs - epoch) / span)
