from stainbridge.training.checkpoint import (
    CHECKPOINT_MAGIC,
    load_checkpoint,
    load_generator,
    save_checkpoint,
)
from stainbridge.training.config import TrainConfig
from stainbridge.training.discriminator import (
    DiscriminatorConfig,
    PatchDiscriminator,
    discriminator_forward,
    patch_logit_size,
)
from stainbridge.training.losses import (
    cgan_loss,
    cgan_value,
    cgan_value_from_probs,
    discriminator_terms,
    generator_adversarial,
    generator_objective,
    l1_loss,
)
from stainbridge.training.schedule import lr_schedule
from stainbridge.training.trainer import LOG_COLUMNS, LossBreakdown, Trainer, train_step

__all__ = [
    "CHECKPOINT_MAGIC", "DiscriminatorConfig", "LOG_COLUMNS", "LossBreakdown",
    "PatchDiscriminator", "TrainConfig", "Trainer", "cgan_loss", "cgan_value",
    "cgan_value_from_probs", "discriminator_forward", "discriminator_terms",
    "generator_adversarial", "generator_objective", "l1_loss", "load_checkpoint",
    "load_generator", "lr_schedule", "patch_logit_size", "save_checkpoint", "train_step",
]
