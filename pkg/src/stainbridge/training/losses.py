"""Conditional-GAN and L1 objectives.

Discriminator outputs are handled as logits; ``log D`` and ``log(1 - D)``
are evaluated with log-sigmoid so saturated outputs stay finite.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from stainbridge.errors import ConfigurationError, InputValidationError, NumericError


def cgan_value(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``E[log D(x, y)] + E[log(1 - D(x, G(x)))]``, means over batch and patches."""
    return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()


def cgan_value_from_probs(real_probs: torch.Tensor, fake_probs: torch.Tensor) -> torch.Tensor:
    for name, p in (("real", real_probs), ("fake", fake_probs)):
        if ((p <= 0) | (p >= 1)).any():
            raise NumericError(
                f"{name} probabilities must lie strictly inside (0, 1); pass logits instead"
            )
    return torch.log(real_probs).mean() + torch.log1p(-fake_probs).mean()


def discriminator_terms(real_logits, fake_logits) -> tuple[torch.Tensor, torch.Tensor]:
    """Binary cross-entropy of real pairs against 1 and fake pairs against 0."""
    d_real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    d_fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return d_real, d_fake


def generator_adversarial(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term, ``-E[log D(x, G(x))]``."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def cgan_loss(real_logits, fake_logits) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(d_loss, g_adv_loss)``.

    ``d_loss`` is half the negated cGAN value (the pix2pix weighting that slows
    the discriminator relative to the generator); ``g_adv_loss`` is the
    non-saturating generator term on the same fake logits.
    """
    d_real, d_fake = discriminator_terms(real_logits, fake_logits)
    return 0.5 * (d_real + d_fake), generator_adversarial(fake_logits)


def l1_loss(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    if fake.shape != real.shape:
        raise InputValidationError(f"L1 shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    return (fake - real).abs().mean()


def generator_objective(g_adv, l1, lambda_l1: float):
    if lambda_l1 < 0:
        raise ConfigurationError(f"lambda_l1 must be >= 0, got {lambda_l1}")
    return g_adv + lambda_l1 * l1
