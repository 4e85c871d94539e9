from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import torch

from stainbridge.errors import InputValidationError, NumericError
from stainbridge.generator import DualBranchGenerator, GeneratorConfig
from stainbridge.training.checkpoint import load_checkpoint, save_checkpoint
from stainbridge.training.config import TrainConfig
from stainbridge.training.discriminator import DiscriminatorConfig, PatchDiscriminator
from stainbridge.training.losses import (
    discriminator_terms,
    generator_adversarial,
    generator_objective,
    l1_loss,
)
from stainbridge.training.schedule import lr_schedule

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "g_adversarial", "g_l1", "g_total", "d_real", "d_fake",
               "val_ssim", "val_r", "val_psnr"]


@dataclass
class LossBreakdown:
    g_adversarial: float
    g_l1: float
    g_total: float
    d_real: float
    d_fake: float


def _check_finite(step: int, **terms) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericError(f"non-finite loss term {name!r} at step {step}")


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Alternating discriminator/generator updates with Adam."""

    def __init__(self, generator: DualBranchGenerator, discriminator: PatchDiscriminator,
                 cfg: TrainConfig, device: str | torch.device = "cpu"):
        self.cfg = cfg
        self.device = torch.device(device)
        self.generator = generator.to(self.device)
        self.discriminator = discriminator.to(self.device)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.initial_lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.initial_lr, betas=betas)
        self.epoch = 0  # completed epochs
        self.step_count = 0

    @classmethod
    def create(cls, gen_cfg: GeneratorConfig | None = None, train_cfg: TrainConfig | None = None,
               disc_cfg: DiscriminatorConfig | None = None, device="cpu") -> "Trainer":
        """Seed the global RNG from ``train_cfg.seed`` and build fresh models."""
        train_cfg = train_cfg or TrainConfig()
        gen_cfg = gen_cfg or GeneratorConfig()
        disc_cfg = disc_cfg or DiscriminatorConfig(
            input_channels=gen_cfg.input_channels + gen_cfg.output_channels
        )
        disc_cfg.validate(gen_cfg.input_channels, gen_cfg.output_channels)
        torch.manual_seed(train_cfg.seed)
        return cls(DualBranchGenerator(gen_cfg), PatchDiscriminator(disc_cfg), train_cfg, device)

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def generator_losses(self, hne, mihc, fake=None):
        """Generator-side loss terms (no parameter update)."""
        if fake is None:
            fake = self.generator(hne)
        g_adv = generator_adversarial(self.discriminator(hne, fake))
        g_l1 = l1_loss(fake, mihc)
        return g_adv, g_l1, generator_objective(g_adv, g_l1, self.cfg.lambda_l1)

    def train_step(self, hne: torch.Tensor, mihc: torch.Tensor,
                   update_discriminator: bool = True) -> LossBreakdown:
        if hne.shape[0] == 0:
            raise InputValidationError("empty batch")
        hne, mihc = hne.to(self.device), mihc.to(self.device)
        self.generator.train()
        self.discriminator.train()
        step = self.step_count
        fake = self.generator(hne)

        _set_requires_grad(self.discriminator, True)
        self.opt_d.zero_grad(set_to_none=True)
        d_real, d_fake = discriminator_terms(
            self.discriminator(hne, mihc), self.discriminator(hne, fake.detach())
        )
        _check_finite(step, d_real=d_real, d_fake=d_fake)
        if update_discriminator:
            (0.5 * (d_real + d_fake)).backward()
            self.opt_d.step()

        _set_requires_grad(self.discriminator, False)
        self.opt_g.zero_grad(set_to_none=True)
        g_adv, g_l1, g_total = self.generator_losses(hne, mihc, fake)
        _check_finite(step, g_adversarial=g_adv, g_l1=g_l1, g_total=g_total)
        g_total.backward()
        self.opt_g.step()
        _set_requires_grad(self.discriminator, True)

        self.step_count += 1
        return LossBreakdown(
            g_adversarial=g_adv.item(), g_l1=g_l1.item(), g_total=g_total.item(),
            d_real=d_real.item(), d_fake=d_fake.item(),
        )

    # epoch loop -----------------------------------------------------------

    def fit(self, batches: Callable[[int], Iterable], out_dir, epochs: int | None = None,
            validate: Callable[[DualBranchGenerator], dict] | None = None) -> Path:
        """Train from ``self.epoch + 1`` to ``epochs`` (default ``cfg.total_epochs``).

        ``batches(epoch)`` yields ``(hne, mihc)`` tensor pairs. Writes
        ``train_log.csv``, periodic ``checkpoint_epochNNN.pt`` and ``final.pt``.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        last = epochs or self.cfg.total_epochs
        log_path = out_dir / "train_log.csv"
        new_log = not log_path.exists() or self.epoch == 0
        with open(log_path, "w" if new_log else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if new_log:
                writer.writeheader()
            for epoch in range(self.epoch + 1, last + 1):
                lr = lr_schedule(epoch, self.cfg)
                self.set_lr(lr)
                sums = dict.fromkeys(("g_adversarial", "g_l1", "g_total", "d_real", "d_fake"), 0.0)
                n = 0
                for hne, mihc in batches(epoch):
                    try:
                        losses = self.train_step(hne, mihc)
                    except NumericError as exc:
                        raise NumericError(f"epoch {epoch}: {exc}") from exc
                    for key, value in asdict(losses).items():
                        sums[key] += value
                    n += 1
                row = {"epoch": epoch, "lr": lr}
                row.update({k: v / max(n, 1) for k, v in sums.items()})
                metrics = validate(self.generator) if validate else {}
                for key in ("val_ssim", "val_r", "val_psnr"):
                    row[key] = metrics.get(key, math.nan)
                writer.writerow(row)
                fh.flush()
                self.epoch = epoch
                log.info("epoch %d lr %.3g g_total %.4f d %.4f/%.4f", epoch, lr,
                         row["g_total"], row["d_real"], row["d_fake"])
                if self.cfg.checkpoint_every and epoch % self.cfg.checkpoint_every == 0:
                    self.save(out_dir / f"checkpoint_epoch{epoch:03d}.pt")
        return self.save(out_dir / "final.pt")

    def save(self, path) -> Path:
        return save_checkpoint(
            path, self.generator,
            discriminator=self.discriminator,
            discriminator_config=json.dumps(asdict(self.discriminator.config), sort_keys=True),
            optimizer_g=self.opt_g, optimizer_d=self.opt_d,
            train_config=self.cfg, epoch=self.epoch, step=self.step_count,
            rng_state=torch.get_rng_state(),
        )

    @classmethod
    def resume(cls, path, train_cfg: TrainConfig | None = None, device="cpu") -> "Trainer":
        """Restore models, optimizers, epoch counter and RNG from a training checkpoint.

        A ``train_cfg`` passed here overrides the stored one (e.g. more epochs).
        """
        payload = load_checkpoint(path)
        gen_cfg = GeneratorConfig.from_dict(json.loads(payload["generator_config"]))
        if "discriminator" not in payload:
            raise InputValidationError(f"{path}: inference-only checkpoint cannot be resumed")
        disc_cfg = DiscriminatorConfig(**json.loads(payload["discriminator_config"]))
        if train_cfg is None:
            train_cfg = TrainConfig(**json.loads(payload["train_config"]))
        trainer = cls(DualBranchGenerator(gen_cfg), PatchDiscriminator(disc_cfg), train_cfg, device)
        trainer.generator.load_state_dict(payload["generator"])
        trainer.discriminator.load_state_dict(payload["discriminator"])
        trainer.opt_g.load_state_dict(payload["optimizer_g"])
        trainer.opt_d.load_state_dict(payload["optimizer_d"])
        trainer.epoch = int(payload["epoch"])
        trainer.step_count = int(payload.get("step", 0))
        if "rng_state" in payload:
            torch.set_rng_state(payload["rng_state"])
        return trainer


def train_step(trainer: Trainer, hne, mihc) -> LossBreakdown:
    return trainer.train_step(hne, mihc)

