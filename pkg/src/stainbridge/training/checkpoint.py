"""Checkpoint archives.

A checkpoint is a single torch zip archive holding a plain dict::

    format             "STAINBRIDGE-CKPT-v1"
    generator_config   JSON-serialized GeneratorConfig
    generator          state dict (hierarchical parameter names -> tensors)

plus, for training checkpoints, ``discriminator``, ``discriminator_config``,
``optimizer_g``, ``optimizer_d``, ``train_config`` and ``epoch``.
Archives are loaded with ``weights_only=True``.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import torch

from stainbridge.errors import ConfigurationError
from stainbridge.generator import DualBranchGenerator, GeneratorConfig

CHECKPOINT_MAGIC = "STAINBRIDGE-CKPT-v1"


def save_checkpoint(path, generator: DualBranchGenerator, **training_state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_MAGIC,
        "generator_config": generator.config.to_json(),
        "generator": generator.state_dict(),
    }
    for key, value in training_state.items():
        if value is None:
            continue
        if hasattr(value, "state_dict"):
            value = value.state_dict()
        elif hasattr(value, "to_dict"):
            value = json.dumps(value.to_dict(), sort_keys=True)
        payload[key] = value
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt zip, pickle refusal, missing file
        raise ConfigurationError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_MAGIC} archive")
    return payload


def config_mismatches(stored: GeneratorConfig, requested: dict) -> list[str]:
    """Names of requested generator fields that disagree with the stored config."""
    stored_d = stored.to_dict()
    return sorted(k for k, v in requested.items() if k in stored_d and stored_d[k] != v)


def load_generator(path, expected: dict | None = None) -> DualBranchGenerator:
    """Rebuild the generator stored at ``path``.

    ``expected`` holds generator config fields requested by the caller; any
    disagreement with the stored config is reported by field name.
    """
    payload = load_checkpoint(path)
    config = GeneratorConfig.from_dict(json.loads(payload["generator_config"]))
    if expected:
        bad = config_mismatches(config, expected)
        if bad:
            detail = ", ".join(
                f"{k} (checkpoint {getattr(config, k)!r}, requested {expected[k]!r})" for k in bad
            )
            raise ConfigurationError(f"{path}: incompatible generator config: {detail}")
    model = DualBranchGenerator(config)
    missing, unexpected = model.load_state_dict(payload["generator"], strict=False)
    if missing or unexpected:
        raise ConfigurationError(
            f"{path}: parameter mismatch, missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}"
        )
    return model
