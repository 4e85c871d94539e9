"""Flat key/value run configuration.

Resolution order is defaults, then a config file, then command-line flags.
A config file holds one ``key = value`` per line; ``#`` starts a comment and
values are parsed as JSON when possible (``[2, 2, 6, 2]``, ``true``, ``3e-5``)
and kept as strings otherwise. Keys::

    seed, workers, device
    generator.preset                 "default" or "small"
    generator.<GeneratorConfig field>
    train.<TrainConfig field>        total_epochs, initial_lr, lambda_l1, ...
    train.val_limit                  validation images per epoch (0 = none)
    discriminator.<field>            num_layers, base_width
    data.margin, data.patch_size, data.overlap, data.normalize,
    data.drop_background, data.od_threshold, data.alpha,
    data.min_tissue_fraction
    downstream.sigma, downstream.min_cell_area, downstream.max_cell_area,
    downstream.bins
    report.plot
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from stainbridge.errors import ConfigurationError
from stainbridge.generator.config import GeneratorConfig
from stainbridge.imageio import atomic_write_text
from stainbridge.training.config import TrainConfig
from stainbridge.training.discriminator import DiscriminatorConfig

SNAPSHOT_NAME = "run_config.txt"


def _defaults() -> dict:
    d = {"seed": 0, "workers": 1, "device": "cpu", "generator.preset": "default",
         "train.val_limit": 8, "report.plot": False}
    for prefix, obj in (("generator", GeneratorConfig()), ("train", TrainConfig()),
                        ("discriminator", DiscriminatorConfig())):
        for f in dataclasses.fields(obj):
            d[f"{prefix}.{f.name}"] = getattr(obj, f.name)
    del d["train.seed"]  # driven by the top-level seed
    del d["discriminator.input_channels"]  # derived from the generator
    d.update({
        "data.margin": 50, "data.patch_size": 1024, "data.overlap": 0.5,
        "data.normalize": True, "data.drop_background": False,
        "data.od_threshold": 0.15, "data.alpha": 1.0, "data.min_tissue_fraction": 0.01,
        "downstream.sigma": 2.0, "downstream.min_cell_area": 20,
        "downstream.max_cell_area": 2000, "downstream.bins": 256,
    })
    return d


DEFAULTS = _defaults()


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


class RunConfig:
    """Resolved configuration; ``explicit`` records keys set by file or flags."""

    def __init__(self, values: dict | None = None, explicit: set[str] | None = None):
        self.values = dict(DEFAULTS)
        self.explicit: set[str] = set()
        if values:
            self.update(values)
        if explicit is not None:
            self.explicit = set(explicit)

    @classmethod
    def resolve(cls, config_file=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if config_file:
            path = Path(config_file)
            if not path.is_file():
                raise ConfigurationError(f"config file not found: {path}")
            cfg.update(parse_config_text(path.read_text(), str(path)))
        cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
        # materialize preset values so the snapshot alone reproduces the run
        for k, v in cfg.generator_config().to_dict().items():
            cfg.values[f"generator.{k}"] = v
        cfg.train_config()
        return cfg

    def update(self, values: dict) -> None:
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        self.values.update(values)
        self.explicit.update(values)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str, explicit_only: bool = False) -> dict:
        p = prefix + "."
        return {
            k[len(p):]: v for k, v in self.values.items()
            if k.startswith(p) and (not explicit_only or k in self.explicit)
        }

    def generator_overrides(self) -> dict:
        """Generator fields the user set explicitly (preset excluded)."""
        d = self.section("generator", explicit_only=True)
        d.pop("preset", None)
        return d

    def generator_config(self) -> GeneratorConfig:
        preset = self.values["generator.preset"]
        if preset not in ("default", "small"):
            raise ConfigurationError(f"generator.preset must be 'default' or 'small', got {preset!r}")
        if preset == "small":
            return GeneratorConfig.small(**self.generator_overrides())
        fields = self.section("generator")
        fields.pop("preset")
        return GeneratorConfig(**fields)

    def train_config(self) -> TrainConfig:
        fields = self.section("train")
        fields.pop("val_limit")
        return TrainConfig(seed=int(self.values["seed"]), **fields)

    def discriminator_config(self, gen: GeneratorConfig) -> DiscriminatorConfig:
        return DiscriminatorConfig(input_channels=gen.input_channels + gen.output_channels,
                                   **self.section("discriminator"))

    def dumps(self) -> str:
        lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / SNAPSHOT_NAME
        atomic_write_text(path, self.dumps())
        return path
