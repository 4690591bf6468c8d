"""Experiment configuration: defaults, YAML overlay, strict validation.

Every field has a default, so every command runs with zero flags; unknown
keys are rejected so a typo cannot silently fall back to a default. Together
with the code version, a resolved config fully determines a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DatagenSection:
    n: int = 2000
    range_bins: int = 32
    azimuth_bins: int = 32
    image_height: int = 32
    image_width: int = 32
    sigma_radar: float | None = None   # None: 5% of the far-car peak
    sigma_image: float = 0.05
    vision_fraction: float = 0.2


@dataclass
class VisionSection:
    mode: str = "supervised"           # or "random-frozen"
    epochs: int = 120
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    holdout_fraction: float = 0.2


@dataclass
class ContrastiveSection:
    tau: float = 0.07
    queue_size: int = 256
    batch_size: int = 64
    epochs: int = 200
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    normalize: bool = True


@dataclass
class EvalSection:
    fractions: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.5, 1.0])
    queue_sizes: list[int] = field(default_factory=lambda: [8, 32, 128, 256])
    n_seeds: int = 3
    probe_epochs: int = 32
    finetune_epochs: int = 32
    baseline_epochs: int = 128
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8


@dataclass
class MiSection:
    dim: int = 1
    rhos: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9])
    queue_size: int = 256
    embed_dim: int = 8
    pair_count: int = 12288
    batch_size: int = 128
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    n_seeds: int = 5


@dataclass
class IoSection:
    out_dir: str = "runs"


@dataclass
class ExperimentConfig:
    seed: int = 7
    embed_dim: int = 128
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 256])
    datagen: DatagenSection = field(default_factory=DatagenSection)
    vision: VisionSection = field(default_factory=VisionSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    eval: EvalSection = field(default_factory=EvalSection)
    mi: MiSection = field(default_factory=MiSection)
    io: IoSection = field(default_factory=IoSection)


_SCALARS = (int, float, str, bool, type(None))


def _apply(obj, mapping: dict, path: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            _apply(current, value, where)
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be a list")
            setattr(obj, key, list(value))
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be a boolean")
            setattr(obj, key, value)
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer")
            setattr(obj, key, value)
        elif isinstance(current, float) or current is None:
            if value is not None and not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")
            setattr(obj, key, None if value is None else float(value))
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string")
            setattr(obj, key, value)
        else:
            raise ConfigError(f"cannot assign {where}")


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, overlaid by an optional YAML file, then explicit overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        _apply(cfg, loaded, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
