"""Configuration objects and the on-disk config format.

All hyperparameters live in a single flat TrainConfig so that runs are fully
described by one file. The on-disk format is YAML with a schema version;
unknown keys are hard errors so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import yaml

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class LossWeights:
    alpha: float = 0.6        # false-positive confidence weight
    beta: float = 0.6         # true-negative ELDice weight
    phi: float = 0.3          # ELDice exponent
    eps: float = 1e-5         # ELDice smoothing constant
    sigma: float = 5.0        # Gaussian mask-weighting std, pixels at 256x256
    lambda_align: float = 0.1 # bridge alignment weight (multimodal only)
    eta: float = 0.3          # DDPT auxiliary CE weight

    def validate(self):
        for name in ("alpha", "beta", "phi", "eps", "sigma", "lambda_align", "eta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass
class TrainConfig:
    # geometry
    image_size: int = 256
    k: int = 1024             # candidate prompt point count (perfect square)
    embed_dim: int = 256      # d
    num_heads: int = 4
    # backbone widths (budget-checked defaults)
    refiner_channels: tuple = (32, 64, 128)
    encoder_channels: tuple = (32, 64, 128, 256)
    upsampler_channels: tuple = (16, 8)
    # optimization (segmentation stage)
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    lr_halving_period: int = 20
    epochs: int = 60
    grad_clip: float = 5.0    # 0 disables clipping
    augment: bool = True
    # DDPT stage
    ddpt_lr: float = 0.01
    ddpt_weight_decay: float = 5e-4
    ddpt_momentum: float = 0.9
    tau: float = 0.07
    ddpt_epochs: int = 50
    ddpt_backbone_epochs: int = 30
    prompt_length: int = 16
    ddpt_patch_size: int = 4
    ddpt_vit_dim: int = 64
    ddpt_vit_depth: int = 3
    ddpt_text_dim: int = 64
    ddpt_shared_dim: int = 64
    # misc
    seed: int = 0
    modalities: tuple = ("T2",)
    bridge_modality: str = "T2"
    loss: LossWeights = field(default_factory=LossWeights)

    @property
    def grid_side(self) -> int:
        return int(round(math.sqrt(self.k)))

    @property
    def downsample_factor(self) -> int:
        return self.image_size // self.grid_side

    def validate(self):
        side = self.grid_side
        if side * side != self.k or self.k < 4:
            raise ConfigError(f"k={self.k} must be a perfect square >= 4")
        if self.image_size < side:
            raise ConfigError("image_size must be at least sqrt(k)")
        if self.image_size % side != 0:
            raise ConfigError("image_size must be divisible by sqrt(k)")
        factor = self.downsample_factor
        if factor & (factor - 1):
            raise ConfigError("image_size / sqrt(k) must be a power of two")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even")
        if self.embed_dim % self.num_heads:
            raise ConfigError("num_heads must divide embed_dim")
        if self.prompt_length % 2:
            raise ConfigError("prompt_length must be even")
        if self.bridge_modality not in self.modalities:
            raise ConfigError("bridge_modality must be one of modalities")
        if len(self.refiner_channels) != max(int(math.log2(factor)), 1):
            raise ConfigError(
                f"refiner_channels needs {max(int(math.log2(factor)), 1)} entries "
                f"for downsample factor {factor}")
        if len(self.upsampler_channels) != max(int(math.log2(factor)) - 1, 0):
            raise ConfigError(
                f"upsampler_channels needs {max(int(math.log2(factor)) - 1, 0)} "
                f"entries for downsample factor {factor}")
        self.loss.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["refiner_channels"] = list(self.refiner_channels)
        d["encoder_channels"] = list(self.encoder_channels)
        d["upsampler_channels"] = list(self.upsampler_channels)
        d["modalities"] = list(self.modalities)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    version = raw.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {version}")
    loss_raw = raw.pop("loss", {}) or {}
    unknown = set(loss_raw) - _field_names(LossWeights)
    unknown |= set(raw) - _field_names(TrainConfig)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    for key in ("refiner_channels", "encoder_channels", "upsampler_channels",
                "modalities"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = TrainConfig(**raw, loss=LossWeights(**loss_raw))
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return config_from_dict(raw)


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def toy_config(**overrides) -> TrainConfig:
    """Small configuration used for desk-scale tests and CPU runs."""
    base = dict(
        image_size=64, k=64, embed_dim=32, num_heads=4,
        refiner_channels=(16, 32, 32), encoder_channels=(16, 32, 32, 32),
        upsampler_channels=(16, 8), batch_size=16,
        ddpt_vit_dim=64, ddpt_vit_depth=3,
    )
    base.update(overrides)
    cfg = TrainConfig(**base)
    cfg.validate()
    return cfg
