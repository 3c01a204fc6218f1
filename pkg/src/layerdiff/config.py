"""JSON run configuration with sections ``model``, ``diffusion``, ``training``, ``data``."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    image_channels: int = 3
    patch: int = 2
    codec: str = "patchify"
    widths: list = field(default_factory=lambda: [32, 64])
    groups: int = 8
    heads: int = 2
    d_cond: int = 64
    temb_dim: int = 64
    encoder_hidden: int = 16
    lora_rank: int = 16
    lora_alpha: float = 16.0
    use_lora: bool = True
    use_sma: bool = True
    use_offsets: bool = True
    use_pose: bool = True
    use_parsing: bool = True
    layer_exchange: bool = False
    exchange_gamma: float = 0.1
    boundary_smoothing: bool = False
    smoothing_width: int = 1
    seed: int = 0

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch if self.codec == "patchify" else self.image_size

    @property
    def latent_channels(self) -> int:
        return self.image_channels * self.patch ** 2 if self.codec == "patchify" else self.image_channels

    def validate(self):
        if self.codec not in ("patchify", "identity"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if len(self.widths) != 2 or min(self.widths) <= 0:
            raise ConfigError("widths must hold two positive entries")
        if self.latent_size % 2:
            raise ConfigError("latent extent must be even for the two-level UNet")
        if self.image_size % 4:
            raise ConfigError("image size must be divisible by 4 for the pose/parsing encoders")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by {self.groups} groups")
        if self.widths[1] % self.heads:
            raise ConfigError("attention width must divide evenly into heads")
        rank_cap = min(self.widths[1], self.d_cond)
        if not 1 <= self.lora_rank <= rank_cap:
            raise ConfigError(f"lora rank must be in [1, {rank_cap}]")


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    sample_steps: int = 25

    def validate(self):
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ConfigError("need 0 < beta_min <= beta_max < 1")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ConfigError("sample_steps must be in [1, timesteps]")


@dataclass
class TrainingConfig:
    steps: int = 20000
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t0: int = 8000
    t1: int = 12000
    lambda_max: float = 1.0
    fg_loss_region: str = "inside"
    region_loss: bool = False
    region_beta_boundary: float = 0.5
    region_beta_gradient: float = 0.25
    protect_bg: bool = True
    bg_target: str = "background"
    checkpoint_every: int = 1000
    augment: bool = True

    def validate(self):
        if self.t0 >= self.t1:
            raise ConfigError("t0 must be smaller than t1")
        if self.lambda_max < 0:
            raise ConfigError("lambda_max must be nonnegative")
        if self.fg_loss_region not in ("inside", "outside"):
            raise ConfigError("fg_loss_region must be 'inside' or 'outside'")
        if self.bg_target not in ("background", "composite"):
            raise ConfigError("bg_target must be 'background' or 'composite'")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps nonnegative")


@dataclass
class DataConfig:
    size: int = 32
    min_instances: int = 1
    max_instances: int = 4
    occlusion_prob: float = 0.3
    crop: int = 0
    flip_prob: float = 0.5
    max_dilation: int = 1

    def validate(self):
        if not 1 <= self.min_instances <= self.max_instances <= 4:
            raise ConfigError("instance counts must satisfy 1 <= min <= max <= 4")
        if not 0 <= self.occlusion_prob <= 1 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not 0 <= self.max_dilation <= 2:
            raise ConfigError("max_dilation must be in [0, 2]")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "Config":
        for section in (self.model, self.diffusion, self.training, self.data):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        sections = {"model": ModelConfig, "diffusion": DiffusionConfig,
                    "training": TrainingConfig, "data": DataConfig}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            values = d.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name: f for f in dataclasses.fields(klass)}
            bad = set(values) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            for key, val in values.items():
                default = getattr(klass(), key)
                if isinstance(default, bool) and not isinstance(val, bool):
                    raise ConfigError(f"{name}.{key} must be a boolean")
                if isinstance(default, (int, float)) and not isinstance(default, bool):
                    if isinstance(val, bool) or not isinstance(val, (int, float)):
                        raise ConfigError(f"{name}.{key} must be a number")
                    if isinstance(default, int) and not isinstance(default, bool) and val != int(val):
                        raise ConfigError(f"{name}.{key} must be an integer")
            kwargs[name] = klass(**values)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None


def toy_config(size: int = 16) -> Config:
    """Small configuration used by the smoke experiment and the tests."""
    return Config(
        model=ModelConfig(image_size=size, widths=[16, 32], groups=4, heads=2, d_cond=32,
                          temb_dim=32, encoder_hidden=8, lora_rank=8, lora_alpha=16.0),
        diffusion=DiffusionConfig(),
        training=TrainingConfig(steps=800, batch_size=4, lr=3e-3, t0=200, t1=400, checkpoint_every=200),
        data=DataConfig(size=size, max_instances=3),
    ).validate()


def tiny_config(size: int = 8) -> Config:
    """Smallest model that still exercises every mechanism (gradient checks)."""
    return Config(
        model=ModelConfig(image_size=size, widths=[4, 8], groups=2, heads=2, d_cond=8,
                          temb_dim=8, encoder_hidden=4, lora_rank=2, lora_alpha=2.0),
        training=TrainingConfig(steps=10, batch_size=1, t0=2, t1=4, checkpoint_every=5),
        data=DataConfig(size=size, max_instances=2),
    ).validate()
