"""Run configuration: architecture, training, loss weights, data and distortions.

Everything serializes to JSON and back without loss; unknown keys are
rejected so typos in config files fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class GanConfig:
    fine_size: int = 512
    base_channels: int = 64
    coarse_res_blocks: int = 9
    fine_res_blocks: int = 3
    latent_dim: int = 64
    heads: int = 4
    mlp_sizes: list[int] = field(default_factory=lambda: [128, 64])
    encoder_blocks: int = 8
    dropout: float = 0.1
    patch_grid: int = 8
    num_classes: int = 2
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = "float64"

    @property
    def coarse_size(self) -> int:
        return self.fine_size // 2

    @property
    def fine_patch(self) -> int:
        return self.fine_size // self.patch_grid

    @property
    def coarse_patch(self) -> int:
        return self.coarse_size // self.patch_grid

    def validate(self) -> None:
        if self.fine_size % (4 * self.patch_grid):
            raise ConfigError(f"fine_size {self.fine_size} must be divisible by 4 * patch_grid")
        if self.latent_dim % self.heads:
            raise ConfigError(f"latent_dim {self.latent_dim} not divisible by heads {self.heads}")
        if self.mlp_sizes[-1] != self.latent_dim:
            raise ConfigError("last MLP width must equal latent_dim for the residual connection")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class LossWeights:
    adv: float = 10.0
    mse: float = 10.0
    perc: float = 10.0
    ef: float = 1.0
    cce: float = 10.0

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 200
    d_steps_per_g_step: int = 2
    checkpoint_every: int = 0  # in steps; 0 means once per epoch only
    log_every: int = 1

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.d_steps_per_g_step < 1:
            raise ConfigError("lr, batch_size, epochs and d_steps_per_g_step must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class DistortionConfig:
    blur_sigma: float = 2.0
    sharp_amount: float = 1.0
    sharp_sigma: float = 1.0
    noise_sigma: float = 0.05
    pinch: float = 0.3
    whirl_degrees: float = 30.0


@dataclass
class DataConfig:
    crop_size: int = 0  # 0 means fine_size
    crops_per_image: int = 50
    test_fraction: float = 0.45
    balance: bool = True


@dataclass
class PathConfig:
    data_dir: str = ""
    manifest: str = ""
    run_dir: str = "runs/default"
    perceptual_weights: str = ""
    metric_weights: str = ""


@dataclass
class RunConfig:
    scale: str = "full"
    seed: int = 0
    gan: GanConfig = field(default_factory=GanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self) -> "RunConfig":
        if self.scale not in ("full", "desk"):
            raise ConfigError(f"scale must be 'full' or 'desk', got {self.scale!r}")
        self.gan.validate()
        self.train.validate()
        self.loss.validate()
        return self

    @property
    def crop_size(self) -> int:
        return self.data.crop_size or self.gan.fine_size

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object at {where or 'top level'}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        elif isinstance(current, list):
            kwargs[name] = list(value)
        elif isinstance(current, bool):
            kwargs[name] = bool(value)
        elif isinstance(current, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def desk_gan() -> GanConfig:
    """Proportionally shrunk architecture: same topology, 64x64 fine scale."""
    return GanConfig(fine_size=64, base_channels=16, latent_dim=16, mlp_sizes=[32, 16])


def preset(scale: str) -> RunConfig:
    if scale == "full":
        return RunConfig(scale="full")
    if scale == "desk":
        return RunConfig(scale="desk", gan=desk_gan())
    raise ConfigError(f"unknown scale preset {scale!r}")


def merge(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply a (possibly partial, nested) dict of overrides to ``cfg``."""
    merged = _deep_update(cfg.to_dict(), overrides)
    return RunConfig.from_dict(merged)


def _deep_update(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out
