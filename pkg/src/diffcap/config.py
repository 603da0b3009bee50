"""Run configuration shared by the CLI, training and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import CAM_RULES, TIMESTEP_MODES, DenoiserConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Architecture and corruption settings; the vocabulary fills in the rest."""

    layers: int = 4
    d_model: int = 128
    heads: int = 4
    d_ff: int = 512
    T: int = 20
    step_scale: float = 8000.0
    timestep_embedding: str = "sinusoidal"
    c_u: float = 0.1

    def __post_init__(self):
        if self.timestep_embedding not in TIMESTEP_MODES:
            raise ConfigError(f"timestep_embedding must be one of {TIMESTEP_MODES}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.c_u < 1.0 or self.T < 1:
            raise ConfigError("need T >= 1 and c_u in [0, 1)")

    def denoiser_config(self, vocab_size: int) -> DenoiserConfig:
        return DenoiserConfig(
            vocab_size=vocab_size,
            layers=self.layers,
            d_model=self.d_model,
            heads=self.heads,
            d_ff=self.d_ff,
            T=self.T,
            step_scale=self.step_scale,
            timestep_embedding=self.timestep_embedding,
        )


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-4
    warmup_frac: float = 0.2
    weight_decay: float = 0.01
    image_free_ratio: float = 0.2
    length_weight: float = 0.2
    grad_clip: float = 1.0
    mode: str = "diffusion"
    cam: str = "both"
    length_prediction: bool = True
    precision: str = "float32"
    val_limit: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.image_free_ratio <= 1.0:
            raise ConfigError(f"image_free_ratio must lie in [0, 1], got {self.image_free_ratio}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.mode not in ("diffusion", "ar"):
            raise ConfigError(f"mode must be diffusion or ar, got {self.mode!r}")
        if self.cam not in CAM_RULES:
            raise ConfigError(f"cam must be one of {sorted(CAM_RULES)}, got {self.cam!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: str | None = None
    seed: int = 0
    deterministic: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kwargs = {}
        for name, sub in (("model", ModelSpec), ("train", TrainConfig), ("sampler", SamplerConfig)):
            kwargs[name] = _build(sub, d.pop(name, {}), name)
        for key in ("data", "seed", "deterministic"):
            if key in d:
                kwargs[key] = d.pop(key)
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def with_updates(self, **sections) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``train={"cam": "off"}``."""
        d = self.to_dict()
        for section, values in sections.items():
            if isinstance(values, dict):
                d[section] = {**d[section], **values}
            else:
                d[section] = values
        return RunConfig.from_dict(d)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None
