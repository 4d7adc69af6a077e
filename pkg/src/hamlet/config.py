"""Run configuration: model, training and data sections with validation.

Configs are plain JSON on disk. ``to_dict``/``from_dict`` round-trip exactly,
and unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

FUSIONS = ("MAT-SUM", "MAT-CONCAT", "SUM", "CONCAT")
VARIANTS = ("hamlet", "nsa", "usa", "keyless")
ENCODERS = ("stub", "cooccurrence")
DROPOUT_RANGE = (0.2, 0.4)


class ConfigError(ValueError):
    pass


@dataclass
class ModalityConfig:
    name: str
    dims: int
    encoder: str = "stub"
    kind: str = "vector"
    coords: int = 3
    channel_shape: list[int] = field(default_factory=list)


@dataclass
class ModelConfig:
    modalities: list[ModalityConfig] = field(default_factory=list)
    n_classes: int = 2
    variant: str = "hamlet"
    fusion: str = "MAT-CONCAT"
    embed_dim: int = 128
    spatial_dim: int | None = None
    segments: int = 8
    uat_heads: int = 1
    mat_heads: int = 2
    lstm_layers: int = 2
    dropout_encoder: float = 0.3
    dropout_unimodal: float = 0.3
    dropout_classifier: float = 0.3
    cooc_channels: list[int] = field(default_factory=lambda: [16, 32])
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def combiner(self) -> str:
        return "concat" if self.variant == "keyless" else self.fusion.split("-")[-1].lower()

    @property
    def fused_dim(self) -> int:
        m = len(self.modalities)
        return self.embed_dim * (m if self.combiner == "concat" else 1)

    def validate(self, allow_any_dropout: bool = False) -> None:
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names: {names}")
        for m in self.modalities:
            if m.encoder not in ENCODERS:
                raise ConfigError(f"modality {m.name!r}: encoder must be one of {ENCODERS}")
            if m.dims < 1:
                raise ConfigError(f"modality {m.name!r}: dims must be positive")
            if m.encoder == "cooccurrence" and m.dims % m.coords:
                raise ConfigError(f"modality {m.name!r}: {m.dims} features not divisible into {m.coords} coords")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.variant == "hamlet" and not self.fusion.startswith("MAT-"):
            raise ConfigError(f"variant 'hamlet' fuses with attention; use MAT-SUM or MAT-CONCAT, not {self.fusion}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.embed_dim < 1 or self.segments < 1 or self.lstm_layers < 1:
            raise ConfigError("embed_dim, segments and lstm_layers must be positive")
        for label, heads in (("uat_heads", self.uat_heads), ("mat_heads", self.mat_heads)):
            if heads < 1:
                raise ConfigError(f"{label} must be >= 1")
            if self.embed_dim % heads:
                raise ConfigError(f"embedding size {self.embed_dim} is not divisible by {label}={heads}")
        for label in ("dropout_encoder", "dropout_unimodal", "dropout_classifier"):
            p = getattr(self, label)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{label}={p} outside [0, 1)")
            if not allow_any_dropout and not DROPOUT_RANGE[0] <= p <= DROPOUT_RANGE[1]:
                raise ConfigError(f"{label}={p} outside [{DROPOUT_RANGE[0]}, {DROPOUT_RANGE[1]}] "
                                  "(pass --allow-any-dropout to override)")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    lr_min: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    t0_epochs: int = 10
    t_mult: int = 2
    schedule_unit: str = "step"
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    standardize: bool = True

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr and lr > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.t0_epochs < 1 or self.t_mult < 1:
            raise ConfigError("t0_epochs and t_mult must be >= 1")
        if self.schedule_unit not in ("step", "epoch"):
            raise ConfigError("schedule_unit must be 'step' or 'epoch'")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)
    out: str = "runs/default"
    allow_any_dropout: bool = False
    check_finite: bool = False

    def validate(self) -> None:
        self.model.validate(self.allow_any_dropout)
        self.train.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = _build(ModelConfig, d.pop("model", {}))
        train = _build(TrainConfig, d.pop("train", {}))
        return _build(cls, {**d, "model": model, "train": train})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None


def model_config_from_dict(d: dict) -> ModelConfig:
    return _build(ModelConfig, d)


def _build(cls, d):
    if isinstance(d, cls):
        return d
    d = dict(d)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is ModelConfig and "modalities" in d:
        d["modalities"] = [m if isinstance(m, ModalityConfig) else _build(ModalityConfig, m) for m in d["modalities"]]
    return cls(**d)


def config_hash(d: dict) -> bytes:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()
