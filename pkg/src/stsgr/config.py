"""Model and training configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .transformer import SHUFFLE_MODES

TASKS = ("generate", "retrieve", "both")
RETRIEVAL_CONTEXTS = ("raw", "coattn")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Flat hyperparameter record; defaults are the desk-scale profile."""

    task: str = "generate"
    d_h: int = 64
    d_ff: int = 256
    heads: int = 4
    tau: int = 3
    gat_layers: int = 1
    edgeconv_layers: int = 1
    shuffle_mode: str = "deterministic"
    shuffle_groups: int = 0
    residual: bool = True
    dropout: float = 0.0
    label_smoothing: float = 0.1
    label_dim: int = 16
    audio_dim: int = 128
    use_audio: bool = False
    use_gat: bool = True
    use_edgeconv: bool = True
    use_union: bool = True
    use_labels: bool = True
    leaky_slope: float = 0.2
    retrieval_context: str = "raw"
    beam_width: int = 3
    max_answer_len: int = 12
    history_turns: int = 3
    min_count: int = 5
    batch_size: int = 16
    warmup: int = 400
    lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    epochs: int = 10
    max_steps: int = 0
    eval_every: int = 0
    val_fraction: float = 0.0
    target_accuracy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["d_h", "d_ff", "heads", "tau", "gat_layers", "edgeconv_layers", "beam_width",
                    "max_answer_len", "batch_size", "warmup", "audio_dim"]
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} must be divisible by heads={self.heads}")
        if self.tau % 2 == 0:
            raise ConfigError(f"tau must be odd, got {self.tau}")
        if self.shuffle_mode not in SHUFFLE_MODES:
            raise ConfigError(f"shuffle_mode must be one of {SHUFFLE_MODES}")
        if self.shuffle_groups < 0 or (self.d_h // self.heads) % self.groups:
            raise ConfigError(f"head width {self.d_h // self.heads} not divisible into {self.groups} segments")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.retrieval_context not in RETRIEVAL_CONTEXTS:
            raise ConfigError(f"retrieval_context must be one of {RETRIEVAL_CONTEXTS}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.label_dim < 0 or self.history_turns < 0 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("label_dim, history_turns, epochs and max_steps must be non-negative")

    @property
    def groups(self) -> int:
        """Segments per head for shuffling; 0 in the config means one per head."""
        return self.shuffle_groups or self.heads

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        d = dict(d)
        profile = d.pop("profile", "desk")
        base = PROFILES.get(profile)
        if base is None:
            raise ConfigError(f"unknown profile {profile!r}")
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {**base, **d}
        for name, value in merged.items():
            kind = type(getattr(cls, name, None)) if hasattr(cls, name) else None
            if kind is bool and not isinstance(value, bool):
                raise ConfigError(f"{name} must be a boolean")
            if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{name} must be an integer")
            if kind is float and not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number")
            if kind is str and not isinstance(value, str):
                raise ConfigError(f"{name} must be a string")
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a flat key/value document")
        return cls.from_dict(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PROFILES: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "d_h": 512, "d_ff": 2048, "heads": 8, "warmup": 10000, "label_dim": 300,
        "dropout": 0.1, "beam_width": 5, "min_count": 5, "batch_size": 16,
    },
}
