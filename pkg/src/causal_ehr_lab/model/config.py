"""Hyperparameters for the transformer causal model."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from ..errors import ValidationError

MODES = ("tarnet", "tarnet-mem", "dragonnet", "t-behrt")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 150
    intermediate: int = 108
    n_layers: int = 4
    heads: int = 6
    hidden_dropout: float = 0.3
    attention_dropout: float = 0.4
    activation: str = "gelu"
    init_range: float = 0.02
    max_seq_len: int = 200
    delta: float = 0.1
    # absolute per-slot probabilities; their sum is the perturbation budget
    mem_mask_fraction: float = 0.12
    mem_replace_fraction: float = 0.015
    mem_keep_fraction: float = 0.015
    static_mask_prob: float = 0.15
    vae_latent_dim: int = 32
    head_hidden: int = 0  # 0 -> same as hidden
    learning_rate: float = 1e-3
    epochs_pretrain: int = 5
    epochs_joint: int = 10
    decay_rate: float = 0.95
    batch_size: int = 64
    max_age: int = 120
    year_base: int = 1900
    n_years: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValidationError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        for name in ("hidden_dropout", "attention_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1)")
        shares = (self.mem_mask_fraction, self.mem_replace_fraction, self.mem_keep_fraction)
        if min(shares) < 0 or sum(shares) > 1.0 + 1e-12:
            raise ValidationError("MEM mask/replace/keep fractions must be >= 0 and sum to at most 1")
        if not 0.0 <= self.static_mask_prob <= 1.0:
            raise ValidationError("static_mask_prob must be a probability")
        if self.activation != "gelu":
            raise ValidationError("only the gelu activation is supported")
        if self.max_seq_len < 5:
            raise ValidationError("max_seq_len must leave room for CLS and three static slots")
        if self.delta < 0:
            raise ValidationError("delta must be non-negative")

    @property
    def mem_budget(self) -> float:
        return self.mem_mask_fraction + self.mem_replace_fraction + self.mem_keep_fraction

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.hidden

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def paper_preset(**kw) -> ModelConfig:
    """Published BEHRT sizes (hidden 150, intermediate 108, 4 layers, n=200)."""
    return ModelConfig(**kw)


def desk_preset(**kw) -> ModelConfig:
    """CPU-sized variant used by tests and the acceptance suites."""
    base = dict(
        hidden=32,
        intermediate=64,
        n_layers=2,
        heads=4,
        max_seq_len=64,
        vae_latent_dim=8,
        learning_rate=1e-3,
        epochs_pretrain=5,
        epochs_joint=10,
        batch_size=64,
    )
    base.update(kw)
    return ModelConfig(**base)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


def load_config(path=None, preset: str = "desk") -> ModelConfig:
    overrides = {}
    if path is not None:
        overrides = json.loads(Path(path).read_text())
    try:
        factory = PRESETS[preset]
    except KeyError:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)
