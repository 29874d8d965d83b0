"""Run configuration: dataclasses plus JSON file loading.

A config file is a JSON object with optional sections ``batch``, ``model``,
``train``, ``decode`` and ``data``; see README.md for the key list.  Every key
has a default, so ``{}`` is a valid (if not very useful) config.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .errors import ConfigError, VivoIOError


class Phase(str, Enum):
    PRETRAIN = "PRETRAIN"
    FINETUNE = "FINETUNE"


class LossMode(str, Enum):
    HUNGARIAN = "HUNGARIAN"
    ORDERED = "ORDERED"
    SINGLE_MASK = "SINGLE_MASK"


@dataclass(frozen=True)
class BatchConfig:
    d_app: int = 16
    max_regions: int = 50
    max_tag_tokens: int = 15
    max_caption: int = 40
    max_tags: int = 30
    mask_rate: float = 0.15
    mask_action_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "mask_action_probs", tuple(float(p) for p in self.mask_action_probs))
        if self.d_app < 1:
            raise ConfigError("batch.d_app must be positive")
        for name in ("max_regions", "max_tag_tokens", "max_caption", "max_tags"):
            if getattr(self, name) < 1:
                raise ConfigError(f"batch.{name} must be positive")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ConfigError("batch.mask_rate must lie in (0, 1]")
        probs = self.mask_action_probs
        if len(probs) != 3 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError("batch.mask_action_probs must be three non-negative numbers summing to 1")

    @property
    def d_region(self) -> int:
        return self.d_app + 6


@dataclass(frozen=True)
class ModelConfig:
    """Model shape without the vocabulary/region sizes, which come from data."""

    layers: int = 2
    hidden: int = 32
    heads: int = 2
    ff_dim: int = 128
    tie_head: bool = False
    dropout: float = 0.0
    init_std: float = 0.02


@dataclass(frozen=True)
class TrainConfig:
    phase: Phase = Phase.PRETRAIN
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    seed: int = 0
    loss_mode: LossMode = LossMode.HUNGARIAN
    shuffle_tags: bool = True
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        if self.phase is Phase.FINETUNE:
            object.__setattr__(self, "loss_mode", LossMode.ORDERED)
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay, warmup_steps and checkpoint_every must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive or null")
        if self.log_every < 1:
            raise ConfigError("train.log_every must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int = 20
    beam_width: int = 5
    cbs: bool = False
    num_constraints: int = 2
    length_normalize: bool = False


@dataclass(frozen=True)
class RunConfig:
    batch: BatchConfig = field(default_factory=BatchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        """Resolve a path from the ``data`` section relative to the config file."""
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


_SECTIONS = {"batch": BatchConfig, "model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def config_from_dict(raw: dict[str, Any], base_dir: str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"data"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    data = raw.get("data", {})
    if not isinstance(data, dict):
        raise ConfigError("section 'data' must be an object")
    return RunConfig(data=dict(data), base_dir=base_dir, **parts)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise VivoIOError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else (list(v) if isinstance(v, tuple) else v)
        return out

    return {
        "batch": plain(cfg.batch),
        "model": plain(cfg.model),
        "train": plain(cfg.train),
        "decode": plain(cfg.decode),
        "data": dict(cfg.data),
    }
