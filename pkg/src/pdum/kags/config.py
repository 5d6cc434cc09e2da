"""Run configuration: defaults, presets, JSON loading and validation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, ConfigMismatchError

__all__ = ["RunConfig", "ARCHITECTURE_KEYS", "load_config", "check_architecture"]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

_CHOICES = {
    "weight_decay_mode": ("decoupled", "l2"),
    "regional_ca_keys": ("full", "flattened"),
    "flatten_activation": ("relu", "none"),
    "bn_inference": ("running", "batch"),
    "ablation": ("none", "kg", "k", "c", "g"),
}

# Keys that change the shapes or wiring of the network.
ARCHITECTURE_KEYS = (
    "ablation",
    "cca_layers",
    "d_hidden",
    "d_model",
    "feature_dim",
    "flatten_activation",
    "k_relations",
    "m_boxes",
    "n_heads",
    "n_images",
    "regional_ca_keys",
    "sop_reduced_channels",
)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. The defaults are the full-size configuration."""

    d_model: int = 1024
    d_hidden: int = 512
    n_heads: int = 8
    cca_layers: int = 6
    k_relations: int = 20
    m_boxes: int = 36
    n_images: int = 5
    beam_size: int = 3
    lr: float = 4e-4
    weight_decay: float = 5e-4
    batch_size: int = 50
    epochs: int = 21
    vocab_min_count: int = 3
    sop_reduced_channels: int | None = None
    max_sentence_len: int = 25
    seed: int = 0
    feature_dim: int = 2048
    grad_clip: float = 5.0
    weight_decay_mode: str = "decoupled"
    regional_ca_keys: str = "full"
    flatten_activation: str = "relu"
    bn_inference: str = "running"
    ablation: str = "none"

    def __post_init__(self) -> None:
        for name in (
            "d_model",
            "d_hidden",
            "n_heads",
            "cca_layers",
            "k_relations",
            "m_boxes",
            "n_images",
            "beam_size",
            "batch_size",
            "epochs",
            "max_sentence_len",
            "feature_dim",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_min_count < 0:
            raise ConfigError(f"vocab_min_count must be non-negative, got {self.vocab_min_count}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be non-negative")
        reduced = self.sop_reduced_channels
        if reduced is not None and not 1 <= reduced <= self.d_model:
            raise ConfigError(f"sop_reduced_channels must lie in [1, {self.d_model}], got {reduced}")
        for name, choices in _CHOICES.items():
            if getattr(self, name) not in choices:
                raise ConfigError(f"{name} must be one of {choices}, got {getattr(self, name)!r}")

    @property
    def reduced_channels(self) -> int:
        return self.sop_reduced_channels or max(1, self.d_model // 8)

    @classmethod
    def scaled(cls, **overrides: Any) -> RunConfig:
        """The desk-scale preset used for memorization and determinism runs."""

        base = cls(
            d_model=64,
            d_hidden=32,
            n_heads=2,
            cca_layers=2,
            k_relations=5,
            m_boxes=8,
            vocab_min_count=0,
            batch_size=1,
            epochs=500,
            lr=2e-3,
            weight_decay=0.0,
            max_sentence_len=16,
            bn_inference="batch",
        )
        return base.replace(**overrides)

    def replace(self, **overrides: Any) -> RunConfig:
        unknown = sorted(set(overrides) - {f.name for f in dataclasses.fields(self)})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any], *, base: RunConfig | None = None) -> RunConfig:
        """Build a config from ``values`` layered over ``base`` (defaults when omitted).

        Raises
        ------
        ConfigError
            If ``values`` contains an unknown key or an invalid value.
        """

        try:
            return (base or cls()).replace(**dict(values))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def architecture(self) -> dict[str, Any]:
        values = self.to_dict()
        values["sop_reduced_channels"] = self.reduced_channels
        return {key: values[key] for key in ARCHITECTURE_KEYS}


def load_config(path: str | Path, *, base: RunConfig | None = None) -> RunConfig:
    """Read a JSON object of config keys.

    Raises
    ------
    ConfigError
        If the file is not a JSON object or names unknown keys.
    """

    source = Path(path)
    try:
        raw = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: expected a JSON object")
    config = RunConfig.from_dict(raw, base=base)
    logger.info("Loaded config from %s", source)
    return config


def check_architecture(stored: Mapping[str, Any], expected: RunConfig) -> None:
    """Raise :class:`ConfigMismatchError` naming the first differing architecture key."""

    wanted = expected.architecture()
    for key in ARCHITECTURE_KEYS:
        if stored.get(key) != wanted[key]:
            raise ConfigMismatchError(key, stored.get(key), wanted[key])
