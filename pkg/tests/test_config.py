"""Tests for run configuration."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from pdum.kags.config import ARCHITECTURE_KEYS, RunConfig, check_architecture, load_config
from pdum.kags.errors import ConfigError, ConfigMismatchError


def test_defaults_are_full_size() -> None:
    """The default configuration is the full-size network."""
    config = RunConfig()
    assert (config.d_model, config.d_hidden, config.n_heads, config.cca_layers) == (1024, 512, 8, 6)
    assert (config.k_relations, config.m_boxes, config.n_images) == (20, 36, 5)
    assert (config.lr, config.weight_decay, config.batch_size, config.epochs) == (4e-4, 5e-4, 50, 21)
    assert config.reduced_channels == 128
    assert config.max_sentence_len == 25


def test_scaled_preset_and_overrides() -> None:
    """The desk preset shrinks the network and still accepts overrides."""
    config = RunConfig.scaled(feature_dim=32)
    assert (config.d_model, config.k_relations, config.m_boxes) == (64, 5, 8)
    assert config.weight_decay == 0.0
    assert config.feature_dim == 32
    assert config.reduced_channels == 8


@pytest.mark.parametrize(
    "overrides",
    [
        {"d_model": 10, "n_heads": 3},
        {"n_heads": 0},
        {"lr": 0.0},
        {"weight_decay_mode": "adamw"},
        {"ablation": "x"},
        {"sop_reduced_channels": 4096},
        {"epochs": True},
    ],
)
def test_invalid_values(overrides: dict) -> None:
    """Out-of-range values and unknown choices are configuration errors."""
    with pytest.raises(ConfigError):
        RunConfig().replace(**overrides)


def test_unknown_keys_are_rejected() -> None:
    """Typos do not pass silently."""
    with pytest.raises(ConfigError, match="d_modle"):
        RunConfig.from_dict({"d_modle": 8})


def test_load_config_layers_over_base(tmp_path: Path) -> None:
    """A JSON file overrides only the keys it names."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"epochs": 3, "feature_dim": 16}), encoding="utf-8")
    config = load_config(path, base=RunConfig.scaled())
    assert config.epochs == 3
    assert config.feature_dim == 16
    assert config.d_model == 64


def test_load_config_rejects_non_objects(tmp_path: Path) -> None:
    """Malformed JSON and non-object documents are reported."""
    path = tmp_path / "config.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(path)
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(path)


def test_dict_round_trip() -> None:
    """to_dict and from_dict are inverse."""
    config = RunConfig.scaled(seed=4, ablation="g")
    assert RunConfig.from_dict(config.to_dict()) == config


def test_check_architecture_names_the_key() -> None:
    """Only shape-changing keys are compared; the first difference is named."""
    stored = RunConfig.scaled().architecture()
    assert set(stored) == set(ARCHITECTURE_KEYS)
    check_architecture(stored, RunConfig.scaled(epochs=1, lr=1.0))
    with pytest.raises(ConfigMismatchError) as excinfo:
        check_architecture(stored, RunConfig.scaled(cca_layers=3))
    assert excinfo.value.key == "cca_layers"
    assert (excinfo.value.stored, excinfo.value.expected) == (2, 3)
