"""Tests for the story loss, Adam, checkpoints and the training loop."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from pdum.kags.checkpoint import read_checkpoint, write_checkpoint
from pdum.kags.config import RunConfig
from pdum.kags.data import build_vocabulary
from pdum.kags.errors import ConfigMismatchError, ContractError, DimensionError, FormatError
from pdum.kags.knowledge import extend_vocabulary, load_knowledge_graph
from pdum.kags.model import init_model, prepare_album, training_mode
from pdum.kags.nn import named_buffers, named_parameters
from pdum.kags.synth import SynthSpec, synthesize_dataset
from pdum.kags.tensor import Tensor
from pdum.kags.trainer import (
    TrainerState,
    adam_step,
    album_loss,
    checkpoint_load,
    checkpoint_save,
    clip_grad_norm,
    story_loss,
    train,
    train_step,
)

SPEC = SynthSpec(n_images=2, m_boxes=4, grid=2, feature_dim=8)


def _config(**overrides) -> RunConfig:
    values = dict(
        feature_dim=8,
        n_images=2,
        m_boxes=4,
        d_model=16,
        d_hidden=8,
        n_heads=2,
        cca_layers=1,
        k_relations=3,
        epochs=2,
        max_sentence_len=12,
    )
    values.update(overrides)
    return RunConfig.scaled(**values)


def _setup(tmp_path: Path, **overrides):
    dataset = synthesize_dataset(tmp_path / "data", 2, seed=0, spec=SPEC)
    config = _config(**overrides)
    graph = load_knowledge_graph(dataset.knowledge)
    vocab = extend_vocabulary(build_vocabulary(dataset.albums, 0), graph)
    examples = [prepare_album(record, graph, vocab, config) for record in dataset.albums]
    state = TrainerState(init_model(config, len(vocab)), vocab, config)
    return dataset, state, examples


def test_uniform_logits_cost_log_vocab_per_token() -> None:
    """Zero logits give ln |V| per unmasked position."""
    logits = Tensor(np.zeros((2, 3, 5)), requires_grad=True)
    targets = np.array([[1, 2, 0], [4, 0, 0]])
    mask = targets != 0
    loss = story_loss(logits, targets, mask)
    assert loss.item() == pytest.approx(3 * math.log(5), rel=1e-6)


def test_story_loss_contracts() -> None:
    """Misaligned shapes and out-of-vocabulary targets are rejected."""
    logits = Tensor(np.zeros((2, 3, 5)))
    with pytest.raises(DimensionError):
        story_loss(logits, np.zeros((3, 2), dtype=np.int64), np.ones((3, 2), dtype=bool))
    with pytest.raises(ContractError):
        story_loss(logits, np.full((2, 3), 5), np.ones((2, 3), dtype=bool))


def test_clip_grad_norm() -> None:
    """Gradients are rescaled to the global norm bound only when they exceed it."""
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert clipped["a"] == pytest.approx([0.6, 0.0])
    assert clipped["b"] == pytest.approx([0.8])
    assert clip_grad_norm(grads, 10.0)[0]["a"] == pytest.approx([3.0, 0.0])
    assert clip_grad_norm(grads, 0.0)[0]["b"] == pytest.approx([4.0])


def test_first_adam_step_moves_by_learning_rate(tmp_path: Path) -> None:
    """With bias correction the first update has magnitude lr; zero gradients leave weights alone."""
    _, state, _ = _setup(tmp_path)
    params = dict(named_parameters(state.model))
    first, second = list(params)[:2]
    before = {name: t.data.copy() for name, t in params.items()}
    adam_step(state, {first: np.ones_like(params[first].data)})
    assert state.step == 1
    np.testing.assert_allclose(params[first].data, before[first] - state.config.lr, atol=1e-6)
    np.testing.assert_array_equal(params[second].data, before[second])


def test_decoupled_and_l2_weight_decay(tmp_path: Path) -> None:
    """Decoupled decay shrinks weights multiplicatively; L2 decay goes through the moments."""
    _, state, _ = _setup(tmp_path, weight_decay=0.5, lr=1e-3)
    name, param = next(iter(named_parameters(state.model)))
    before = param.data.copy()
    adam_step(state, {})
    np.testing.assert_allclose(param.data, before * (1 - 1e-3 * 0.5), rtol=1e-6)

    _, state, _ = _setup(tmp_path / "l2", weight_decay=0.5, lr=1e-3, weight_decay_mode="l2")
    param = dict(named_parameters(state.model))[name]
    before = param.data.copy()
    adam_step(state, {})
    large = np.abs(before) > 1e-3
    np.testing.assert_allclose(param.data[large], (before - 1e-3 * np.sign(before))[large], atol=1e-6)


def test_adam_rejects_unknown_or_misshapen_gradients(tmp_path: Path) -> None:
    """Gradients must name real parameters with matching shapes."""
    _, state, _ = _setup(tmp_path)
    with pytest.raises(ContractError, match="unknown"):
        adam_step(state, {"nope": np.zeros(1)})
    name = next(iter(dict(named_parameters(state.model))))
    with pytest.raises(ContractError, match="shape"):
        adam_step(state, {name: np.zeros(1)})


def test_album_loss_counts_tokens(tmp_path: Path) -> None:
    """Every non-pad target, end tokens included, is counted once."""
    _, state, examples = _setup(tmp_path)
    example = examples[0]
    result = album_loss(state.model, example, state.vocab, state.config, training_mode(state.config))
    assert result.tokens == int((example.targets != 0).sum())
    assert 0 <= result.correct <= result.tokens
    assert result.loss.item() > 0


def test_train_step_reduces_loss(tmp_path: Path) -> None:
    """Repeated steps on one album lower its loss."""
    _, state, examples = _setup(tmp_path, lr=1e-2)
    first = train_step(state, examples[:1])
    for _ in range(15):
        last = train_step(state, examples[:1])
    assert state.step == 16
    assert last.loss < first.loss
    assert first.grad_norm > 0
    assert all(t.grad is None or not t.grad.any() for _, t in named_parameters(state.model))


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    """Weights, moments, buffers, step and vocabulary survive a save and load."""
    _, state, examples = _setup(tmp_path)
    train_step(state, examples)
    path = checkpoint_save(state, tmp_path / "state.kagc")
    loaded = checkpoint_load(path, expected=state.config)
    assert loaded.step == state.step == 1
    assert loaded.vocab == state.vocab
    assert loaded.config == state.config
    for (name, a), (_, b) in zip(named_parameters(state.model), named_parameters(loaded.model)):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        np.testing.assert_array_equal(state.moments.v[name], loaded.moments.v[name])
    for (_, a), (_, b) in zip(named_buffers(state.model), named_buffers(loaded.model)):
        np.testing.assert_array_equal(a, b)
    assert checkpoint_save(loaded, tmp_path / "again.kagc").read_bytes() == path.read_bytes()


def test_checkpoint_load_checks_architecture_and_records(tmp_path: Path) -> None:
    """A different architecture or a changed record set is refused."""
    _, state, _ = _setup(tmp_path)
    path = checkpoint_save(state, tmp_path / "state.kagc")
    with pytest.raises(ConfigMismatchError) as excinfo:
        checkpoint_load(path, expected=state.config.replace(cca_layers=2))
    assert excinfo.value.key == "cca_layers"
    checkpoint_load(path, expected=state.config.replace(epochs=99))

    meta, records = read_checkpoint(path)
    write_checkpoint(tmp_path / "extra.kagc", meta, {**records, "param/ghost": np.zeros(1)})
    with pytest.raises(FormatError, match="unexpected records"):
        checkpoint_load(tmp_path / "extra.kagc")
    missing = dict(records)
    missing.pop(next(iter(missing)))
    write_checkpoint(tmp_path / "missing.kagc", meta, missing)
    with pytest.raises(FormatError, match="missing record"):
        checkpoint_load(tmp_path / "missing.kagc")


def test_train_writes_epoch_checkpoints_and_log(tmp_path: Path) -> None:
    """Each epoch leaves a checkpoint and a log line; reruns are byte-identical."""
    dataset, _, _ = _setup(tmp_path)
    config = _config()
    result = train(config, dataset.manifest, dataset.knowledge, tmp_path / "run-a")
    assert result.checkpoint == tmp_path / "run-a" / "final.kagc"
    assert (tmp_path / "run-a" / "checkpoint-epoch-001.kagc").exists()
    assert (tmp_path / "run-a" / "checkpoint-epoch-002.kagc").exists()
    entries = [json.loads(line) for line in result.log.read_text(encoding="utf-8").splitlines()]
    assert [e["epoch"] for e in entries] == [1, 2]
    assert all(e["mean_loss"] > 0 for e in entries)
    assert result.state.step == 4

    again = train(config, dataset.manifest, dataset.knowledge, tmp_path / "run-b")
    assert again.checkpoint.read_bytes() == result.checkpoint.read_bytes()


def test_train_uses_every_reference_story(tmp_path: Path) -> None:
    """Albums with two reference stories give two training examples each."""
    spec = SynthSpec(n_images=2, m_boxes=4, grid=2, feature_dim=8, references=2)
    dataset = synthesize_dataset(tmp_path / "data", 2, seed=1, spec=spec)
    config = _config(epochs=1)
    assert config.batch_size == 1
    result = train(config, dataset.manifest, dataset.knowledge, tmp_path / "run")
    assert result.state.step == 4
