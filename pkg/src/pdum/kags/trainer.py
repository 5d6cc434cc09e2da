"""Teacher-forced training: story loss, Adam, checkpoints and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, check_architecture
from .data import PAD, Vocabulary, build_vocabulary, parse_manifest
from .decoder import teacher_forced_logits
from .errors import ContractError, DimensionError, FormatError
from .knowledge import extend_vocabulary, load_knowledge_graph
from .model import AlbumExample, KagsModel, encode_album, init_model, prepare_album_stories, training_mode
from .nn import Mode, count_parameters, named_buffers, named_parameters, zero_grad
from .tensor import Tensor, backward
from .utils import parallel_map, rng_stream

__all__ = [
    "AlbumLoss",
    "AdamMoments",
    "TrainerState",
    "BatchStats",
    "TrainResult",
    "story_loss",
    "album_loss",
    "clip_grad_norm",
    "adam_step",
    "train_step",
    "checkpoint_save",
    "checkpoint_load",
    "train",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class AlbumLoss(NamedTuple):
    loss: Tensor
    tokens: int
    correct: int


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainerState:
    """Model weights, optimizer moments and bookkeeping of a training run."""

    model: KagsModel
    vocab: Vocabulary
    config: RunConfig
    step: int = 0
    moments: AdamMoments = field(default_factory=AdamMoments)

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ContractError(f"step must be non-negative, got {self.step}")
        for name, tensor in named_parameters(self.model):
            self.moments.m.setdefault(name, np.zeros_like(tensor.data))
            self.moments.v.setdefault(name, np.zeros_like(tensor.data))

    @property
    def seed(self) -> int:
        return self.config.seed


class BatchStats(NamedTuple):
    loss: float
    tokens: int
    correct: int
    grad_norm: float


class TrainResult(NamedTuple):
    state: TrainerState
    checkpoint: Path
    log: Path


def story_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``logits``.

    Parameters
    ----------
    logits : Tensor
        ``steps x rows x |V|`` unnormalized scores.
    targets : np.ndarray
        ``steps x rows`` token ids.
    mask : np.ndarray
        ``steps x rows`` booleans; false positions (padding) contribute nothing.

    Returns
    -------
    Tensor
        A scalar: the raw sum over sentences and steps. Divide by
        ``mask.sum()`` for a per-token figure.

    Raises
    ------
    DimensionError
        If the shapes do not line up.
    ContractError
        If a target id lies outside the vocabulary.
    """

    if logits.ndim != 3 or targets.shape != logits.shape[:2] or mask.shape != targets.shape:
        raise DimensionError(
            f"story_loss: logits {logits.shape}, targets {targets.shape} and mask {mask.shape} are not aligned"
        )
    vocab = logits.shape[-1]
    live = targets[mask.astype(bool)]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        raise ContractError(f"story_loss: target id {int(live.max())} outside vocabulary of size {vocab}")
    picks = np.zeros(logits.shape, dtype=logits.dtype)
    rows = np.nonzero(mask)
    picks[rows + (targets[rows],)] = 1.0
    return -(logits.log_softmax(axis=-1) * picks).sum()


def album_loss(model: KagsModel, example: AlbumExample, vocab: Vocabulary, config: RunConfig, mode: Mode) -> AlbumLoss:
    """Teacher-forced loss of one album's reference story, with token and hit counts."""

    encoded = encode_album(model, example, vocab, config, mode)
    logits = teacher_forced_logits(
        model.decoder,
        encoded.indicators,
        encoded.regions,
        example.inputs,
        mode,
        regional_keys=config.regional_ca_keys,
    )
    targets = example.targets.T
    mask = targets != PAD
    loss = story_loss(logits, targets, mask)
    correct = int(((logits.data.argmax(axis=-1) == targets) & mask).sum())
    return AlbumLoss(loss, int(mask.sum()), correct)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm`` (0 disables clipping)."""

    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / (norm + 1e-12)
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, norm


def adam_step(state: TrainerState, grads: Mapping[str, np.ndarray]) -> TrainerState:
    """Apply one Adam update in place and return ``state``.

    Uses ``config.lr`` and ``config.weight_decay``. With
    ``weight_decay_mode="decoupled"`` parameters are first multiplied by
    ``1 - lr * wd``; with ``"l2"`` the decay term is added to the gradient.
    Parameters without an entry in ``grads`` receive a zero gradient.

    Raises
    ------
    ContractError
        If a gradient names an unknown parameter or has the wrong shape.
    """

    config = state.config
    params = dict(named_parameters(state.model))
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise ContractError(f"gradients for unknown parameters: {', '.join(unknown)}")
    t = state.step + 1
    lr, wd = config.lr, config.weight_decay
    correction1 = 1.0 - BETA1**t
    correction2 = 1.0 - BETA2**t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ContractError(f"gradient for {name!r} has shape {grad.shape}, parameter has {param.shape}")
        if config.weight_decay_mode == "l2" and wd:
            grad = grad + wd * param.data
        m = state.moments.m[name]
        v = state.moments.v[name]
        m[...] = BETA1 * m + (1.0 - BETA1) * grad
        v[...] = BETA2 * v + (1.0 - BETA2) * np.square(grad)
        if config.weight_decay_mode == "decoupled" and wd:
            param.data *= 1.0 - lr * wd
        param.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)).astype(param.data.dtype)
    state.step = t
    return state


def train_step(state: TrainerState, batch: Sequence[AlbumExample]) -> BatchStats:
    """Accumulate gradients over the albums of ``batch`` and take one optimizer step."""

    config = state.config
    mode = training_mode(config)
    zero_grad(state.model)
    total = 0.0
    tokens = 0
    correct = 0
    for example in batch:
        result = album_loss(state.model, example, state.vocab, config, mode)
        backward(result.loss)
        total += result.loss.item()
        tokens += result.tokens
        correct += result.correct
    grads = {
        name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in named_parameters(state.model)
    }
    grads, norm = clip_grad_norm(grads, config.grad_clip)
    adam_step(state, grads)
    zero_grad(state.model)
    logger.debug("step %d: loss %.4f over %d tokens, grad norm %.3f", state.step, total, tokens, norm)
    return BatchStats(total, tokens, correct, norm)


def checkpoint_save(state: TrainerState, path: str | Path) -> Path:
    """Write ``state`` as a KAGC checkpoint."""

    meta = {
        "config": state.config.to_dict(),
        "vocabulary": state.vocab.to_list(),
        "step": state.step,
        "seed": state.seed,
    }
    records: dict[str, np.ndarray] = {}
    for name, tensor in named_parameters(state.model):
        records[f"param/{name}"] = tensor.data
    for name in state.moments.m:
        records[f"adam_m/{name}"] = state.moments.m[name]
    for name in state.moments.v:
        records[f"adam_v/{name}"] = state.moments.v[name]
    for name, buffer in named_buffers(state.model):
        records[f"buffer/{name}"] = buffer
    return write_checkpoint(path, meta, records)


def checkpoint_load(path: str | Path, expected: RunConfig | None = None) -> TrainerState:
    """Restore a :class:`TrainerState` from a KAGC checkpoint.

    Raises
    ------
    FormatError
        If the file is malformed or its records do not match the stored configuration.
    ConfigMismatchError
        If ``expected`` is given and an architecture key differs.
    """

    meta, records = read_checkpoint(path)
    for key in ("config", "vocabulary", "step"):
        if key not in meta:
            raise FormatError(f"{path}: checkpoint metadata lacks {key!r}")
    config = RunConfig.from_dict(meta["config"])
    if expected is not None:
        check_architecture(config.architecture(), expected)
    vocab = Vocabulary.from_list(meta["vocabulary"])
    state = TrainerState(init_model(config, len(vocab)), vocab, config, int(meta["step"]))

    def restore(key: str, target: np.ndarray) -> None:
        stored = records.pop(key, None)
        if stored is None:
            raise FormatError(f"{path}: missing record {key!r}")
        if stored.shape != target.shape:
            raise FormatError(f"{path}: record {key!r} has shape {stored.shape}, expected {target.shape}")
        target[...] = stored

    for name, tensor in named_parameters(state.model):
        restore(f"param/{name}", tensor.data)
        restore(f"adam_m/{name}", state.moments.m[name])
        restore(f"adam_v/{name}", state.moments.v[name])
    for name, buffer in named_buffers(state.model):
        restore(f"buffer/{name}", buffer)
    if records:
        raise FormatError(f"{path}: unexpected records {', '.join(sorted(records)[:5])}")
    logger.info("Loaded checkpoint %s at step %d", path, state.step)
    return state


def train(
    config: RunConfig,
    manifest: str | Path,
    knowledge: str | Path,
    out_dir: str | Path,
) -> TrainResult:
    """Train from scratch and write per-epoch checkpoints plus a JSON-lines log.

    Every reference story of every album is one training example. Examples
    are visited in a fresh seeded permutation every epoch and grouped into
    batches of ``config.batch_size``. Given the same seed, config and
    data, every checkpoint is byte-identical between runs.
    """

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    albums = parse_manifest(manifest, n_images=config.n_images)
    graph = load_knowledge_graph(knowledge)
    vocab = extend_vocabulary(build_vocabulary(albums, config.vocab_min_count), graph)
    stories = parallel_map(lambda record: prepare_album_stories(record, graph, vocab, config), albums)
    examples = [example for album_stories in stories for example in album_stories]
    if not examples:
        raise ContractError(f"{manifest}: no albums to train on")

    state = TrainerState(init_model(config, len(vocab)), vocab, config)
    logger.info(
        "Training %d stories for %d epochs: %d parameters, vocabulary %d",
        len(examples),
        config.epochs,
        count_parameters(state.model),
        len(vocab),
    )

    log_path = out / "train.log.jsonl"
    checkpoint = out / "final.kagc"
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            order = rng_stream(config.seed, f"shuffle/{epoch}").permutation(len(examples))
            loss = 0.0
            tokens = 0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                stats = train_step(state, [examples[i] for i in order[start : start + config.batch_size]])
                loss += stats.loss
                tokens += stats.tokens
                correct += stats.correct
            entry = {
                "epoch": epoch,
                "mean_loss": loss / max(tokens, 1),
                "tokens": tokens,
                "seconds": round(time.perf_counter() - started, 3),
            }
            log.write(json.dumps(entry) + "\n")
            log.flush()
            logger.info(
                "epoch %d: mean loss %.4f, token accuracy %.3f", epoch, entry["mean_loss"], correct / max(tokens, 1)
            )
            checkpoint_save(state, out / f"checkpoint-epoch-{epoch:03d}.kagc")
    checkpoint_save(state, checkpoint)
    return TrainResult(state, checkpoint, log_path)
