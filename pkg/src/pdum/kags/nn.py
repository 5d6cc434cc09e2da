"""Parameter containers and the small layers shared by every network block.

Parameter sets are plain dataclasses whose fields are :class:`~pdum.kags.tensor.Tensor`
leaves, numpy buffers, nested parameter sets or lists of them.
:func:`named_parameters` and :func:`named_buffers` walk that structure in
field order, which fixes the naming used by the optimizer and checkpoints.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, batch_norm, current_dtype, parameter

__all__ = [
    "Mode",
    "TRAIN",
    "EVAL",
    "Linear",
    "BatchNormParams",
    "linear",
    "batchnorm_params",
    "batchnorm_rows",
    "xavier_uniform",
    "named_parameters",
    "named_buffers",
    "count_parameters",
    "zero_grad",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass(frozen=True)
class Mode:
    """Forward-pass mode.

    Attributes
    ----------
    training : bool
        Normalize multi-row inputs by their own statistics and update running
        statistics.
    batch_stats_at_eval : bool
        Outside training, still normalize multi-row inputs by their own
        statistics (running statistics are left untouched).
    """

    training: bool = False
    batch_stats_at_eval: bool = False


TRAIN = Mode(training=True)
EVAL = Mode()


@dataclass
class Linear:
    """Affine map ``x @ weight + bias`` over the last axis (``weight`` is ``in x out``)."""

    weight: Tensor
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {self.weight.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


@dataclass
class BatchNormParams:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def width(self) -> int:
        return self.scale.shape[0]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(rng: np.random.Generator, fan_in: int, fan_out: int, *, bias: bool = True) -> Linear:
    """Create a Xavier-initialized :class:`Linear` with a zero bias."""

    weight = parameter(xavier_uniform(rng, fan_in, fan_out))
    return Linear(weight, parameter(np.zeros(fan_out)) if bias else None)


def batchnorm_params(width: int) -> BatchNormParams:
    dtype = current_dtype()
    return BatchNormParams(
        scale=parameter(np.ones(width)),
        shift=parameter(np.zeros(width)),
        running_mean=np.zeros(width, dtype=dtype),
        running_var=np.ones(width, dtype=dtype),
    )


def batchnorm_rows(x: Tensor, params: BatchNormParams, mode: Mode = EVAL) -> Tensor:
    """BatchNorm over the rows of ``x`` (shape ``... x m x d``).

    Each leading index is its own batch of ``m`` rows. With more than one row
    and ``mode.training`` the rows are normalized by their biased mean and
    variance (epsilon ``params.eps``) and the running statistics move towards
    the batch statistics with ``params.momentum``. A single row, or evaluation
    mode, falls back to the running statistics. ``mode.batch_stats_at_eval``
    keeps batch statistics outside training without touching the running ones.

    Raises
    ------
    DimensionError
        If the feature width of ``x`` differs from ``params``.
    """

    if x.ndim < 2 or x.shape[-1] != params.width:
        raise DimensionError(f"batchnorm_rows: input {x.shape} does not match feature width {params.width}")
    use_batch = x.shape[-2] > 1 and (mode.training or mode.batch_stats_at_eval)
    if not use_batch:
        out, _, _ = batch_norm(
            x, params.scale, params.shift, stats=(params.running_mean, params.running_var), eps=params.eps
        )
        return out
    out, mean, var = batch_norm(x, params.scale, params.shift, eps=params.eps)
    if mode.training:
        width = params.width
        batch_mean = mean.reshape(-1, width).mean(axis=0)
        batch_var = var.reshape(-1, width).mean(axis=0)
        params.running_mean[...] = (1.0 - params.momentum) * params.running_mean + params.momentum * batch_mean
        params.running_var[...] = (1.0 - params.momentum) * params.running_var + params.momentum * batch_var
    return out


def named_parameters(module: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every trainable leaf, in field order."""

    for name, value in _walk(module, prefix):
        if isinstance(value, Tensor) and value.requires_grad:
            yield name, value


def named_buffers(module: Any, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every non-trainable numpy buffer."""

    for name, value in _walk(module, prefix):
        if isinstance(value, np.ndarray):
            yield name, value


def count_parameters(module: Any) -> int:
    return sum(t.size for _, t in named_parameters(module))


def zero_grad(module: Any) -> None:
    for _, tensor in named_parameters(module):
        tensor.zero_grad()


def _walk(value: Any, prefix: str) -> Iterator[tuple[str, Any]]:
    if isinstance(value, (Tensor, np.ndarray)):
        yield prefix, value
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        for field in dataclasses.fields(value):
            yield from _walk(getattr(value, field.name), _join(prefix, field.name))
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(item, _join(prefix, str(index)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
