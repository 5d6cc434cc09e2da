"""Second-order pooling and the group-wise semantic module."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Linear, linear
from .tensor import Tensor, parameter, stack

__all__ = [
    "SopParams",
    "sop_params",
    "sop_covariance",
    "sop_forward",
    "sop_batch",
    "gsm_forward",
    "class_activation_map",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass
class SopParams:
    """Weights of one second-order pooling block.

    Attributes
    ----------
    reduce : Linear
        1x1 convolution ``d -> c`` applied at every spatial position.
    row_weight : Tensor
        ``c x c`` row-wise convolution: row ``i`` is the length-``c`` filter
        applied to covariance row ``i``.
    row_bias : Tensor
        Bias of the row-wise convolution, length ``c``.
    expand : Linear
        1x1 convolution ``c -> d`` producing the pooled vector.
    """

    reduce: Linear
    row_weight: Tensor
    row_bias: Tensor
    expand: Linear

    @property
    def width(self) -> int:
        return self.reduce.in_features

    @property
    def reduced(self) -> int:
        return self.reduce.out_features


def sop_params(rng: np.random.Generator, width: int, reduced: int) -> SopParams:
    if not 1 <= reduced <= width:
        raise DimensionError(f"reduced channel count {reduced} must lie in [1, {width}]")
    limit = np.sqrt(3.0 / reduced)
    return SopParams(
        reduce=linear(rng, width, reduced),
        row_weight=parameter(rng.uniform(-limit, limit, size=(reduced, reduced))),
        row_bias=parameter(np.zeros(reduced)),
        expand=linear(rng, reduced, width),
    )


def sop_covariance(x: Tensor, p: SopParams) -> Tensor:
    """Raw ``y^T y`` of the channel-reduced positions of ``x`` (``... x h x w x d``)."""

    if x.ndim < 3 or x.shape[-1] != p.width:
        raise DimensionError(f"sop: feature grid {x.shape} does not match width {p.width}")
    y = p.reduce(x)
    y = y.reshape(y.shape[:-3] + (y.shape[-3] * y.shape[-2], p.reduced))
    return y.T @ y


def sop_batch(x: Tensor, p: SopParams) -> Tensor:
    """Pool every grid of a ``B x h x w x d`` stack into a ``B x d`` matrix."""

    covariance = sop_covariance(x, p)
    rows = (covariance * p.row_weight).sum(axis=-1) + p.row_bias
    return p.expand(rows)


def sop_forward(x: Tensor, p: SopParams) -> Tensor:
    """Aggregate one ``h x w x d`` grid into a ``1 x 1 x d`` vector.

    Positions are reduced to ``c`` channels, their ``c x c`` covariance goes
    through the row-wise convolution and the result is expanded back to ``d``.
    The result does not depend on the order of the ``h*w`` positions.
    """

    if x.ndim != 3:
        raise DimensionError(f"sop_forward expects an h x w x d grid, got {x.shape}")
    pooled = sop_batch(x.reshape((1,) + x.shape), p)
    return pooled.reshape(1, 1, p.width)


def gsm_forward(c_list: Sequence[Tensor] | Tensor, p_inner: SopParams, p_outer: SopParams) -> Tensor:
    """Pool each image's grid, stack the results as an ``N x 1 x d`` group and pool again.

    Parameters
    ----------
    c_list : Sequence[Tensor] | Tensor
        ``N`` grids of identical shape ``h x w x d``, or their ``N x h x w x d`` stack.
    p_inner, p_outer : SopParams
        Weights of the per-image and group-level pooling.

    Returns
    -------
    Tensor
        The ``1 x 1 x d`` global-visual aggregation, invariant to image order.

    Raises
    ------
    ContractError
        If the album is empty.
    """

    grids = c_list if isinstance(c_list, Tensor) else _stack_grids(c_list)
    if grids.ndim != 4 or grids.shape[0] < 1:
        raise ContractError(f"gsm_forward needs at least one h x w x d grid, got {grids.shape}")
    per_image = sop_batch(grids, p_inner)
    group = per_image.reshape(1, grids.shape[0], 1, p_outer.width)
    return sop_batch(group, p_outer).reshape(1, 1, p_outer.width)


def class_activation_map(c_n: Tensor, a: Tensor) -> Tensor:
    """Per-position dot product of the grid ``c_n`` (``h x w x d``) with the aggregation ``a``."""

    width = c_n.shape[-1]
    if c_n.ndim != 3 or a.size != width:
        raise DimensionError(f"class activation map: grid {c_n.shape} does not match aggregation {a.shape}")
    h, w, _ = c_n.shape
    return (c_n.reshape(h * w, width) @ a.reshape(width, 1)).reshape(h, w)


def _stack_grids(c_list: Sequence[Tensor]) -> Tensor:
    if not c_list:
        raise ContractError("gsm_forward needs at least one image")
    return stack(list(c_list), axis=0)
