"""Knowledge-enriched attention: multi-head attention units and the cascade.

All functions accept 2-D ``rows x width`` inputs and also leading batch axes,
so the images of an album (or the sentences decoded together) can share one
graph. Attention has no masking or positional encoding: every sequence is a
fully visible set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import EVAL, BatchNormParams, Linear, Mode, batchnorm_params, batchnorm_rows, linear, xavier_uniform
from .tensor import Tensor, parameter, softmax_rows

__all__ = [
    "MultiHeadParams",
    "LsParams",
    "UnitParams",
    "CcaLayer",
    "CcaParams",
    "multi_head_params",
    "unit_params",
    "cca_params",
    "scaled_dot_attention",
    "multi_head_attention",
    "ls_block",
    "self_attention_unit",
    "cross_attention_unit",
    "cca_forward",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass
class MultiHeadParams:
    """Projections of one multi-head attention block.

    The per-head matrices are stored side by side: column block ``i`` of
    ``w_q`` is head ``i``'s query projection, and likewise for ``w_k`` and
    ``w_v``. ``w_o`` maps the concatenated head outputs back to the query width.
    """

    n_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @property
    def query_width(self) -> int:
        return self.w_q.shape[0]

    @property
    def key_width(self) -> int:
        return self.w_k.shape[0]

    @property
    def attention_width(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_width(self) -> int:
        return self.attention_width // self.n_heads


@dataclass
class LsParams:
    linear: Linear
    norm: BatchNormParams


@dataclass
class UnitParams:
    """One SA or CA unit: attention followed by the LS block."""

    attention: MultiHeadParams
    ls: LsParams


@dataclass
class CcaLayer:
    sa_knowledge: UnitParams
    sa_regions: UnitParams
    ca: UnitParams


@dataclass
class CcaParams:
    layers: list[CcaLayer]


def multi_head_params(
    rng: np.random.Generator,
    width: int,
    n_heads: int,
    *,
    query_width: int | None = None,
) -> MultiHeadParams:
    """Xavier-initialized projections for ``n_heads`` heads over keys of ``width``.

    Raises
    ------
    ConfigError
        If ``n_heads`` does not divide ``width``.
    """

    if n_heads < 1 or width % n_heads:
        raise ConfigError(f"attention width {width} is not divisible by {n_heads} heads")
    q_width = query_width or width
    return MultiHeadParams(
        n_heads=n_heads,
        w_q=parameter(xavier_uniform(rng, q_width, width)),
        w_k=parameter(xavier_uniform(rng, width, width)),
        w_v=parameter(xavier_uniform(rng, width, width)),
        w_o=parameter(xavier_uniform(rng, width, q_width)),
    )


def unit_params(rng: np.random.Generator, width: int, n_heads: int, *, query_width: int | None = None) -> UnitParams:
    q_width = query_width or width
    return UnitParams(
        attention=multi_head_params(rng, width, n_heads, query_width=q_width),
        ls=LsParams(linear(rng, q_width, q_width), batchnorm_params(q_width)),
    )


def cca_params(rng: np.random.Generator, width: int, n_heads: int, n_layers: int) -> CcaParams:
    if n_layers < 1:
        raise ConfigError(f"the cascade needs at least one layer, got {n_layers}")
    return CcaParams(
        layers=[
            CcaLayer(
                sa_knowledge=unit_params(rng, width, n_heads),
                sa_regions=unit_params(rng, width, n_heads),
                ca=unit_params(rng, width, n_heads),
            )
            for _ in range(n_layers)
        ]
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, *, return_weights: bool = False):
    """``softmax_rows(q k^T / sqrt(d)) v`` where ``d`` is the key width.

    Parameters
    ----------
    q : Tensor
        Queries, ``... x m_q x d``.
    k : Tensor
        Keys, ``... x m_k x d``.
    v : Tensor
        Values, ``... x m_k x d_v``.
    return_weights : bool, optional
        Also return the attention weights ``... x m_q x m_k``.

    Raises
    ------
    DimensionError
        If ``q`` and ``k`` differ in width or ``k`` and ``v`` in row count.
    """

    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values ({k.shape} vs {v.shape})")
    weights = softmax_rows((q @ k.T) * (1.0 / math.sqrt(k.shape[-1])))
    out = weights @ v
    return (out, weights) if return_weights else out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: MultiHeadParams, *, return_weights: bool = False):
    """Attend in ``p.n_heads`` projected subspaces and merge the heads through ``w_o``.

    Returns a tensor shaped like ``q`` (and, on request, the per-head weights
    ``... x h x m_q x m_k``).
    """

    if p.attention_width % p.n_heads:
        raise ConfigError(f"attention width {p.attention_width} is not divisible by {p.n_heads} heads")
    if q.shape[-1] != p.query_width or k.shape[-1] != p.key_width or v.shape[-1] != p.key_width:
        raise DimensionError(
            f"multi-head attention: inputs q{q.shape} k{k.shape} v{v.shape} do not match "
            f"query width {p.query_width} / key width {p.key_width}"
        )
    heads = [_split_heads(q @ p.w_q, p), _split_heads(k @ p.w_k, p), _split_heads(v @ p.w_v, p)]
    attended, weights = scaled_dot_attention(*heads, return_weights=True)
    merged = attended.swapaxes(-2, -3)
    merged = merged.reshape(merged.shape[:-2] + (p.attention_width,))
    out = merged @ p.w_o
    return (out, weights) if return_weights else out


def ls_block(x_in: Tensor, attended: Tensor, p: LsParams, mode: Mode = EVAL) -> Tensor:
    """Point-wise addition, then the linear layer, then BatchNorm."""

    if x_in.shape != attended.shape:
        raise DimensionError(f"ls block: input {x_in.shape} and attended {attended.shape} differ")
    return batchnorm_rows(p.linear(x_in + attended), p.norm, mode)


def self_attention_unit(f: Tensor, p: UnitParams, mode: Mode = EVAL) -> Tensor:
    return ls_block(f, multi_head_attention(f, f, f, p.attention), p.ls, mode)


def cross_attention_unit(f_t: Tensor, f_v: Tensor, p: UnitParams, mode: Mode = EVAL, *, return_weights: bool = False):
    """Queries from ``f_t`` attend over ``f_v``; the residual uses the query stream."""

    attended, weights = multi_head_attention(f_t, f_v, f_v, p.attention, return_weights=True)
    out = ls_block(f_t, attended, p.ls, mode)
    return (out, weights) if return_weights else out


def cca_forward(k0: Tensor, r0: Tensor, params: CcaParams, mode: Mode = EVAL) -> tuple[Tensor, Tensor]:
    """Run the cascade: per layer ``K <- CA(SA(K), SA(R))`` and ``R <- SA(R)``.

    Layers do not share weights. Returns the enhanced knowledge concepts and the
    attentive regional features after the last layer.
    """

    knowledge, regions = k0, r0
    for layer in params.layers:
        attended_knowledge = self_attention_unit(knowledge, layer.sa_knowledge, mode)
        regions = self_attention_unit(regions, layer.sa_regions, mode)
        knowledge = cross_attention_unit(attended_knowledge, regions, layer.ca, mode)
    return knowledge, regions


def _split_heads(x: Tensor, p: MultiHeadParams) -> Tensor:
    # ... x m x (h * dh)  ->  ... x h x m x dh
    split = x.reshape(x.shape[:-1] + (p.n_heads, p.head_width))
    return split.swapaxes(-2, -3)
