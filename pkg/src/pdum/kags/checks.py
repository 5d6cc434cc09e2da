"""Built-in gradient checks, one per differentiable building block.

Each check builds a tiny float64 instance, reduces the output to a scalar
with a fixed random weighting and compares gradients against central
differences. Biases whose gradient is identically zero (right before batch
normalization or a softmax over rows) are left out of the perturbed inputs.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    UnitParams,
    cca_forward,
    cca_params,
    cross_attention_unit,
    multi_head_attention,
    multi_head_params,
    self_attention_unit,
    unit_params,
)
from .data import BOS, PAD, project_feature
from .decoder import (
    FlattenParams,
    IndicatorVectors,
    LstmParams,
    LstmState,
    decoder_params,
    flatten_indicator,
    glu,
    lstm_step,
    teacher_forced_logits,
)
from .gradcheck import GradCheckReport, grad_check_finite_diff, register_check
from .gsm import gsm_forward, sop_forward, sop_params
from .nn import TRAIN, batchnorm_params, batchnorm_rows, linear, named_parameters
from .tensor import Tensor, default_dtype, matmul, parameter, softmax_rows
from .trainer import story_loss
from .utils import rng_stream

__all__: list[str] = []

WIDTH = 8
HEADS = 2
HIDDEN = 6
VOCAB = 11


def _rng(seed: int, name: str) -> np.random.Generator:
    return rng_stream(seed, f"gradcheck/{name}")


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return parameter(rng.standard_normal(shape))


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _unit_inputs(p: UnitParams) -> list[Tensor]:
    a = p.attention
    return [a.w_q, a.w_k, a.w_v, a.w_o, p.ls.linear.weight, p.ls.norm.scale, p.ls.norm.shift]


@register_check("matmul")
def check_matmul(seed: int) -> GradCheckReport:
    rng = _rng(seed, "matmul")
    with default_dtype(np.float64):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
        w = rng.standard_normal((3, 2))
        return grad_check_finite_diff(lambda x, y: _weighted(matmul(x, y), w), [a, b], op_name="matmul")


@register_check("softmax")
def check_softmax(seed: int) -> GradCheckReport:
    rng = _rng(seed, "softmax")
    with default_dtype(np.float64):
        x = _leaf(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        return grad_check_finite_diff(lambda t: _weighted(softmax_rows(t), w), [x], op_name="softmax")


@register_check("batchnorm")
def check_batchnorm(seed: int) -> GradCheckReport:
    rng = _rng(seed, "batchnorm")
    with default_dtype(np.float64):
        params = batchnorm_params(3)
        params.scale.data[...] = rng.uniform(0.5, 1.5, 3)
        params.shift.data[...] = rng.standard_normal(3)
        x = _leaf(rng, 2, 4, 3)
        w = rng.standard_normal((2, 4, 3))
        return grad_check_finite_diff(
            lambda t, *_: _weighted(batchnorm_rows(t, params, TRAIN), w),
            [x, params.scale, params.shift],
            op_name="batchnorm",
        )


@register_check("multi_head_attention")
def check_multi_head_attention(seed: int) -> GradCheckReport:
    rng = _rng(seed, "multi_head_attention")
    with default_dtype(np.float64):
        p = multi_head_params(rng, WIDTH, HEADS, query_width=WIDTH)
        q, k, v = _leaf(rng, 2, 3, WIDTH), _leaf(rng, 2, 4, WIDTH), _leaf(rng, 2, 4, WIDTH)
        w = rng.standard_normal((2, 3, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(multi_head_attention(q, k, v, p), w),
            [q, k, v, p.w_q, p.w_k, p.w_v, p.w_o],
            op_name="multi_head_attention",
        )


@register_check("self_attention_unit")
def check_self_attention_unit(seed: int) -> GradCheckReport:
    rng = _rng(seed, "self_attention_unit")
    with default_dtype(np.float64):
        p = unit_params(rng, WIDTH, HEADS)
        f = _leaf(rng, 2, 4, WIDTH)
        w = rng.standard_normal((2, 4, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(self_attention_unit(f, p, TRAIN), w),
            [f, *_unit_inputs(p)],
            op_name="self_attention_unit",
        )


@register_check("cross_attention_unit")
def check_cross_attention_unit(seed: int) -> GradCheckReport:
    rng = _rng(seed, "cross_attention_unit")
    with default_dtype(np.float64):
        p = unit_params(rng, WIDTH, HEADS)
        f_t, f_v = _leaf(rng, 2, 3, WIDTH), _leaf(rng, 2, 4, WIDTH)
        w = rng.standard_normal((2, 3, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(cross_attention_unit(f_t, f_v, p, TRAIN), w),
            [f_t, f_v, *_unit_inputs(p)],
            op_name="cross_attention_unit",
        )


@register_check("cca_forward")
def check_cca_forward(seed: int) -> GradCheckReport:
    rng = _rng(seed, "cca_forward")
    with default_dtype(np.float64):
        params = cca_params(rng, WIDTH, HEADS, 2)
        k0, r0 = _leaf(rng, 2, 3, WIDTH), _leaf(rng, 2, 4, WIDTH)
        wk, wr = rng.standard_normal((2, 3, WIDTH)), rng.standard_normal((2, 4, WIDTH))

        def f(k: Tensor, r: Tensor) -> Tensor:
            k_out, r_out = cca_forward(k, r, params, TRAIN)
            return _weighted(k_out, wk) + _weighted(r_out, wr)

        return grad_check_finite_diff(f, [k0, r0], op_name="cca_forward")


@register_check("sop_forward")
def check_sop_forward(seed: int) -> GradCheckReport:
    rng = _rng(seed, "sop_forward")
    with default_dtype(np.float64):
        p = sop_params(rng, WIDTH, 3)
        x = _leaf(rng, 3, 3, WIDTH)
        w = rng.standard_normal((1, 1, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(sop_forward(x, p), w),
            [x, *(t for _, t in named_parameters(p))],
            op_name="sop_forward",
        )


@register_check("gsm_forward")
def check_gsm_forward(seed: int) -> GradCheckReport:
    rng = _rng(seed, "gsm_forward")
    with default_dtype(np.float64):
        inner, outer = sop_params(rng, WIDTH, 3), sop_params(rng, WIDTH, 3)
        conv = _leaf(rng, 3, 2, 2, WIDTH)
        w = rng.standard_normal((1, 1, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(gsm_forward(conv, inner, outer), w),
            [conv, inner.row_weight, outer.row_weight, outer.expand.weight],
            op_name="gsm_forward",
        )


@register_check("lstm_step")
def check_lstm_step(seed: int) -> GradCheckReport:
    rng = _rng(seed, "lstm_step")
    with default_dtype(np.float64):
        p = LstmParams(_leaf(rng, 5, 4 * 4), _leaf(rng, 4, 4 * 4), _leaf(rng, 4 * 4))
        x, h, c = _leaf(rng, 3, 5), _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        wh, wc = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))

        def f(*_: Tensor) -> Tensor:
            state = lstm_step(x, LstmState(h, c), p)
            return _weighted(state.h, wh) + _weighted(state.c, wc)

        return grad_check_finite_diff(f, [x, h, c, p.w_x, p.w_h, p.bias], op_name="lstm_step")


@register_check("glu")
def check_glu(seed: int) -> GradCheckReport:
    rng = _rng(seed, "glu")
    with default_dtype(np.float64):
        fuse = linear(rng, 3, WIDTH)
        x = _leaf(rng, 3, 6)
        w = rng.standard_normal((3, WIDTH))
        return grad_check_finite_diff(lambda *_: _weighted(fuse(glu(x)), w), [x, fuse.weight, fuse.bias], op_name="glu")


@register_check("flatten_indicator")
def check_flatten_indicator(seed: int) -> GradCheckReport:
    rng = _rng(seed, "flatten_indicator")
    with default_dtype(np.float64):
        p = FlattenParams(linear(rng, WIDTH, WIDTH), linear(rng, WIDTH, 1))
        x = _leaf(rng, 2, 4, WIDTH)
        w = rng.standard_normal((2, 1, WIDTH))
        return grad_check_finite_diff(
            lambda *_: _weighted(flatten_indicator(x, p), w),
            [x, p.hidden.weight, p.hidden.bias, p.score.weight],
            op_name="flatten_indicator",
        )


@register_check("project_feature")
def check_project_feature(seed: int) -> GradCheckReport:
    rng = _rng(seed, "project_feature")
    with default_dtype(np.float64):
        p = linear(rng, 8, 4)
        x = _leaf(rng, 3, 8)
        w = rng.standard_normal((3, 4))
        return grad_check_finite_diff(
            lambda *_: _weighted(project_feature(x, p), w), [x, p.weight, p.bias], op_name="project_feature"
        )


def _toy_story(rng: np.random.Generator, rows: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    tokens = rng.integers(4, VOCAB, size=(rows, steps))
    tokens[0, -1] = PAD
    inputs = np.concatenate([np.full((rows, 1), BOS), tokens[:, :-1]], axis=1)
    return inputs, tokens.T


@register_check("decode_step")
def check_decode_step(seed: int) -> GradCheckReport:
    rng = _rng(seed, "decode_step")
    with default_dtype(np.float64):
        p = decoder_params(rng, VOCAB, WIDTH, HIDDEN, HEADS)
        k_bar, r_bar, a_tilde = _leaf(rng, 2, WIDTH), _leaf(rng, 2, WIDTH), _leaf(rng, 2, WIDTH)
        r_full = _leaf(rng, 2, 4, WIDTH)
        inputs, targets = _toy_story(rng, 2, 3)

        def f(*_: Tensor) -> Tensor:
            ind = IndicatorVectors(k_bar, r_bar, a_tilde)
            logits = teacher_forced_logits(p, ind, r_full, inputs, TRAIN)
            return story_loss(logits, targets, targets != PAD)

        return grad_check_finite_diff(
            f,
            [k_bar, r_bar, a_tilde, r_full, p.lstm_regional.w_h, p.ca_regional.attention.w_q, p.fuse.weight],
            op_name="decode_step",
        )


@register_check("pipeline")
def check_pipeline(seed: int) -> GradCheckReport:
    rng = _rng(seed, "pipeline")
    with default_dtype(np.float64):
        cca = cca_params(rng, WIDTH, HEADS, 2)
        inner, outer = sop_params(rng, WIDTH, 3), sop_params(rng, WIDTH, 3)
        p = decoder_params(rng, VOCAB, WIDTH, HIDDEN, HEADS)
        k0, r0, conv = _leaf(rng, 2, 3, WIDTH), _leaf(rng, 2, 4, WIDTH), _leaf(rng, 2, 2, 2, WIDTH)
        inputs, targets = _toy_story(rng, 2, 3)

        def f(*_: Tensor) -> Tensor:
            k_p, r_p = cca_forward(k0, r0, cca, TRAIN)
            a_tilde = gsm_forward(conv, inner, outer).reshape(1, WIDTH)
            ind = IndicatorVectors(
                flatten_indicator(k_p, p.flatten_knowledge).reshape(2, WIDTH),
                flatten_indicator(r_p, p.flatten_regions).reshape(2, WIDTH),
                a_tilde[np.zeros(2, dtype=np.int64)],
            )
            logits = teacher_forced_logits(p, ind, r_p, inputs, TRAIN)
            return story_loss(logits, targets, targets != PAD)

        return grad_check_finite_diff(f, [k0, r0, conv, p.output.weight], op_name="pipeline")
