"""Two-stream multi-modal story decoder.

The sentences of an album are decoded together as rows of one batch: row ``n``
narrates image ``n`` and only ever reads image ``n``'s indicators, so rows do
not interact. Hidden states start from zero for every sentence.

Per step, with ``w`` the previous word embedding::

    hr = LSTM_r(K ⊕ w ⊕ R)        vr = Embed_r(CA_r(hr, regions))
    ha = LSTM_a(K ⊕ w ⊕ A)        va = Embed_a(CA_a(ha, A))
    v  = Linear(GLU(vr ⊕ hr ⊕ va ⊕ ha))
    logits = Output(v)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .attention import UnitParams, cross_attention_unit, unit_params
from .data import BOS, EOS
from .errors import ContractError, DimensionError
from .nn import EVAL, Linear, Mode, linear
from .search import Hypothesis, beam_search, greedy_search
from .tensor import Tensor, concat, no_grad, parameter, stack

__all__ = [
    "FlattenParams",
    "LstmParams",
    "LstmState",
    "DecoderParams",
    "DecoderStepState",
    "IndicatorVectors",
    "decoder_params",
    "flatten_indicator",
    "lstm_step",
    "glu",
    "initial_state",
    "with_tokens",
    "decode_step",
    "teacher_forced_logits",
    "SentenceStepModel",
    "generate_greedy",
    "generate_beam",
    "trace_regional_attention",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

RegionalKeys = Literal["full", "flattened"]


@dataclass
class FlattenParams:
    hidden: Linear
    score: Linear
    activation: str = "relu"


@dataclass
class LstmParams:
    """Gate weights in ``input, forget, candidate, output`` order."""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class DecoderParams:
    embedding: Tensor
    flatten_regions: FlattenParams
    flatten_knowledge: FlattenParams
    lstm_regional: LstmParams
    lstm_global: LstmParams
    ca_regional: UnitParams
    ca_global: UnitParams
    embed_regional: Linear
    embed_global: Linear
    fuse: Linear
    output: Linear

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden(self) -> int:
        return self.lstm_regional.hidden

    @property
    def vocab_size(self) -> int:
        return self.output.out_features


class DecoderStepState(NamedTuple):
    """Recurrent state of every row; ``w_prev`` is ``None`` until the next word is fed."""

    hr: LstmState
    ha: LstmState
    w_prev: Tensor | None


class IndicatorVectors(NamedTuple):
    k_bar: Tensor
    r_bar: Tensor
    a_tilde: Tensor


def decoder_params(
    rng: np.random.Generator,
    vocab_size: int,
    width: int,
    hidden: int,
    n_heads: int,
    *,
    flatten_activation: str = "relu",
) -> DecoderParams:
    def flatten() -> FlattenParams:
        return FlattenParams(linear(rng, width, width), linear(rng, width, 1), flatten_activation)

    def lstm() -> LstmParams:
        limit = 1.0 / np.sqrt(hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        return LstmParams(
            w_x=parameter(rng.uniform(-limit, limit, size=(3 * width, 4 * hidden))),
            w_h=parameter(rng.uniform(-limit, limit, size=(hidden, 4 * hidden))),
            bias=parameter(bias),
        )

    return DecoderParams(
        embedding=parameter(rng.normal(0.0, 1.0 / np.sqrt(width), size=(vocab_size, width))),
        flatten_regions=flatten(),
        flatten_knowledge=flatten(),
        lstm_regional=lstm(),
        lstm_global=lstm(),
        ca_regional=unit_params(rng, width, n_heads, query_width=hidden),
        ca_global=unit_params(rng, width, n_heads, query_width=hidden),
        embed_regional=linear(rng, hidden, width),
        embed_global=linear(rng, hidden, width),
        fuse=linear(rng, width + hidden, width),
        output=linear(rng, width, vocab_size),
    )


def flatten_indicator(x: Tensor, p: FlattenParams, *, return_weights: bool = False):
    """Summarize the rows of ``x`` (``... x M x d``) into one ``... x 1 x d`` vector.

    Two linear layers score every row, a softmax over the ``M`` rows turns the
    scores into weights, and the output is the weighted sum of the rows.
    """

    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"flatten_indicator needs at least one row, got {x.shape}")
    hidden = p.hidden(x)
    if p.activation == "relu":
        hidden = hidden.relu()
    weights = p.score(hidden).softmax(axis=-2)
    out = (weights * x).sum(axis=-2, keepdims=True)
    return (out, weights) if return_weights else out


def lstm_step(x: Tensor, state: LstmState, p: LstmParams) -> LstmState:
    if x.shape[-1] != p.w_x.shape[0] or state.h.shape[-1] != p.hidden:
        raise DimensionError(
            f"lstm_step: input {x.shape} / hidden {state.h.shape} do not match weights {p.w_x.shape}, {p.w_h.shape}"
        )
    n = p.hidden
    gates = x @ p.w_x + state.h @ p.w_h + p.bias
    i = gates[..., 0:n].sigmoid()
    f = gates[..., n : 2 * n].sigmoid()
    g = gates[..., 2 * n : 3 * n].tanh()
    o = gates[..., 3 * n : 4 * n].sigmoid()
    c = f * state.c + i * g
    return LstmState(o * c.tanh(), c)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid of the second half."""

    width = x.shape[-1]
    if width % 2:
        raise DimensionError(f"glu needs an even width, got {width}")
    half = width // 2
    return x[..., :half] * x[..., half:].sigmoid()


def initial_state(p: DecoderParams, rows: int, *, bos: int = BOS) -> DecoderStepState:
    def zero() -> LstmState:
        return LstmState(Tensor(np.zeros((rows, p.hidden))), Tensor(np.zeros((rows, p.hidden))))

    return DecoderStepState(zero(), zero(), p.embedding[np.full(rows, bos)])


def with_tokens(state: DecoderStepState, tokens: Sequence[int] | np.ndarray, p: DecoderParams) -> DecoderStepState:
    """Feed the previously emitted word of every row."""
    return state._replace(w_prev=p.embedding[np.asarray(tokens, dtype=np.int64)])


def decode_step(
    state: DecoderStepState,
    ind: IndicatorVectors,
    r_full: Tensor,
    p: DecoderParams,
    mode: Mode = EVAL,
    *,
    regional_keys: RegionalKeys = "full",
    return_weights: bool = False,
):
    """Advance every row by one word.

    Parameters
    ----------
    state : DecoderStepState
        Current state with ``w_prev`` set.
    ind : IndicatorVectors
        ``rows x d`` knowledge indicator, regional indicator and global aggregation.
    r_full : Tensor
        Attentive regional features, ``rows x M x d``.
    p : DecoderParams
        Decoder weights.
    mode : Mode, optional
        Forward mode for the CA units.
    regional_keys : {"full", "flattened"}
        Attend over all ``M`` regions or over the regional indicator only.
    return_weights : bool, optional
        Also return the head-averaged regional attention weights (``rows x M`` array).

    Returns
    -------
    tuple
        ``(logits, new_state)`` where ``logits`` is ``rows x |V|`` and the new
        state waits for the next word; plus the weights on request.

    Raises
    ------
    ContractError
        If the state was not initialized or no previous word was fed.
    """

    if state is None or state.w_prev is None:
        raise ContractError("decoder state has no previous word; start from initial_state and feed with_tokens")
    rows, width = state.w_prev.shape
    if ind.k_bar.shape != (rows, width) or ind.r_bar.shape != (rows, width) or ind.a_tilde.shape != (rows, width):
        raise DimensionError(
            f"decode_step: indicators {ind.k_bar.shape}, {ind.r_bar.shape}, {ind.a_tilde.shape} "
            f"do not match {rows} rows of width {width}"
        )

    hr = lstm_step(concat([ind.k_bar, state.w_prev, ind.r_bar], axis=-1), state.hr, p.lstm_regional)
    keys = r_full if regional_keys == "full" else ind.r_bar.reshape(rows, 1, width)
    attended_r, weights = cross_attention_unit(
        hr.h.reshape(rows, 1, p.hidden), keys, p.ca_regional, mode, return_weights=True
    )
    vr = p.embed_regional(attended_r.reshape(rows, p.hidden))

    ha = lstm_step(concat([ind.k_bar, state.w_prev, ind.a_tilde], axis=-1), state.ha, p.lstm_global)
    global_keys = ind.a_tilde.reshape(rows, 1, width)
    attended_a = cross_attention_unit(ha.h.reshape(rows, 1, p.hidden), global_keys, p.ca_global, mode)
    va = p.embed_global(attended_a.reshape(rows, p.hidden))

    fused = p.fuse(glu(concat([vr, hr.h, va, ha.h], axis=-1)))
    logits = p.output(fused)
    new_state = DecoderStepState(hr, ha, None)
    if return_weights:
        return logits, new_state, weights.data.mean(axis=1).reshape(rows, -1)
    return logits, new_state


def teacher_forced_logits(
    p: DecoderParams,
    ind: IndicatorVectors,
    r_full: Tensor,
    inputs: np.ndarray,
    mode: Mode = EVAL,
    *,
    regional_keys: RegionalKeys = "full",
) -> Tensor:
    """Logits ``steps x rows x |V|`` when row ``n`` is fed ``inputs[n, t]`` at step ``t``."""

    rows, steps = inputs.shape
    state = initial_state(p, rows)
    outputs: list[Tensor] = []
    for t in range(steps):
        state = with_tokens(state, inputs[:, t], p)
        logits, state = decode_step(state, ind, r_full, p, mode, regional_keys=regional_keys)
        outputs.append(logits)
    return stack(outputs, axis=0)


class SentenceStepModel:
    """Adapter exposing one image's decoder as a :class:`~pdum.kags.search.StepModel`."""

    def __init__(
        self,
        p: DecoderParams,
        ind: IndicatorVectors,
        r_full: Tensor,
        image: int,
        *,
        mode: Mode = EVAL,
        regional_keys: RegionalKeys = "full",
    ) -> None:
        self.p = p
        self.ind = IndicatorVectors(*(v[image : image + 1] for v in ind))
        self.r_full = r_full[image : image + 1]
        self.mode = mode
        self.regional_keys = regional_keys

    def initial(self) -> DecoderStepState:
        return initial_state(self.p, 1)

    def step(self, state: DecoderStepState, tokens: np.ndarray) -> tuple[np.ndarray, DecoderStepState]:
        rows = len(tokens)
        spread = np.zeros(rows, dtype=np.int64)
        ind = IndicatorVectors(*(v[spread] for v in self.ind))
        with no_grad():
            logits, state = decode_step(
                with_tokens(state, tokens, self.p),
                ind,
                self.r_full[spread],
                self.p,
                self.mode,
                regional_keys=self.regional_keys,
            )
            log_probs = logits.log_softmax(axis=-1)
        return log_probs.data.astype(np.float64), state

    def reorder(self, state: DecoderStepState, rows: np.ndarray) -> DecoderStepState:
        with no_grad():
            hr = LstmState(state.hr.h[rows], state.hr.c[rows])
            ha = LstmState(state.ha.h[rows], state.ha.c[rows])
        return DecoderStepState(hr, ha, None)


def generate_greedy(
    p: DecoderParams,
    ind: IndicatorVectors,
    r_full: Tensor,
    *,
    max_len: int,
    mode: Mode = EVAL,
    regional_keys: RegionalKeys = "full",
) -> list[Hypothesis]:
    """Greedy sentence per image (one :class:`Hypothesis` per row of ``ind``)."""

    return [
        greedy_search(
            SentenceStepModel(p, ind, r_full, n, mode=mode, regional_keys=regional_keys),
            bos=BOS,
            eos=EOS,
            max_len=max_len,
        )
        for n in range(ind.k_bar.shape[0])
    ]


def generate_beam(
    p: DecoderParams,
    ind: IndicatorVectors,
    r_full: Tensor,
    *,
    beam: int = 3,
    max_len: int,
    nested: bool = True,
    mode: Mode = EVAL,
    regional_keys: RegionalKeys = "full",
) -> list[Hypothesis]:
    """Beam-search sentence per image; see :func:`~pdum.kags.search.beam_search`."""

    if beam < 1:
        raise ContractError(f"beam size must be at least 1, got {beam}")
    return [
        beam_search(
            SentenceStepModel(p, ind, r_full, n, mode=mode, regional_keys=regional_keys),
            beam=beam,
            bos=BOS,
            eos=EOS,
            max_len=max_len,
            nested=nested,
        )
        for n in range(ind.k_bar.shape[0])
    ]


def trace_regional_attention(
    p: DecoderParams,
    ind: IndicatorVectors,
    r_full: Tensor,
    sentences: Sequence[Sequence[int]],
    *,
    mode: Mode = EVAL,
    regional_keys: RegionalKeys = "full",
) -> list[np.ndarray]:
    """Replay generated sentences and return, per image, one row of region weights per token."""

    traces: list[np.ndarray] = []
    for n, tokens in enumerate(sentences):
        model = SentenceStepModel(p, ind, r_full, n, mode=mode, regional_keys=regional_keys)
        state = model.initial()
        rows: list[np.ndarray] = []
        previous = BOS
        with no_grad():
            for token in tokens:
                _, state, weights = decode_step(
                    with_tokens(state, [previous], p),
                    model.ind,
                    model.r_full,
                    p,
                    mode,
                    regional_keys=regional_keys,
                    return_weights=True,
                )
                rows.append(weights[0])
                previous = token
        width = 1 if regional_keys == "flattened" else r_full.shape[-2]
        traces.append(np.array(rows, dtype=np.float64).reshape(len(rows), width))
    return traces
