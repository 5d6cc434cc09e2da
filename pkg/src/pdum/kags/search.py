"""Greedy and beam decoding over any step-wise log-probability model."""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Protocol, TypeVar

import numpy as np

from .errors import ContractError

__all__ = ["Hypothesis", "StepModel", "greedy_search", "beam_search"]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

S = TypeVar("S")


class Hypothesis(NamedTuple):
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool


class StepModel(Protocol[S]):
    """A decoder seen as rows of hypotheses.

    ``step`` consumes the previous token of every row and returns float64
    log-probabilities (``rows x vocab``) with the advanced state; ``reorder``
    selects (and may repeat) rows of a state.
    """

    def initial(self) -> S: ...

    def step(self, state: S, tokens: np.ndarray) -> tuple[np.ndarray, S]: ...

    def reorder(self, state: S, rows: np.ndarray) -> S: ...


def greedy_search(model: StepModel[S], *, bos: int, eos: int, max_len: int) -> Hypothesis:
    """Pick the most probable token at every step (ties go to the lowest id)."""

    if max_len < 1:
        raise ContractError(f"max_len must be at least 1, got {max_len}")
    state = model.initial()
    last = np.array([bos])
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        log_probs, state = model.step(state, last)
        token = int(np.argmax(log_probs[0]))
        score = score + float(log_probs[0, token])
        tokens.append(token)
        if token == eos:
            return Hypothesis(tuple(tokens), score, True)
        last = np.array([token])
    return Hypothesis(tuple(tokens), score, False)


def beam_search(
    model: StepModel[S],
    *,
    beam: int,
    bos: int,
    eos: int,
    max_len: int,
    nested: bool = True,
) -> Hypothesis:
    """Return the most probable hypothesis found by length-wise beam search.

    With ``nested`` the search runs at every width ``1..beam`` and keeps the
    best result, so the returned score never decreases as ``beam`` grows and
    width 1 reproduces :func:`greedy_search`. Hypotheses are ranked by total
    log-probability (no length normalization), ties by token sequence.

    Raises
    ------
    ContractError
        If ``beam`` or ``max_len`` is below 1.
    """

    if beam < 1:
        raise ContractError(f"beam size must be at least 1, got {beam}")
    if max_len < 1:
        raise ContractError(f"max_len must be at least 1, got {max_len}")
    widths = range(1, beam + 1) if nested else (beam,)
    results = [_beam_at_width(model, width, bos, eos, max_len) for width in widths]
    return min(results, key=_ranking)


def _beam_at_width(model: StepModel[S], width: int, bos: int, eos: int, max_len: int) -> Hypothesis:
    state = model.initial()
    live: list[tuple[int, ...]] = [()]
    scores = np.zeros(1)
    last = np.array([bos])
    finished: list[Hypothesis] = []

    for t in range(max_len):
        log_probs, state = model.step(state, last)
        vocab = log_probs.shape[1]
        totals = (scores[:, None] + log_probs).ravel()
        keep = min(width, totals.size)
        threshold = np.partition(totals, totals.size - keep)[totals.size - keep]
        contenders = np.flatnonzero(totals >= threshold)
        ranked = sorted(
            (int(i) for i in contenders),
            key=lambda i: (-totals[i], live[i // vocab] + (i % vocab,)),
        )[:width]

        rows: list[int] = []
        next_live: list[tuple[int, ...]] = []
        next_scores: list[float] = []
        for i in ranked:
            row, token = divmod(i, vocab)
            sequence = live[row] + (token,)
            if token == eos or t == max_len - 1:
                finished.append(Hypothesis(sequence, float(totals[i]), token == eos))
            else:
                rows.append(row)
                next_live.append(sequence)
                next_scores.append(float(totals[i]))
        if not rows:
            break
        best_finished = max((h.log_prob for h in finished), default=-math.inf)
        if best_finished >= max(next_scores):
            break
        state = model.reorder(state, np.array(rows))
        live, scores = next_live, np.array(next_scores)
        last = np.array([sequence[-1] for sequence in live])

    logger.debug("beam width %d finished with %d hypotheses", width, len(finished))
    return min(finished, key=_ranking)


def _ranking(h: Hypothesis) -> tuple[float, tuple[int, ...]]:
    return -h.log_prob, h.tokens
