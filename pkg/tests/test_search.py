"""Tests for greedy and beam search on a three-token toy model."""

from __future__ import annotations

import math

import numpy as np
import pytest

from pdum.kags.errors import ContractError
from pdum.kags.search import beam_search, greedy_search

EOS, A, B = 0, 1, 2
BOS = 9

# next-token distributions keyed by the prefix emitted so far
_TABLE = {
    (): (0.01, 0.55, 0.44),
    (A,): (0.4, 0.3, 0.3),
    (B,): (0.9, 0.05, 0.05),
}
_TAIL = (0.9, 0.05, 0.05)


class ToyModel:
    """Rows are the prefixes of the live hypotheses."""

    def __init__(self) -> None:
        self.steps = 0

    def initial(self) -> list[tuple[int, ...]]:
        return [()]

    def step(self, state: list[tuple[int, ...]], tokens: np.ndarray) -> tuple[np.ndarray, list[tuple[int, ...]]]:
        self.steps += 1
        prefixes = [p if t == BOS else p + (int(t),) for p, t in zip(state, tokens)]
        probs = np.array([_TABLE.get(p, _TAIL) for p in prefixes])
        return np.log(probs), prefixes

    def reorder(self, state: list[tuple[int, ...]], rows: np.ndarray) -> list[tuple[int, ...]]:
        return [state[int(r)] for r in rows]


def test_greedy_takes_locally_best_tokens() -> None:
    """Greedy commits to A and then ends the sentence."""
    h = greedy_search(ToyModel(), bos=BOS, eos=EOS, max_len=5)
    assert h.tokens == (A, EOS)
    assert h.finished
    assert h.log_prob == pytest.approx(math.log(0.55 * 0.4))


def test_beam_finds_the_better_sentence() -> None:
    """A second hypothesis lets the search recover the more probable B, EOS."""
    h = beam_search(ToyModel(), beam=2, bos=BOS, eos=EOS, max_len=5)
    assert h.tokens == (B, EOS)
    assert h.log_prob == pytest.approx(math.log(0.44 * 0.9))


def test_beam_of_one_is_greedy() -> None:
    """Width one reproduces greedy decoding exactly."""
    assert beam_search(ToyModel(), beam=1, bos=BOS, eos=EOS, max_len=5) == greedy_search(
        ToyModel(), bos=BOS, eos=EOS, max_len=5
    )


def test_wider_beams_never_score_worse() -> None:
    """The returned log-probability is non-decreasing in the beam size."""
    scores = [beam_search(ToyModel(), beam=b, bos=BOS, eos=EOS, max_len=4).log_prob for b in range(1, 5)]
    assert scores == sorted(scores)
    nested = beam_search(ToyModel(), beam=3, bos=BOS, eos=EOS, max_len=4)
    single = beam_search(ToyModel(), beam=3, bos=BOS, eos=EOS, max_len=4, nested=False)
    assert nested.log_prob >= single.log_prob


def test_length_bound_truncates_unfinished_sentences() -> None:
    """Hitting max_len returns the hypothesis without an end token."""
    h = greedy_search(ToyModel(), bos=BOS, eos=EOS, max_len=1)
    assert h.tokens == (A,)
    assert not h.finished
    b = beam_search(ToyModel(), beam=2, bos=BOS, eos=EOS, max_len=1)
    assert b.tokens == (A,)
    assert not b.finished


def test_search_stops_once_finished_hypotheses_dominate() -> None:
    """No further steps run when every live hypothesis already ended."""
    model = ToyModel()
    beam_search(model, beam=2, bos=BOS, eos=EOS, max_len=25, nested=False)
    assert model.steps == 2


def test_invalid_arguments() -> None:
    """Beam size and length bound must be positive."""
    with pytest.raises(ContractError):
        beam_search(ToyModel(), beam=0, bos=BOS, eos=EOS, max_len=5)
    with pytest.raises(ContractError):
        beam_search(ToyModel(), beam=2, bos=BOS, eos=EOS, max_len=0)
    with pytest.raises(ContractError):
        greedy_search(ToyModel(), bos=BOS, eos=EOS, max_len=0)
