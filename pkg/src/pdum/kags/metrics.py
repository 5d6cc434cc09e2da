"""Corpus metrics for generated stories: BLEU-1..4, ROUGE-L and CIDEr-D.

All scores are computed on token lists from :func:`pdum.kags.data.tokenize`.
By default each album is one evaluation pair whose candidate is the
concatenation of its predicted sentences and whose references are the
concatenated reference stories.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import parse_manifest, tokenize
from .errors import ContractError, JoinError, ParseError, ValidationError
from .utils import parallel_map

__all__ = [
    "EvalPair",
    "MetricReport",
    "bleu",
    "rouge_l",
    "cider_d",
    "read_predictions",
    "build_pairs",
    "evaluate_stories",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_ORDER = 4

Ngram = tuple[str, ...]


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        if not self.references:
            raise ValidationError("an evaluation pair needs at least one reference")

    @classmethod
    def from_tokens(cls, candidate: Sequence[str], references: Sequence[Sequence[str]]) -> EvalPair:
        return cls(tuple(candidate), tuple(tuple(r) for r in references))


@dataclass(frozen=True)
class MetricReport:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float
    pairs: int

    def to_json(self) -> dict[str, float]:
        """Scores on the x100 scale at full precision."""

        values = {f"bleu{n}": 100.0 * score for n, score in enumerate(self.bleu, start=1)}
        values["rouge_l"] = 100.0 * self.rouge_l
        values["cider"] = 100.0 * self.cider
        return values


def _ngrams(tokens: Sequence[str], n: int) -> Counter[Ngram]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _require_corpus(corpus: Sequence[EvalPair], metric: str) -> None:
    if not corpus:
        raise ContractError(f"{metric}: the candidate corpus is empty")


def bleu(corpus: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus-level BLEU-``n`` in ``[0, 1]``.

    Clipped n-gram counts are pooled over the corpus for every order up to
    ``n``; the score is their geometric mean times the brevity penalty
    ``min(1, exp(1 - r / c))``, where ``r`` sums the reference length closest
    to each candidate (shorter one on ties) and ``c`` the candidate lengths.
    """

    _require_corpus(corpus, "bleu")
    if not 1 <= n <= 4:
        raise ContractError(f"bleu order must lie in 1..4, got {n}")
    correct = [0] * n
    guessed = [0] * n
    cand_len = 0
    ref_len = 0
    for pair in corpus:
        c = len(pair.candidate)
        cand_len += c
        ref_len += min((len(r) for r in pair.references), key=lambda length: (abs(length - c), length))
        for k in range(1, n + 1):
            counts = _ngrams(pair.candidate, k)
            ceiling: Counter[Ngram] = Counter()
            for reference in pair.references:
                ceiling |= _ngrams(reference, k)
            correct[k - 1] += sum(min(count, ceiling[gram]) for gram, count in counts.items())
            guessed[k - 1] += max(0, c - k + 1)
    if cand_len == 0 or min(correct) == 0:
        return 0.0
    log_precision = sum(math.log(hit / total) for hit, total in zip(correct, guessed)) / n
    brevity = min(0.0, 1.0 - ref_len / cand_len)
    return math.exp(log_precision + brevity)


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if token == other else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def _rouge_pair(pair: EvalPair) -> float:
    beta2 = ROUGE_BETA**2
    best = 0.0
    for reference in pair.references:
        if not pair.candidate or not reference:
            continue
        common = _lcs(pair.candidate, reference)
        if common == 0:
            continue
        precision = common / len(pair.candidate)
        recall = common / len(reference)
        best = max(best, (1 + beta2) * precision * recall / (recall + beta2 * precision))
    return best


def rouge_l(corpus: Sequence[EvalPair]) -> float:
    """Mean over pairs of the best per-reference LCS F-measure (beta 1.2)."""

    _require_corpus(corpus, "rouge_l")
    return float(np.mean([_rouge_pair(pair) for pair in corpus]))


@dataclass(frozen=True)
class _TfIdf:
    vectors: tuple[dict[Ngram, float], ...]
    norms: tuple[float, ...]
    length: int


def _tfidf(tokens: Sequence[str], df: Counter[Ngram], log_docs: float) -> _TfIdf:
    vectors = []
    norms = []
    for k in range(1, CIDER_ORDER + 1):
        vec = {gram: tf * (log_docs - math.log(max(1.0, df[gram]))) for gram, tf in _ngrams(tokens, k).items()}
        vectors.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return _TfIdf(tuple(vectors), tuple(norms), len(tokens))


def _cider_similarity(hyp: _TfIdf, ref: _TfIdf) -> float:
    penalty = math.exp(-((hyp.length - ref.length) ** 2) / (2 * CIDER_SIGMA**2))
    total = 0.0
    for vh, vr, nh, nr in zip(hyp.vectors, ref.vectors, hyp.norms, ref.norms):
        dot = sum(min(value, vr.get(gram, 0.0)) * vr.get(gram, 0.0) for gram, value in vh.items())
        if nh != 0.0 and nr != 0.0:
            dot /= nh * nr
        total += dot * penalty
    return total / CIDER_ORDER


def cider_d(corpus: Sequence[EvalPair]) -> float:
    """Mean CIDEr-D over the corpus, on the ``[0, 10]`` scale.

    Document frequencies count, for every n-gram up to order 4, the pairs
    whose references contain it; idf is ``log(pairs) - log(max(1, df))``.
    Each candidate is compared to each reference with clipped tf-idf cosine
    similarity and a gaussian length penalty (sigma 6), averaged over orders
    and references and multiplied by 10.

    Raises
    ------
    ContractError
        If the corpus has fewer than two pairs, where every idf is zero.
    """

    _require_corpus(corpus, "cider_d")
    if len(corpus) < 2:
        raise ContractError(
            "cider_d needs at least two pairs: with a single document every n-gram has idf log(1/1) = 0"
        )
    df: Counter[Ngram] = Counter()
    for pair in corpus:
        seen: set[Ngram] = set()
        for reference in pair.references:
            for k in range(1, CIDER_ORDER + 1):
                seen.update(_ngrams(reference, k))
        df.update(seen)
    log_docs = math.log(float(len(corpus)))

    def score(pair: EvalPair) -> float:
        hyp = _tfidf(pair.candidate, df, log_docs)
        refs = [_tfidf(r, df, log_docs) for r in pair.references]
        return 10.0 * sum(_cider_similarity(hyp, ref) for ref in refs) / len(refs)

    return float(np.mean(parallel_map(score, corpus)))


def read_predictions(path: str | Path) -> dict[str, list[str]]:
    """Read generation output: one ``{"album_id", "sentences", ...}`` object per line.

    Raises
    ------
    ParseError
        On malformed lines, with the line number.
    ValidationError
        If the file holds no predictions or repeats an album id.
    """

    source = Path(path)
    predictions: dict[str, list[str]] = {}
    with source.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{source}:{number}"
            try:
                raw: Any = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: malformed JSON ({exc.msg})") from exc
            if not isinstance(raw, dict) or not isinstance(raw.get("album_id"), str):
                raise ParseError(f"{where}: expected an object with a string 'album_id'")
            sentences = raw.get("sentences")
            if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
                raise ParseError(f"{where}: album {raw['album_id']!r}: 'sentences' must be a list of strings")
            if raw["album_id"] in predictions:
                raise ValidationError(f"{where}: duplicate album id {raw['album_id']!r}")
            predictions[raw["album_id"]] = sentences
    if not predictions:
        raise ValidationError(f"{source}: no predictions to evaluate")
    return predictions


def build_pairs(
    predictions: dict[str, list[str]],
    references: dict[str, tuple[tuple[str, ...], ...]],
    *,
    per_sentence: bool = False,
) -> list[EvalPair]:
    """Join predictions to reference stories by album id, in sorted album order.

    Raises
    ------
    JoinError
        Listing every predicted album id missing from ``references``.
    """

    missing = sorted(set(predictions) - set(references))
    if missing:
        raise JoinError(f"albums not found in the manifest: {', '.join(missing)}", missing)
    pairs: list[EvalPair] = []
    for album_id in sorted(predictions):
        sentences = predictions[album_id]
        stories = references[album_id]
        if not per_sentence:
            candidate = [t for s in sentences for t in tokenize(s)]
            flat = [[t for s in story for t in tokenize(s)] for story in stories]
            pairs.append(EvalPair.from_tokens(candidate, flat))
            continue
        if any(len(story) != len(sentences) for story in stories):
            raise ValidationError(f"album {album_id!r}: sentence counts differ between prediction and references")
        for n, sentence in enumerate(sentences):
            pairs.append(EvalPair.from_tokens(tokenize(sentence), [tokenize(story[n]) for story in stories]))
    return pairs


def evaluate_stories(
    predictions: str | Path,
    manifest: str | Path,
    *,
    per_sentence: bool = False,
    n_images: int = 5,
) -> MetricReport:
    """Score a predictions file against the references of a manifest."""

    predicted = read_predictions(predictions)
    albums = parse_manifest(manifest, n_images=n_images, check_files=False)
    pairs = build_pairs(predicted, {a.album_id: a.references for a in albums}, per_sentence=per_sentence)
    logger.info("Evaluating %d pairs from %d albums", len(pairs), len(predicted))
    scores = tuple(bleu(pairs, n) for n in range(1, 5))
    return MetricReport(
        bleu=scores,  # type: ignore[arg-type]
        rouge_l=rouge_l(pairs),
        cider=cider_d(pairs),
        pairs=len(pairs),
    )
