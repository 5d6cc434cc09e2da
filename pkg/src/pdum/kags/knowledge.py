"""Local commonsense knowledge: weighted triples, top-K retrieval and concept embedding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Vocabulary, entity_token
from .errors import ParseError, ValidationError
from .nn import Linear
from .tensor import Tensor, concat, zeros

__all__ = [
    "ConceptTriple",
    "KnowledgeGraph",
    "build_knowledge_graph",
    "load_knowledge_graph",
    "write_knowledge_graph",
    "retrieve_concepts",
    "embed_concepts",
    "extend_vocabulary",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass(frozen=True)
class ConceptTriple:
    head: str
    relation: str
    tail: str
    weight: float

    def __post_init__(self) -> None:
        if not (self.head and self.relation and self.tail):
            raise ValidationError(f"triple fields must be non-empty: {self}")
        if not self.weight >= 0 or math.isinf(self.weight):
            raise ValidationError(f"triple weight must be a finite non-negative number, got {self.weight}")

    @property
    def tokens(self) -> tuple[str, str, str]:
        return self.head, self.relation, self.tail


def _rank(triple: ConceptTriple) -> tuple[float, str, str]:
    return -triple.weight, triple.relation, triple.tail


@dataclass(frozen=True)
class KnowledgeGraph:
    """Triples indexed by head, each list sorted by descending weight then relation then tail."""

    edges: Mapping[str, tuple[ConceptTriple, ...]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.edges.values())

    def candidates(self, head: str) -> tuple[ConceptTriple, ...]:
        return self.edges.get(entity_token(head), ())

    def triples(self) -> Iterable[ConceptTriple]:
        for head in sorted(self.edges):
            yield from self.edges[head]

    def tokens(self) -> set[str]:
        return {token for triple in self.triples() for token in triple.tokens}


def build_knowledge_graph(triples: Iterable[ConceptTriple]) -> KnowledgeGraph:
    """Index ``triples`` by head; repeated ``(head, relation, tail)`` keep the largest weight."""

    best: dict[tuple[str, str, str], ConceptTriple] = {}
    for triple in triples:
        key = triple.tokens
        if key not in best or triple.weight > best[key].weight:
            best[key] = triple
    grouped: dict[str, list[ConceptTriple]] = {}
    for triple in best.values():
        grouped.setdefault(triple.head, []).append(triple)
    return KnowledgeGraph({head: tuple(sorted(items, key=_rank)) for head, items in grouped.items()})


def load_knowledge_graph(path: str | Path) -> KnowledgeGraph:
    """Parse a ``head<TAB>relation<TAB>tail<TAB>weight`` file (``#`` starts a comment line).

    Entities are lowercased and multi-word names joined with underscores.

    Raises
    ------
    ParseError
        If a line does not have four fields or the weight is not a number.
    ValidationError
        If a weight is negative.
    """

    source = Path(path)
    triples: list[ConceptTriple] = []
    with source.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(f"{source}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            head, relation, tail = (entity_token(f) for f in fields[:3])
            try:
                weight = float(fields[3])
            except ValueError as exc:
                raise ParseError(f"{source}:{lineno}: weight {fields[3]!r} is not a number") from exc
            if weight < 0:
                raise ValidationError(f"{source}:{lineno}: negative weight {weight}")
            try:
                triples.append(ConceptTriple(head, relation, tail, weight))
            except ValidationError as exc:
                raise ParseError(f"{source}:{lineno}: {exc}") from exc
    graph = build_knowledge_graph(triples)
    logger.info("Loaded %d knowledge triples over %d heads from %s", len(graph), len(graph.edges), source)
    return graph


def write_knowledge_graph(path: str | Path, triples: Iterable[ConceptTriple]) -> None:
    lines = [f"{t.head}\t{t.relation}\t{t.tail}\t{t.weight!r}\n" for t in triples]
    Path(path).write_text("".join(lines), encoding="utf-8")


def retrieve_concepts(g: KnowledgeGraph, labels: Sequence[str], k_max: int) -> list[ConceptTriple]:
    """Return at most ``k_max`` triples whose head is one of ``labels``.

    Candidates of all labels are merged and ordered by descending weight; ties
    go to the earlier label, then to relation and tail order. Unknown labels
    are skipped.
    """

    if k_max < 1:
        raise ValidationError(f"k_max must be at least 1, got {k_max}")
    order: dict[str, int] = {}
    for label in labels:
        order.setdefault(entity_token(label), len(order))
    pool = [(triple, rank) for label, rank in order.items() for triple in g.candidates(label)]
    pool.sort(key=lambda item: (-item[0].weight, item[1], item[0].relation, item[0].tail))
    return [triple for triple, _ in pool[:k_max]]


def embed_concepts(
    triples: Sequence[ConceptTriple],
    vocab: Vocabulary,
    emb: Tensor,
    projection: Linear,
    k_max: int,
) -> Tensor:
    """Embed triples as ``k_max x d`` rows.

    Each triple becomes the mean of its three token embeddings passed through
    ``projection``; rows past the available triples are zero. Tokens missing
    from ``vocab`` use the unknown token.
    """

    width = emb.shape[-1]
    used = list(triples[:k_max])
    if not used:
        return zeros(k_max, width)
    ids = np.array([vocab.encode(t.tokens) for t in used], dtype=np.int64)
    rows = projection(emb[ids].mean(axis=1))
    if len(used) == k_max:
        return rows
    return concat([rows, zeros(k_max - len(used), width)], axis=0)


def extend_vocabulary(vocab: Vocabulary, g: KnowledgeGraph) -> Vocabulary:
    """Append every graph entity and relation missing from ``vocab`` (sorted, ids stable)."""

    extended = vocab.extend(g.tokens())
    if len(extended) != len(vocab):
        logger.info("Extended vocabulary from %d to %d tokens", len(vocab), len(extended))
    return extended
