"""Synthetic albums for desk-scale runs.

Every image carries two label nouns. Its conv grid and region features are
built from per-noun prototype vectors plus noise, its knowledge rows link the
nouns to a handful of concepts, and its reference sentence names both nouns
through a small template grammar. Everything is a pure function of the seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import AlbumRecord, ImageEntry, manifest_line, write_feature_file
from .errors import ValidationError
from .knowledge import ConceptTriple, build_knowledge_graph, write_knowledge_graph
from .utils import rng_stream

__all__ = [
    "SynthSpec",
    "SyntheticAlbum",
    "SyntheticDataset",
    "NOUNS",
    "KNOWLEDGE_FILE",
    "generate_synthetic_album",
    "synthesize_dataset",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

KNOWLEDGE_FILE = "knowledge.tsv"

NOUNS = (
    "dog",
    "cat",
    "beach",
    "tree",
    "car",
    "cake",
    "bike",
    "boat",
    "house",
    "river",
    "bird",
    "ball",
    "flower",
    "mountain",
    "child",
    "train",
)

_TEMPLATES = (
    "we saw a {a} near the {b} .",
    "the {a} and the {b} were there .",
    "a {a} sat next to the {b} !",
    "everyone liked the {a} by the {b} .",
    "then the {a} found a {b} .",
)

_CONCEPTS = {
    "at_location": ("park", "home", "street", "shore", "garden"),
    "is_a": ("animal", "object", "place", "vehicle", "food"),
    "used_for": ("play", "travel", "rest", "eating", "fun"),
    "has_property": ("big", "small", "happy", "old", "bright"),
}


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 5
    m_boxes: int = 8
    grid: int = 7
    feature_dim: int = 2048
    references: int = 1

    def __post_init__(self) -> None:
        for name in ("n_images", "m_boxes", "grid", "feature_dim", "references"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.m_boxes < 2:
            raise ValidationError(f"m_boxes must be at least 2 to hold both labels, got {self.m_boxes}")


class SyntheticAlbum(NamedTuple):
    record: AlbumRecord
    knowledge: list[ConceptTriple]


class SyntheticDataset(NamedTuple):
    manifest: Path
    knowledge: Path
    albums: list[AlbumRecord]


def _prototype(seed: int, noun: str, width: int) -> np.ndarray:
    return rng_stream(seed, f"synth/prototype/{noun}").standard_normal(width)


def _knowledge_rows(seed: int, noun: str) -> list[ConceptTriple]:
    rng = rng_stream(seed, f"synth/knowledge/{noun}")
    rows = []
    for relation, tails in _CONCEPTS.items():
        tail = tails[int(rng.integers(len(tails)))]
        weight = float(np.round(rng.uniform(0.1, 1.0), 3))
        rows.append(ConceptTriple(noun, relation, tail, weight))
    return rows


def generate_synthetic_album(seed: int, spec: SynthSpec, out_dir: str | Path, index: int) -> SyntheticAlbum:
    """Write the feature files of album ``index`` under ``out_dir/features`` and return its record."""

    out = Path(out_dir)
    rng = rng_stream(seed, f"synth/album/{index}")
    album_id = f"album-{index:04d}"
    folder = out / "features" / album_id
    folder.mkdir(parents=True, exist_ok=True)

    ys, xs = np.mgrid[0 : spec.grid, 0 : spec.grid]
    images: list[ImageEntry] = []
    stories: list[list[str]] = [[] for _ in range(spec.references)]
    knowledge: list[ConceptTriple] = []
    for n in range(spec.n_images):
        labels = tuple(NOUNS[i] for i in rng.choice(len(NOUNS), size=2, replace=False))
        protos = [_prototype(seed, label, spec.feature_dim) for label in labels]

        conv = 0.1 * rng.standard_normal((spec.grid, spec.grid, spec.feature_dim))
        for proto in protos:
            cy, cx = rng.uniform(0, spec.grid - 1, size=2)
            blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / 2.0)
            conv += blob[..., None] * proto
        regions = 0.1 * rng.standard_normal((spec.m_boxes, spec.feature_dim))
        regions[: len(protos)] += np.stack(protos)
        regions = regions[rng.permutation(spec.m_boxes)]

        image_id = f"{album_id}-{n}"
        conv_path = folder / f"{image_id}.conv.kagf"
        regions_path = folder / f"{image_id}.regions.kagf"
        write_feature_file(conv_path, conv)
        write_feature_file(regions_path, regions)
        images.append(ImageEntry(image_id, conv_path, regions_path, labels))

        for story in stories:
            template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            story.append(template.format(a=labels[0], b=labels[1]))
        for label in labels:
            knowledge.extend(_knowledge_rows(seed, label))

    record = AlbumRecord(album_id, tuple(images), tuple(tuple(s) for s in stories))
    return SyntheticAlbum(record, knowledge)


def synthesize_dataset(out_dir: str | Path, albums: int, seed: int, spec: SynthSpec | None = None) -> SyntheticDataset:
    """Write ``manifest.jsonl``, ``knowledge.tsv`` and the feature files of ``albums`` albums.

    Raises
    ------
    ValidationError
        If ``albums`` is not positive.
    """

    if albums < 1:
        raise ValidationError(f"albums must be positive, got {albums}")
    spec = spec or SynthSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generated = [generate_synthetic_album(seed, spec, out, index) for index in range(albums)]

    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(manifest_line(a.record, out) + "\n" for a in generated), encoding="utf-8")
    knowledge = out / KNOWLEDGE_FILE
    graph = build_knowledge_graph(t for a in generated for t in a.knowledge)
    write_knowledge_graph(knowledge, graph.triples())
    logger.info("Synthesized %d albums (%d knowledge triples) under %s", albums, len(graph), out)
    return SyntheticDataset(manifest, knowledge, [a.record for a in generated])
