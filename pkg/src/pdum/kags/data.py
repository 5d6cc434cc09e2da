"""Album manifests, KAGF feature files and vocabulary construction."""

from __future__ import annotations

import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ParseError, ValidationError
from .nn import Linear
from .tensor import Tensor

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "SPECIAL_TOKENS",
    "tokenize",
    "entity_token",
    "Vocabulary",
    "ImageEntry",
    "AlbumRecord",
    "AlbumFeatures",
    "parse_manifest",
    "manifest_line",
    "read_feature_file",
    "write_feature_file",
    "load_album_features",
    "project_feature",
    "build_vocabulary",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"""[.,!?'"]|[^\s.,!?'"]+""")
_KAGF_MAGIC = b"KAGF"
_KAGF_VERSION = 1
_KAGF_HEADER = struct.Struct("<4sHB")
_MAX_ELEMENTS = 1 << 40


def tokenize(text: str) -> list[str]:
    """Lowercase ``text``, split on whitespace and detach ``. , ! ? ' "`` as tokens."""
    return _TOKEN_RE.findall(text.lower())


def entity_token(text: str) -> str:
    """Lowercase a (possibly multi-word) entity and join its words with underscores."""
    return "_".join(text.lower().split())


@dataclass(frozen=True)
class Vocabulary:
    """Bidirectional token/id map whose first four ids are the special tokens."""

    tokens: tuple[str, ...] = SPECIAL_TOKENS
    index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValidationError(f"vocabulary must start with {SPECIAL_TOKENS}, got {self.tokens[:4]}")
        index = {token: i for i, token in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(token) for token in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, skipping pad/bos and stopping at the end token."""

        words: list[str] = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return words

    def extend(self, tokens: Iterable[str]) -> Vocabulary:
        """Append unseen tokens in sorted order; existing ids are unchanged."""

        fresh = sorted(set(tokens) - set(self.index))
        return self if not fresh else Vocabulary(self.tokens + tuple(fresh))

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> Vocabulary:
        return cls(tuple(tokens))


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    conv: Path
    regions: Path
    labels: tuple[str, ...]


@dataclass(frozen=True)
class AlbumRecord:
    """One album: its images (in story order) and reference stories."""

    album_id: str
    images: tuple[ImageEntry, ...]
    references: tuple[tuple[str, ...], ...]

    @property
    def n_images(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class AlbumFeatures:
    conv: np.ndarray
    regions: np.ndarray


def parse_manifest(path: str | Path, *, n_images: int = 5, check_files: bool = True) -> list[AlbumRecord]:
    """Load and validate a JSON Lines album manifest.

    Feature paths resolve relative to the manifest's directory. Loading is
    all-or-nothing: the first invalid album aborts the whole load.

    Parameters
    ----------
    path : str | Path
        Manifest location.
    n_images : int, optional
        Required number of images (and sentences per reference) per album.
    check_files : bool, optional
        Require every referenced feature file to exist.

    Returns
    -------
    list[AlbumRecord]
        Albums in file order.

    Raises
    ------
    ParseError
        If a line is not a JSON object.
    ValidationError
        If an album is malformed; the message names the line, album id and field.
    """

    manifest = Path(path)
    base = manifest.parent
    records: list[AlbumRecord] = []
    seen: set[str] = set()
    with manifest.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{manifest}:{lineno}: malformed JSON ({exc.msg})") from exc
            record = _parse_album(raw, base, n_images, check_files, f"{manifest}:{lineno}")
            if record.album_id in seen:
                raise ValidationError(f"{manifest}:{lineno}: album {record.album_id!r}: duplicate album_id")
            seen.add(record.album_id)
            records.append(record)
    logger.info("Loaded %d albums from %s", len(records), manifest)
    return records


def manifest_line(record: AlbumRecord, base: Path) -> str:
    """Serialize ``record`` as one manifest line with paths relative to ``base``."""

    payload = {
        "album_id": record.album_id,
        "images": [
            {
                "image_id": image.image_id,
                "conv": Path(image.conv).relative_to(base).as_posix(),
                "regions": Path(image.regions).relative_to(base).as_posix(),
                "labels": list(image.labels),
            }
            for image in record.images
        ],
        "references": [list(reference) for reference in record.references],
    }
    return json.dumps(payload, ensure_ascii=False)


def _parse_album(raw: Any, base: Path, n_images: int, check_files: bool, where: str) -> AlbumRecord:
    if not isinstance(raw, dict):
        raise ParseError(f"{where}: expected a JSON object, got {type(raw).__name__}")
    album_id = raw.get("album_id")
    if not isinstance(album_id, str) or not album_id:
        raise ValidationError(f"{where}: field 'album_id': expected a non-empty string")

    def fail(field_name: str, message: str) -> ValidationError:
        return ValidationError(f"{where}: album {album_id!r}: field {field_name!r}: {message}")

    images_raw = raw.get("images")
    if not isinstance(images_raw, list):
        raise fail("images", "expected a list")
    if len(images_raw) != n_images:
        raise fail("images", f"expected {n_images} images, got {len(images_raw)}")

    images: list[ImageEntry] = []
    for position, image in enumerate(images_raw):
        name = f"images[{position}]"
        if not isinstance(image, dict):
            raise fail(name, "expected an object")
        image_id = image.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise fail(f"{name}.image_id", "expected a non-empty string")
        paths: dict[str, Path] = {}
        for key in ("conv", "regions"):
            value = image.get(key)
            if not isinstance(value, str) or not value:
                raise fail(f"{name}.{key}", "expected a path string")
            resolved = base / value
            if check_files and not resolved.is_file():
                raise fail(f"{name}.{key}", f"missing file {resolved}")
            paths[key] = resolved
        labels = image.get("labels", [])
        if not isinstance(labels, list) or not all(isinstance(label, str) for label in labels):
            raise fail(f"{name}.labels", "expected a list of strings")
        images.append(ImageEntry(image_id, paths["conv"], paths["regions"], tuple(labels)))

    references_raw = raw.get("references")
    if not isinstance(references_raw, list) or not references_raw:
        raise fail("references", "expected at least one reference story")
    references: list[tuple[str, ...]] = []
    for position, story in enumerate(references_raw):
        if not isinstance(story, list) or not all(isinstance(s, str) for s in story):
            raise fail(f"references[{position}]", "expected a list of sentences")
        if len(story) != n_images:
            raise fail(f"references[{position}]", f"expected {n_images} sentences, got {len(story)}")
        references.append(tuple(story))
    return AlbumRecord(album_id, tuple(images), tuple(references))


def write_feature_file(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as a KAGF file (little-endian float32, row-major)."""

    data = np.ascontiguousarray(array, dtype="<f4")
    if data.ndim < 1 or data.ndim > 255 or 0 in data.shape:
        raise FormatError(f"KAGF needs 1..255 non-empty axes, got shape {data.shape}")
    header = _KAGF_HEADER.pack(_KAGF_MAGIC, _KAGF_VERSION, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + data.tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    """Read a KAGF feature file.

    Raises
    ------
    FormatError
        On a bad magic or version, a zero or overflowing extent, a truncated
        payload (naming expected and actual byte counts) or trailing bytes.
    """

    source = Path(path)
    blob = source.read_bytes()
    if len(blob) < _KAGF_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, rank = _KAGF_HEADER.unpack_from(blob, 0)
    if magic != _KAGF_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {_KAGF_MAGIC!r}")
    if version != _KAGF_VERSION:
        raise FormatError(f"{source}: unsupported KAGF version {version}")
    offset = _KAGF_HEADER.size
    if rank < 1 or len(blob) < offset + 4 * rank:
        raise FormatError(f"{source}: truncated extents at offset {offset} (rank {rank})")
    extents = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    if 0 in extents:
        raise FormatError(f"{source}: zero extent in shape {extents}")
    count = 1
    for extent in extents:
        count *= extent
        if count > _MAX_ELEMENTS:
            raise FormatError(f"{source}: extents {extents} overflow the element limit")
    expected = 4 * count
    actual = len(blob) - offset
    if actual < expected:
        raise FormatError(f"{source}: truncated payload at offset {offset}: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise FormatError(f"{source}: {actual - expected} trailing bytes after payload")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(extents).copy()


def load_album_features(record: AlbumRecord) -> AlbumFeatures:
    """Read and stack the conv grids (``N x h x w x F``) and regions (``N x M x F``) of an album."""

    conv = [read_feature_file(image.conv) for image in record.images]
    regions = [read_feature_file(image.regions) for image in record.images]
    for name, arrays, rank in (("conv", conv, 3), ("regions", regions, 2)):
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1 or arrays[0].ndim != rank:
            raise DimensionError(f"album {record.album_id!r}: {name} features have shapes {sorted(shapes)}")
    if conv[0].shape[-1] != regions[0].shape[-1]:
        raise DimensionError(
            f"album {record.album_id!r}: conv width {conv[0].shape[-1]} differs from region width "
            f"{regions[0].shape[-1]}"
        )
    return AlbumFeatures(np.stack(conv), np.stack(regions))


def project_feature(x: Tensor, params: Linear) -> Tensor:
    """Project the trailing channel axis of ``x`` to the model width."""

    if x.shape[-1] != params.in_features:
        raise DimensionError(f"project_feature: channel width {x.shape[-1]} does not match {params.weight.shape}")
    return params(x)


def build_vocabulary(albums: Iterable[AlbumRecord], min_count: int) -> Vocabulary:
    """Keep reference tokens seen more than ``min_count`` times.

    Ids follow the special tokens, ordered by descending count and then
    lexicographically, so the result does not depend on album order.
    """

    if min_count < 0:
        raise ValidationError(f"min_count must be non-negative, got {min_count}")
    counts: Counter[str] = Counter()
    for album in albums:
        for story in album.references:
            for sentence in story:
                counts.update(tokenize(sentence))
    kept = sorted((token for token, n in counts.items() if n > min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(t for t in kept if t not in SPECIAL_TOKENS))
