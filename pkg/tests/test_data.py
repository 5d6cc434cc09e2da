"""Tests for manifests, KAGF feature files and vocabulary construction."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from pdum.kags.data import (
    BOS,
    EOS,
    PAD,
    SPECIAL_TOKENS,
    UNK,
    AlbumRecord,
    ImageEntry,
    Vocabulary,
    build_vocabulary,
    entity_token,
    load_album_features,
    manifest_line,
    parse_manifest,
    project_feature,
    read_feature_file,
    tokenize,
    write_feature_file,
)
from pdum.kags.errors import DimensionError, FormatError, ParseError, ValidationError
from pdum.kags.nn import linear
from pdum.kags.tensor import Tensor


def _album(tmp_path: Path, album_id: str = "a1", n_images: int = 2, width: int = 4) -> dict:
    rng = np.random.default_rng(0)
    images = []
    for n in range(n_images):
        conv = tmp_path / f"{album_id}-{n}.conv.kagf"
        regions = tmp_path / f"{album_id}-{n}.regions.kagf"
        write_feature_file(conv, rng.standard_normal((2, 2, width)))
        write_feature_file(regions, rng.standard_normal((3, width)))
        images.append({"image_id": f"{album_id}-{n}", "conv": conv.name, "regions": regions.name, "labels": ["dog"]})
    story = [f"sentence {n} ." for n in range(n_images)]
    return {"album_id": album_id, "images": images, "references": [story]}


def _write_manifest(tmp_path: Path, *albums: dict) -> Path:
    path = tmp_path / "manifest.jsonl"
    path.write_text("".join(json.dumps(a) + "\n" for a in albums), encoding="utf-8")
    return path


def test_tokenize_lowercases_and_splits_punctuation() -> None:
    """Punctuation becomes standalone tokens."""
    assert tokenize('We went to the Beach, "finally"!') == [
        "we",
        "went",
        "to",
        "the",
        "beach",
        ",",
        '"',
        "finally",
        '"',
        "!",
    ]
    assert tokenize("it's") == ["it", "'", "s"]
    assert entity_token("Hot  Dog") == "hot_dog"


def test_build_vocabulary_counts_above_threshold() -> None:
    """Only tokens seen more than min_count times are kept, by count then name."""
    record = AlbumRecord("x", (), (("a a b", "a a c b c"),))
    vocab = build_vocabulary([record], min_count=1)
    assert vocab.tokens == SPECIAL_TOKENS + ("a", "b", "c")
    strict = build_vocabulary([record], min_count=3)
    assert strict.tokens == SPECIAL_TOKENS + ("a",)
    with pytest.raises(ValidationError):
        build_vocabulary([record], min_count=-1)


def test_build_vocabulary_ignores_album_order() -> None:
    """Permuting the albums gives the same ids."""
    first = AlbumRecord("x", (), (("zebra lion",),))
    second = AlbumRecord("y", (), (("lion tiger",),))
    assert build_vocabulary([first, second], 0) == build_vocabulary([second, first], 0)


def test_vocabulary_encode_decode() -> None:
    """Unknown tokens map to the unknown id; decoding stops at the end token."""
    vocab = Vocabulary.from_list(list(SPECIAL_TOKENS) + ["dog", "runs"])
    assert vocab.encode(["dog", "flies"]) == [4, UNK]
    assert vocab.decode([BOS, 4, PAD, 5, EOS, 4]) == ["dog", "runs"]
    assert "dog" in vocab
    assert len(vocab.extend(["cat", "dog"])) == 7
    with pytest.raises(ValidationError):
        Vocabulary.from_list(["dog"])


def test_feature_file_round_trip_is_bitwise(tmp_path: Path) -> None:
    """Writing then reading returns identical float32 values."""
    values = np.random.default_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "x.kagf"
    write_feature_file(path, values)
    back = read_feature_file(path)
    assert back.dtype == np.float32
    assert back.tobytes() == values.tobytes()
    assert path.read_bytes()[:4] == b"KAGF"


def test_feature_file_corruption_is_located(tmp_path: Path) -> None:
    """Bad magic, truncation and trailing bytes are reported precisely."""
    path = tmp_path / "x.kagf"
    write_feature_file(path, np.ones((2, 3)))
    blob = path.read_bytes()

    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_feature_file(path)

    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="expected 24 bytes, got 20"):
        read_feature_file(path)

    path.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_feature_file(path)

    path.write_bytes(blob[:7] + struct.pack("<2I", 0, 3))
    with pytest.raises(FormatError, match="zero extent"):
        read_feature_file(path)


def test_parse_manifest_resolves_paths(tmp_path: Path) -> None:
    """Feature paths are relative to the manifest; albums keep file order."""
    manifest = _write_manifest(tmp_path, _album(tmp_path, "a1"), _album(tmp_path, "a2"))
    albums = parse_manifest(manifest, n_images=2)
    assert [a.album_id for a in albums] == ["a1", "a2"]
    assert albums[0].images[1].conv == tmp_path / "a1-1.conv.kagf"
    assert albums[0].images[0].labels == ("dog",)
    assert albums[0].references == (("sentence 0 .", "sentence 1 ."),)


def test_parse_manifest_names_the_bad_field(tmp_path: Path) -> None:
    """Errors carry the line, album id and field."""
    album = _album(tmp_path, "a1")
    album["references"] = [["only one"]]
    manifest = _write_manifest(tmp_path, album)
    with pytest.raises(ValidationError, match=r"manifest\.jsonl:1: album 'a1': field 'references\[0\]'"):
        parse_manifest(manifest, n_images=2)


def test_parse_manifest_rejects_wrong_image_count_and_duplicates(tmp_path: Path) -> None:
    """Albums need exactly n_images images and unique ids."""
    manifest = _write_manifest(tmp_path, _album(tmp_path, "a1"))
    with pytest.raises(ValidationError, match="expected 5 images"):
        parse_manifest(manifest, n_images=5)
    manifest = _write_manifest(tmp_path, _album(tmp_path, "a1"), _album(tmp_path, "a1"))
    with pytest.raises(ValidationError, match="duplicate"):
        parse_manifest(manifest, n_images=2)


def test_parse_manifest_missing_files_and_bad_json(tmp_path: Path) -> None:
    """Missing feature files fail unless file checks are off; bad JSON is a parse error."""
    album = _album(tmp_path, "a1")
    album["images"][0]["conv"] = "missing.kagf"
    manifest = _write_manifest(tmp_path, album)
    with pytest.raises(ValidationError, match="missing file"):
        parse_manifest(manifest, n_images=2)
    assert len(parse_manifest(manifest, n_images=2, check_files=False)) == 1

    manifest.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":1:"):
        parse_manifest(manifest, n_images=2)


def test_manifest_line_round_trips(tmp_path: Path) -> None:
    """A serialized record parses back to the same record."""
    manifest = _write_manifest(tmp_path, _album(tmp_path, "a1"))
    (record,) = parse_manifest(manifest, n_images=2)
    manifest.write_text(manifest_line(record, tmp_path) + "\n", encoding="utf-8")
    assert parse_manifest(manifest, n_images=2) == [record]


def test_load_album_features_stacks_images(tmp_path: Path) -> None:
    """Conv grids and regions of all images are stacked."""
    manifest = _write_manifest(tmp_path, _album(tmp_path, "a1", width=6))
    (record,) = parse_manifest(manifest, n_images=2)
    features = load_album_features(record)
    assert features.conv.shape == (2, 2, 2, 6)
    assert features.regions.shape == (2, 3, 6)


def test_load_album_features_rejects_mixed_widths(tmp_path: Path) -> None:
    """Conv and region widths must agree."""
    conv = tmp_path / "c.kagf"
    regions = tmp_path / "r.kagf"
    write_feature_file(conv, np.ones((2, 2, 4)))
    write_feature_file(regions, np.ones((3, 5)))
    record = AlbumRecord("a", (ImageEntry("i", conv, regions, ()),), (("s",),))
    with pytest.raises(DimensionError):
        load_album_features(record)


def test_project_feature_maps_channels() -> None:
    """The trailing channel axis is projected; other axes are kept."""
    p = linear(np.random.default_rng(0), 6, 3)
    assert project_feature(Tensor(np.ones((2, 4, 4, 6))), p).shape == (2, 4, 4, 3)
    with pytest.raises(DimensionError):
        project_feature(Tensor(np.ones((2, 5))), p)
