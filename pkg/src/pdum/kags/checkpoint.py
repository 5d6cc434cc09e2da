"""KAGC checkpoint container: JSON metadata plus named float32 arrays, CRC-protected.

Layout (little-endian)::

    b"KAGC" | u16 version | u32 meta length | meta (UTF-8 JSON)
    repeated: u16 name length | name (UTF-8) | u8 rank | rank x u32 extents | float32 payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

__all__ = ["encode_checkpoint", "decode_checkpoint", "write_checkpoint", "read_checkpoint"]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

_MAGIC = b"KAGC"
_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_CRC = struct.Struct("<I")


def encode_checkpoint(meta: Mapping[str, Any], records: Mapping[str, np.ndarray]) -> bytes:
    """Serialize ``meta`` and ``records`` (in iteration order) to KAGC bytes.

    Arrays are stored as little-endian float32; metadata keys are sorted so
    equal inputs always give equal bytes.
    """

    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(_MAGIC, _VERSION, len(meta_bytes)), meta_bytes]
    for name, array in records.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"record name too long ({len(encoded)} bytes): {name[:40]}...")
        values = np.ascontiguousarray(array, dtype="<f4")
        if values.ndim > 0xFF:
            raise FormatError(f"record {name!r}: rank {values.ndim} exceeds 255")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, blob: bytes, end: int, source: str) -> None:
        self.blob = blob
        self.end = end
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > self.end:
            raise FormatError(
                f"{self.source}: truncated {what} at offset {self.offset}: "
                f"needs {size} bytes, {self.end - self.offset} left"
            )
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse KAGC bytes into ``(meta, records)``.

    The structure is parsed before the checksum is verified, so truncation is
    reported with the offset where data ran out.

    Raises
    ------
    FormatError
        On a bad magic, unsupported version, truncation, malformed metadata or
        checksum mismatch.
    """

    if len(blob) < _PREFIX.size + _CRC.size:
        raise FormatError(f"{source}: truncated header at offset 0: {len(blob)} bytes")
    reader = _Reader(blob, len(blob) - _CRC.size, source)
    magic, version, meta_len = _PREFIX.unpack(reader.take(_PREFIX.size, "header"))
    if magic != _MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} (expected {_VERSION})")
    meta_at = reader.offset
    try:
        meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: malformed metadata at offset {meta_at}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{source}: metadata at offset {meta_at} is not a JSON object")

    records: dict[str, np.ndarray] = {}
    while reader.offset < reader.end:
        at = reader.offset
        (name_len,) = _NAME_LEN.unpack(reader.take(_NAME_LEN.size, "record name length"))
        try:
            name = reader.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: record name at offset {at} is not UTF-8") from exc
        (rank,) = _RANK.unpack(reader.take(_RANK.size, f"record {name!r} rank"))
        extents = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"record {name!r} extents"))
        count = int(np.prod(extents, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * count, f"record {name!r} payload")
        if name in records:
            raise FormatError(f"{source}: duplicate record {name!r} at offset {at}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)

    (stored,) = _CRC.unpack(blob[reader.end :])
    actual = zlib.crc32(blob[: reader.end])
    if stored != actual:
        raise FormatError(
            f"{source}: checksum mismatch at offset {reader.end}: stored {stored:#010x}, computed {actual:#010x}"
        )
    return meta, records


def write_checkpoint(path: str | Path, meta: Mapping[str, Any], records: Mapping[str, np.ndarray]) -> Path:
    """Write a checkpoint atomically (temporary file, then rename)."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(meta, records)
    partial = target.with_name(target.name + ".partial")
    partial.write_bytes(blob)
    os.replace(partial, target)
    logger.info("Wrote checkpoint %s (%d records, %d bytes)", target, len(records), len(blob))
    return target


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    source = Path(path)
    return decode_checkpoint(source.read_bytes(), str(source))
