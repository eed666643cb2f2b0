"""QSPT tensor archives.

Layout (all integers little-endian)::

    b"QSPT" | u16 version=1 | u32 count
    per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims
                | float32 payload, row-major

Used for both weight tensors and calibration activations.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["ArchiveError", "MAGIC", "VERSION", "dumps", "loads", "save", "load"]

MAGIC = b"QSPT"
VERSION = 1


class ArchiveError(ValueError):
    """Malformed or truncated QSPT data."""


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {len(raw_name)} bytes")
        if arr.ndim > 0xFF:
            raise ArchiveError(f"tensor rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(view):
            raise ArchiveError(f"truncated archive: need {nbytes} bytes at offset {pos}")
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("bad magic, not a QSPT archive")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ArchiveError(f"unsupported QSPT version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def save(path, tensors: dict) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
