"""NTF: a minimal named-tensor binary container.

Layout (all integers little-endian)::

    b"NTF1" | u32 count | count x ( u16 name_len | name (UTF-8) | u8 rank |
                                    rank x u64 extent | prod(extents) x f32 )
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTF1"
_F32 = np.dtype("<f4")


class NTFError(ValueError):
    """Malformed or truncated NTF data."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not 1 <= arr.ndim <= 4:
            raise ValueError(f"tensor {name!r} has rank {arr.ndim}; NTF stores ranks 1-4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise NTFError(f"truncated file: expected {n} bytes for {what}, {len(view) - pos} left", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise NTFError("bad magic, not an NTF1 file", 0)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise NTFError("tensor name is not valid UTF-8", start + 2) from exc
        if name in out:
            raise NTFError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if not 1 <= rank <= 4:
            raise NTFError(f"tensor {name!r} has unsupported rank {rank}", pos - 1)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        size = 1
        for d in shape:
            size *= d
        if 4 * size > len(view) - pos:
            raise NTFError(f"truncated payload for tensor {name!r} with shape {shape}", pos)
        arr = np.frombuffer(take(4 * size, "payload"), dtype=_F32).reshape(shape)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise NTFError(f"{len(view) - pos} trailing bytes after last tensor", pos)
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically via a temporary sibling file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
