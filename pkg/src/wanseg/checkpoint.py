"""Flat binary checkpoints.

Layout: the 8 magic bytes ``WANCKPT1``, a uint64 record count, then per record
a uint64 name length, the UTF-8 name, a uint64 rank, ``rank`` uint64 extents
and the float32 values in C order. All integers are little-endian.
Records are written in sorted name order so files are canonical.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"WANCKPT1"
_U64 = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U64.pack(len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(arr.ndim))
        for n in arr.shape:
            buf.write(_U64.pack(n))
        buf.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContractError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return _U64.unpack(take(8))[0]

    if bytes(take(len(MAGIC))) != MAGIC:
        raise ContractError("not a WANCKPT1 checkpoint")
    state: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        name = bytes(take(u64())).decode("utf-8")
        if name in state:
            raise ContractError(f"duplicate record {name!r}")
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)
    if pos != len(view):
        raise ContractError("trailing bytes after last record")
    return state


def blob_hash(blob: bytes) -> str:
    """Content hash computed the way git hashes a blob object."""
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def save(path, state: dict[str, np.ndarray]) -> str:
    """Write ``state`` and return its content hash."""
    blob = dumps(state)
    Path(path).write_bytes(blob)
    return blob_hash(blob)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return blob_hash(Path(path).read_bytes())
