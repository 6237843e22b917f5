"""The ``STGT`` flat binary tensor format.

Layout: magic ``b"STGT"``, u32 version, u32 rank, ``rank`` u64 extents, then the
row-major payload as little-endian float64. All integers are little-endian.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"STGT"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def dumps(array) -> bytes:
    arr = np.array(array, dtype="<f8", order="C", copy=None)
    head = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + extents + arr.tobytes(order="C")


def loads(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise LoadError(f"{source}: truncated STGT header")
    magic, version, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise LoadError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise LoadError(f"{source}: unsupported STGT version {version}")
    off = _HEADER.size
    if len(blob) < off + 8 * rank:
        raise LoadError(f"{source}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - off != 8 * count:
        raise LoadError(
            f"{source}: payload has {len(blob) - off} bytes, expected {8 * count} for shape {shape}"
        )
    return np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path: str | os.PathLike, array) -> None:
    atomic_write_bytes(path, dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    return loads(blob, str(path))


def read_stream(fh: io.BufferedIOBase, source: str) -> np.ndarray:
    return loads(fh.read(), source)
