"""EMB1 embedding files.

Layout (all little-endian)::

    bytes 0-3    b"EMB1"
    bytes 4-7    uint32 row count n
    bytes 8-11   uint32 dim d
    bytes 12-    n*d float32, row-major

Readers promote to float64.
"""

from __future__ import annotations

import os
import struct
import threading
from pathlib import Path

import numpy as np

from .core import EmbeddingRef
from .errors import FormatError, TruncationError

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


def encode_embeddings(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FormatError("embedding matrix has non-finite entries")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + payload


def decode_embeddings(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for EMB1 header ({len(blob)} bytes)")
    magic, n, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = n * d * 4
    actual = len(blob) - _HEADER.size
    if actual < expected:
        raise TruncationError(expected, actual)
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size)
    return data.astype(np.float64).reshape(n, d)


def write_embeddings(path: str | os.PathLike, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_embeddings(matrix))


def read_embeddings(path: str | os.PathLike) -> np.ndarray:
    return decode_embeddings(Path(path).read_bytes())


def read_header(path: str | os.PathLike) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: too short for EMB1 header")
    magic, n, d = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    return n, d


class EmbeddingStore:
    """Resolves :class:`EmbeddingRef` rows, either from a directory or from memory."""

    def __init__(self, root: str | os.PathLike | None = None, arrays: dict[str, np.ndarray] | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = dict(arrays or {})
        self._lock = threading.Lock()

    def matrix(self, name: str) -> np.ndarray:
        with self._lock:
            m = self._cache.get(name)
            if m is None:
                if self.root is None:
                    raise FileNotFoundError(name)
                m = read_embeddings(self.root / name)
                m.setflags(write=False)
                self._cache[name] = m
            return m

    def rows(self, ref: EmbeddingRef) -> np.ndarray:
        m = self.matrix(ref.file)
        if ref.end > m.shape[0]:
            raise FormatError(f"{ref.file}: rows [{ref.start}, {ref.end}) out of range for {m.shape[0]} rows")
        return m[ref.start:ref.end]

    def names(self) -> list[str]:
        return sorted(self._cache)

    def dump(self, root: str | os.PathLike) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for name in self.names():
            write_embeddings(root / name, self._cache[name])
