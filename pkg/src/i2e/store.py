"""Binary vector store used for image features, text features, and entity embeddings.

File layout (little-endian): magic ``I2EV1``, u32 dim, u64 count, then per
entry a u16 id byte-length, the UTF-8 id, and dim float32 coordinates.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"I2EV1"


class StoreFormatError(Exception):
    """Raised when a vector store file cannot be parsed."""


class VectorStore:
    """In-memory map from string key to a fixed-dimension float32 vector."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def keys(self):
        return self._vectors.keys()

    def items(self):
        return self._vectors.items()

    def put(self, key: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"vector for {key!r} has length {vec.shape[0]}, store dim is {self.dim}")
        if key in self._vectors:
            raise ValueError(f"duplicate key {key!r}")
        self._vectors[key] = vec

    def get(self, key: str) -> np.ndarray:
        if key not in self._vectors:
            raise KeyError(f"no vector stored for key {key!r}")
        return self._vectors[key]


def write_store(store: VectorStore, path: str | Path) -> None:
    """Serialize a store; entries are written in insertion order."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", store.dim))
        fh.write(struct.pack("<Q", len(store)))
        for key, vec in store.items():
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"key too long to serialize: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.astype("<f4").tobytes())


def read_store(path: str | Path) -> VectorStore:
    """Load a store file, validating magic, header, and per-entry lengths."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise StoreFormatError(f"{path}: file too short for header")
    if data[: len(MAGIC)] != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    off = len(MAGIC)
    (dim,) = struct.unpack_from("<I", data, off)
    off += 4
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    if dim == 0:
        raise StoreFormatError(f"{path}: header dim is zero")
    store = VectorStore(dim)
    row_bytes = 4 * dim
    for i in range(count):
        if off + 2 > len(data):
            raise StoreFormatError(f"{path}: truncated at entry {i} (id length)")
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + id_len + row_bytes > len(data):
            raise StoreFormatError(f"{path}: truncated at entry {i} (expected {dim} coordinates)")
        key = data[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += row_bytes
        try:
            store.put(key, vec)
        except ValueError as exc:
            raise StoreFormatError(f"{path}: entry {i}: {exc}") from exc
    if off != len(data):
        raise StoreFormatError(f"{path}: {len(data) - off} trailing bytes after entry {count - 1}")
    return store
