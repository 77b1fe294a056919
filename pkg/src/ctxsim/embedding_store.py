"""Fixed-dimension embedding vectors keyed by 64-bit image ID.

File format (little-endian, no padding):
    magic "CSEM" (4 bytes) | version u32 (=1) | count u32 | dim u32
    count x id u64
    count x dim float32, row-major

Components are stored as float32 on disk; callers that do math pull
float64 copies via :meth:`EmbeddingStore.vector` / :meth:`gather`.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import DEFAULTS
from .errors import (
    CorruptionError,
    DegenerateVectorError,
    FormatError,
    MissingEmbeddingError,
    ValidationError,
)

MAGIC = b"CSEM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class EmbeddingStore:
    """Immutable map from image ID to a d-dimensional float32 vector."""

    def __init__(self, ids, vectors):
        ids = np.asarray(ids, dtype=np.uint64)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-d, got shape {vectors.shape}")
        if ids.ndim != 1 or ids.shape[0] != vectors.shape[0]:
            raise ValidationError(
                f"ids/vectors count mismatch: {ids.shape[0]} ids, {vectors.shape[0]} rows"
            )
        if vectors.shape[1] < 1:
            raise ValidationError("embedding dimension must be positive")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("duplicate image IDs in store")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("non-finite embedding component")
        self.ids = ids
        self.vectors = vectors
        self._index = {int(i): k for k, i in enumerate(ids)}

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, image_id: int) -> bool:
        return int(image_id) in self._index

    def row(self, image_id: int) -> int:
        try:
            return self._index[int(image_id)]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for image ID {image_id}") from None

    def vector(self, image_id: int) -> np.ndarray:
        """Return the embedding for one ID as a float64 copy."""
        return self.vectors[self.row(image_id)].astype(np.float64)

    def rows(self, image_ids) -> np.ndarray:
        """Map a sequence of IDs to row indices (validating presence)."""
        return np.array([self.row(i) for i in image_ids], dtype=np.intp)

    def gather(self, image_ids) -> np.ndarray:
        """Stack embeddings for a sequence of IDs as an (n, d) float64 array."""
        return self.vectors[self.rows(image_ids)].astype(np.float64)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingStore)
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
        )


def write_embeddings(store: EmbeddingStore, path) -> None:
    """Serialize a store; ``load_embeddings(write_embeddings(s)) == s``."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, store.count, store.dim))
        fh.write(np.ascontiguousarray(store.ids, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingStore:
    """Read a store written by :func:`write_embeddings`."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise CorruptionError(f"{path}: file shorter than header")
        magic, version, count, dim = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dim < 1:
            raise CorruptionError(f"{path}: non-positive dim {dim} in header")
        id_bytes = fh.read(8 * count)
        if len(id_bytes) != 8 * count:
            raise CorruptionError(f"{path}: truncated ID block")
        vec_bytes = fh.read(4 * count * dim)
        if len(vec_bytes) != 4 * count * dim:
            raise CorruptionError(f"{path}: truncated vector block")
        if fh.read(1):
            raise CorruptionError(f"{path}: trailing bytes after payload")
    ids = np.frombuffer(id_bytes, dtype="<u8")
    vectors = np.frombuffer(vec_bytes, dtype="<f4").reshape(count, dim)
    return EmbeddingStore(ids, vectors)


def l2_normalize(v: np.ndarray, eps: float = DEFAULTS.eps_norm) -> np.ndarray:
    """Return v / ||v||; raises if the norm is at or below ``eps``."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= eps:
        raise DegenerateVectorError(f"vector norm {norm:g} <= {eps:g}")
    return v / norm
