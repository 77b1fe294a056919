"""Context-conditioned low-rank bilinear similarity model.

An image embedding x is first mapped through an affine transform plus
normalization, xt = (W x + b) / ||W x + b||.  A context embedding is fed
to a single linear layer whose output is reshaped (row-major) to a rank-r
matrix B_c; the similarity of two transformed embeddings under context c
is the dot product of their r-dimensional projections,

    s(i, j | c) = (B_c xt_i) . (B_c xt_j),

which equals xt_i^T (B_c^T B_c) xt_j for a symmetric PSD kernel that is
never materialized on the hot path.  The oddball of a triplet (p, q, r)
is scored by a temperature-scaled softmax over the three pair
similarities, where slot k holds the similarity of the pair that
excludes image k.

Checkpoint format (little-endian, no padding):
    magic "CSCK" | version u32 | d u32 | r u32 | tau f64 | flags u32
    W (d*d f64) | b (d f64) | M (r*d*d f64) | m0 (r*d f64, if flag bit 0)
    JSON trailer (UTF-8, to end of file)
Flags: bit 0 = mapper bias stored, bit 1 = column-major reshape (files
are always written row-major; column-major inputs are canonicalized on
load).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import DEFAULTS
from .embedding_store import EmbeddingStore, l2_normalize
from .errors import (
    CorruptionError,
    DegenerateVectorError,
    FormatError,
    ValidationError,
)

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1
FLAG_MAPPER_BIAS = 1 << 0
FLAG_COLUMN_MAJOR = 1 << 1
_CKPT_HEADER = struct.Struct("<4sIIIdI")

CONTEXT_MODES = ("l2", "cit", "raw")
BASELINE_MODES = ("fm_cosine", "cit_only")


@dataclass(eq=False)
class ModelParams:
    """Trainable state: affine transform (W, b) and context mapper (M, m0)."""

    W: np.ndarray  # (d, d)
    b: np.ndarray  # (d,)
    M: np.ndarray  # (r*d, d)
    m0: np.ndarray  # (r*d,)
    r: int
    tau: float
    d: int
    context_mode: str = "l2"
    mapper_bias: bool = True

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        if not 1 <= self.r <= self.d:
            raise ValidationError(f"rank r={self.r} must satisfy 1 <= r <= d={self.d}")
        if self.tau <= 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValidationError(f"context_mode must be one of {CONTEXT_MODES}")
        shapes = {
            "W": (self.W.shape, (self.d, self.d)),
            "b": (self.b.shape, (self.d,)),
            "M": (self.M.shape, (self.r * self.d, self.d)),
            "m0": (self.m0.shape, (self.r * self.d,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValidationError(f"{name} has shape {got}, expected {want}")
        for name in ("W", "b", "M", "m0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite entries in {name}")

    def copy(self) -> "ModelParams":
        return ModelParams(
            W=self.W.copy(),
            b=self.b.copy(),
            M=self.M.copy(),
            m0=self.m0.copy(),
            r=self.r,
            tau=self.tau,
            d=self.d,
            context_mode=self.context_mode,
            mapper_bias=self.mapper_bias,
        )

    def equals(self, other: "ModelParams") -> bool:
        return (
            (self.r, self.tau, self.d, self.context_mode, self.mapper_bias)
            == (other.r, other.tau, other.d, other.context_mode, other.mapper_bias)
            and np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.M, other.M)
            and np.array_equal(self.m0, other.m0)
        )


@dataclass
class TripletProbabilities:
    """Oddball probabilities for one triplet; probs[k] belongs to oddball k.

    pair_similarities is ordered (s_qr, s_pr, s_pq): slot k carries the
    similarity of the pair that excludes image k.
    """

    probs: np.ndarray
    pair_similarities: np.ndarray


def init_params(
    d: int,
    r: int,
    tau: float,
    seed: int,
    sigma_init: float | None = None,
    context_mode: str = "l2",
    mapper_bias: bool = True,
) -> ModelParams:
    """Identity transform plus a small random context mapper.

    Zero mapper init is a saddle (all similarities vanish, so the mapper
    gradient vanishes too); sigma_init defaults to 1e-2 / sqrt(d).
    """
    if not 1 <= r <= d:
        raise ValidationError(f"rank r={r} must satisfy 1 <= r <= d={d}")
    if sigma_init is None:
        sigma_init = 1e-2 / np.sqrt(d)
    rng = np.random.default_rng(seed)
    M = sigma_init * rng.standard_normal((r * d, d))
    m0 = sigma_init * rng.standard_normal(r * d) if mapper_bias else np.zeros(r * d)
    return ModelParams(
        W=np.eye(d),
        b=np.zeros(d),
        M=M,
        m0=m0,
        r=r,
        tau=tau,
        d=d,
        context_mode=context_mode,
        mapper_bias=mapper_bias,
    )


def cit_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Affine transform followed by normalization: (Wx + b) / ||Wx + b||."""
    z = params.W @ np.asarray(x, dtype=np.float64) + params.b
    return l2_normalize(z)


def context_matrix(params: ModelParams, x_c: np.ndarray) -> np.ndarray:
    """Map a context embedding to its (r, d) projection matrix B_c."""
    u = _context_input(params, np.asarray(x_c, dtype=np.float64))
    vec = params.M @ u + params.m0
    return vec.reshape(params.r, params.d)


def _context_input(params: ModelParams, x_c: np.ndarray) -> np.ndarray:
    if params.context_mode == "l2":
        return l2_normalize(x_c)
    if params.context_mode == "cit":
        return cit_forward(params, x_c)
    return x_c  # raw


def similarity(B_c: np.ndarray, xt_i: np.ndarray, xt_j: np.ndarray) -> float:
    """Bilinear similarity via the factored form (B xt_i) . (B xt_j)."""
    return float((B_c @ xt_i) @ (B_c @ xt_j))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax (max subtraction) over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def triplet_probs(
    params: ModelParams,
    x_p: np.ndarray,
    x_q: np.ndarray,
    x_r: np.ndarray,
    x_c: np.ndarray,
) -> TripletProbabilities:
    """Oddball probabilities for a triplet (p, q, r) under context c."""
    xt_p = cit_forward(params, x_p)
    xt_q = cit_forward(params, x_q)
    xt_r = cit_forward(params, x_r)
    B = context_matrix(params, x_c)
    sims = np.array(
        [
            similarity(B, xt_q, xt_r),
            similarity(B, xt_p, xt_r),
            similarity(B, xt_p, xt_q),
        ]
    )
    return TripletProbabilities(probs=softmax(sims / params.tau), pair_similarities=sims)


def predict_oddball(probs) -> int:
    """Argmax oddball position; ties broken by lowest index."""
    values = probs.probs if isinstance(probs, TripletProbabilities) else np.asarray(probs)
    return int(np.argmax(values))


def baseline_predict(
    store: EmbeddingStore,
    triplet,
    mode: str,
    params: ModelParams | None = None,
) -> int:
    """Context-free oddball prediction.

    fm_cosine scores pairs by cosine of the raw (L2-normalized) embeddings;
    cit_only applies the learned transform first.  Either way the oddball
    is the image excluded from the most similar pair.
    """
    if mode not in BASELINE_MODES:
        raise ValidationError(f"mode must be one of {BASELINE_MODES}")
    xs = [store.vector(i) for i in triplet.image_ids]
    if mode == "fm_cosine":
        xt = [l2_normalize(x) for x in xs]
    else:
        if params is None:
            raise ValidationError("cit_only baseline requires model params")
        xt = [cit_forward(params, x) for x in xs]
    sims = np.array([xt[1] @ xt[2], xt[0] @ xt[2], xt[0] @ xt[1]])
    return int(np.argmax(sims))


# ----------------------------------------------------------------------
# Batched inference (hot path for training and evaluation)


def batch_cit_forward(params: ModelParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise CIT transform of an (n, d) block; returns (unit rows, norms)."""
    Z = X @ params.W.T + params.b
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms <= DEFAULTS.eps_norm):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"degenerate transformed embedding at row {bad}")
    return Z / norms[:, None], norms


def batch_context_input(params: ModelParams, Xc: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Context embeddings as mapper inputs, per the configured context mode."""
    if params.context_mode == "raw":
        return Xc, None
    if params.context_mode == "cit":
        return batch_cit_forward(params, Xc)
    norms = np.linalg.norm(Xc, axis=1)
    if np.any(norms <= DEFAULTS.eps_norm):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"degenerate context embedding at row {bad}")
    return Xc / norms[:, None], norms


def batch_context_matrices(params: ModelParams, Xc: np.ndarray) -> np.ndarray:
    """(n, d) context embeddings -> (n, r, d) projection matrices."""
    U, _ = batch_context_input(params, Xc)
    vec = U @ params.M.T + params.m0
    return vec.reshape(-1, params.r, params.d)


def batch_pair_similarities(
    params: ModelParams,
    Xp: np.ndarray,
    Xq: np.ndarray,
    Xr: np.ndarray,
    Xc: np.ndarray | None,
    kind: str = "cs",
) -> np.ndarray:
    """Pair similarities (n, 3) in oddball-slot order (s_qr, s_pr, s_pq).

    kind "cs" applies the context kernel; "cit" scores by dot products of
    the transformed embeddings (the context-insensitive model).
    """
    Tp, _ = batch_cit_forward(params, Xp)
    Tq, _ = batch_cit_forward(params, Xq)
    Tr, _ = batch_cit_forward(params, Xr)
    if kind == "cit":
        Pp, Pq, Pr = Tp, Tq, Tr
    else:
        if Xc is None:
            raise ValidationError("context embeddings required for the cs model")
        B = batch_context_matrices(params, Xc)
        Pp = np.einsum("nrd,nd->nr", B, Tp)
        Pq = np.einsum("nrd,nd->nr", B, Tq)
        Pr = np.einsum("nrd,nd->nr", B, Tr)
    return np.stack(
        [
            np.sum(Pq * Pr, axis=1),
            np.sum(Pp * Pr, axis=1),
            np.sum(Pp * Pq, axis=1),
        ],
        axis=1,
    )


def batch_triplet_probs(
    params: ModelParams,
    Xp: np.ndarray,
    Xq: np.ndarray,
    Xr: np.ndarray,
    Xc: np.ndarray | None,
    kind: str = "cs",
) -> np.ndarray:
    """Oddball probabilities (n, 3) for a block of triplets."""
    sims = batch_pair_similarities(params, Xp, Xq, Xr, Xc, kind=kind)
    return softmax(sims / params.tau)


# ----------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: ModelParams, path, metadata: dict | None = None) -> None:
    """Write params plus a JSON metadata trailer."""
    meta = dict(metadata or {})
    meta.setdefault("context_mode", params.context_mode)
    flags = 0
    if params.mapper_bias:
        flags |= FLAG_MAPPER_BIAS
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.d, params.r, params.tau, flags)
        )
        fh.write(np.ascontiguousarray(params.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.b, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.M, dtype="<f8").tobytes())
        if params.mapper_bias:
            fh.write(np.ascontiguousarray(params.m0, dtype="<f8").tobytes())
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, metadata)."""
    with open(path, "rb") as fh:
        header = fh.read(_CKPT_HEADER.size)
        if len(header) < _CKPT_HEADER.size:
            raise CorruptionError(f"{path}: file shorter than header")
        magic, version, d, r, tau, flags = _CKPT_HEADER.unpack(header)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        mapper_bias = bool(flags & FLAG_MAPPER_BIAS)
        sizes = [d * d, d, r * d * d]
        if mapper_bias:
            sizes.append(r * d)
        blocks = []
        for size in sizes:
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise CorruptionError(f"{path}: truncated parameter block")
            blocks.append(np.frombuffer(raw, dtype="<f8").copy())
        trailer = fh.read()
    metadata = json.loads(trailer.decode("utf-8")) if trailer else {}
    W = blocks[0].reshape(d, d)
    b = blocks[1]
    M = blocks[2].reshape(r * d, d)
    m0 = blocks[3] if mapper_bias else np.zeros(r * d)
    if flags & FLAG_COLUMN_MAJOR:
        # canonicalize: row a*d+b of a row-major vec(B) is row b*r+a column-major
        inv = np.arange(r * d).reshape(r, d).T.reshape(-1).argsort()
        M = M[inv]
        m0 = m0[inv]
    params = ModelParams(
        W=W,
        b=b,
        M=M,
        m0=m0,
        r=r,
        tau=tau,
        d=d,
        context_mode=metadata.get("context_mode", "l2"),
        mapper_bias=mapper_bias,
    )
    return params, metadata
