"""Plottable artifacts: context-conditioned RSMs and 2-D PCA coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULTS
from .embedding_store import EmbeddingStore
from .errors import ValidationError
from .model import ModelParams, batch_cit_forward, context_matrix

RSM_MODES = ("context_sensitive", "cit_only")


@dataclass
class RSM:
    """Pairwise similarity values over an ordered reference image set."""

    image_ids: list[int]
    values: np.ndarray  # (n, n)


@dataclass
class ProjectionCoords:
    coords: np.ndarray  # (n, k) principal-component scores
    explained_variance: np.ndarray  # (k,) ratios, nonincreasing
    image_ids: list[int] | None = None


def compute_rsm(
    params: ModelParams,
    context_id: int,
    reference_ids: list[int],
    store: EmbeddingStore,
    mode: str = "context_sensitive",
) -> RSM:
    """Similarity matrix over a reference set, with or without the context kernel."""
    if mode not in RSM_MODES:
        raise ValidationError(f"mode must be one of {RSM_MODES}")
    if not reference_ids:
        raise ValidationError("reference set must be nonempty")
    X = store.gather(reference_ids)
    Xt, _ = batch_cit_forward(params, X)
    if mode == "cit_only":
        values = Xt @ Xt.T
    else:
        B = context_matrix(params, store.vector(context_id))
        P = Xt @ B.T
        values = P @ P.T
    return RSM(image_ids=[int(i) for i in reference_ids], values=values)


def project_context_embeddings(
    params: ModelParams,
    context_id: int,
    image_ids: list[int],
    store: EmbeddingStore,
) -> np.ndarray:
    """Context-projected representations B_c xt_i for a set of images."""
    X = store.gather(image_ids)
    Xt, _ = batch_cit_forward(params, X)
    B = context_matrix(params, store.vector(context_id))
    return Xt @ B.T


def pca_project(vectors, k: int = 2, image_ids: list[int] | None = None) -> ProjectionCoords:
    """Top-k PCA scores with explained-variance ratios.

    Mean-centers, eigendecomposes the covariance, and fixes each
    component's sign so its largest-magnitude loading is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("vectors must form a 2-d array")
    n, m = X.shape
    if k < 1:
        raise ValidationError("k must be >= 1")
    if n < k:
        raise ValidationError(f"need at least k={k} vectors, got {n}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    total_var = float(np.trace(cov))
    if total_var <= DEFAULTS.eps_variance:
        raise ValidationError("zero variance: PCA is degenerate")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    ratios = np.maximum(eigvals[order], 0.0) / total_var
    return ProjectionCoords(
        coords=centered @ components,
        explained_variance=ratios,
        image_ids=image_ids,
    )
