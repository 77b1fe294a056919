"""Ground-truth generators for verifying the pipeline without real data.

Embeddings live near cluster centroids (orthonormal directions), classes
equal cluster IDs, and a planted model maps each cluster's centroid to a
projection matrix emphasizing a cluster-specific coordinate subset, so
the oddball distribution genuinely shifts with the context image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ContextTriplet
from .embedding_store import EmbeddingStore
from .errors import ValidationError
from .model import ModelParams, batch_triplet_probs
from .training import gather_triplets

# scale of the planted projection rows; larger values sharpen the truth's
# oddball distribution and raise the attainable accuracy ceiling
_B_GAIN = 4.0
# row scale of the constant full-rank kernel used by context-free truths
_B_GAIN_CF = 1.6
# scale of the Gaussian perturbation of the truth's affine transform
_W_NOISE = 0.4


@dataclass(frozen=True)
class SyntheticSpec:
    d: int
    r_true: int
    n_images: int
    n_clusters: int
    cluster_spread: float
    n_trials: int
    n_participants: int
    seed: int
    context_free: bool = False

    def __post_init__(self):
        if min(self.d, self.r_true, self.n_images, self.n_clusters) < 1:
            raise ValidationError("all counts must be positive")
        if min(self.n_trials, self.n_participants) < 1:
            raise ValidationError("all counts must be positive")
        if self.n_clusters > self.n_images:
            raise ValidationError("n_clusters must not exceed n_images")
        if self.n_clusters > self.d:
            raise ValidationError("orthonormal centroids require n_clusters <= d")
        if self.r_true > self.d:
            raise ValidationError("r_true must not exceed d")
        if self.cluster_spread < 0:
            raise ValidationError("cluster_spread must be nonnegative")


def _cluster_centroids(spec: SyntheticSpec) -> np.ndarray:
    """(K, d) orthonormal cluster directions, deterministic in the seed."""
    rng = np.random.default_rng([spec.seed, 0])
    raw = rng.standard_normal((spec.d, spec.n_clusters))
    q, _ = np.linalg.qr(raw)
    return q[:, : spec.n_clusters].T


def gen_ground_truth(spec: SyntheticSpec) -> ModelParams:
    """Plant a model whose kernel emphasizes cluster-specific coordinates.

    The mapper is built so a context near centroid k yields B_c close to
    that cluster's target matrix (gain-scaled rows of the identity on a
    random coordinate subset).  With context_free=True the mapper weight
    is zero and every context produces the same constant matrix, a scaled
    full-rank identity; that kernel scores pairs by the plain cosine of
    the transformed embeddings, so a context-insensitive learner can
    represent the truth's decision rule exactly and any trained gain of
    the context model over it is spurious.
    """
    rng = np.random.default_rng([spec.seed, 1])
    d, r = spec.d, spec.r_true
    W = np.eye(d) + (_W_NOISE / np.sqrt(d)) * rng.standard_normal((d, d))
    b = (0.1 / np.sqrt(d)) * rng.standard_normal(d)

    if spec.context_free:
        M = np.zeros((d * d, d))
        m0 = (_B_GAIN_CF * np.eye(d)).reshape(-1)
        return ModelParams(W=W, b=b, M=M, m0=m0, r=d, tau=1.0, d=d)

    centroids = _cluster_centroids(spec)
    targets = np.zeros((spec.n_clusters, r * d))
    for k in range(spec.n_clusters):
        subset = rng.choice(d, size=r, replace=False)
        B_k = np.zeros((r, d))
        B_k[np.arange(r), subset] = _B_GAIN
        targets[k] = B_k.reshape(-1)
    M = targets.T @ centroids
    m0 = np.zeros(r * d)
    return ModelParams(W=W, b=b, M=M, m0=m0, r=r, tau=1.0, d=d)


def sample_dataset(
    spec: SyntheticSpec, truth: ModelParams
) -> tuple[EmbeddingStore, list[ContextTriplet], dict[int, int]]:
    """Draw embeddings, triplet trials, and oddballs from the planted model.

    Images sit at centroid + spread * noise; each trial picks three images
    from distinct clusters plus a context image, and its oddball is
    sampled from the truth's probabilities (computed on the float32
    embeddings actually stored, so downstream scoring sees the same
    vectors).  Participants are assigned round-robin.
    """
    rng = np.random.default_rng([spec.seed, 2])
    centroids = _cluster_centroids(spec)
    cluster_of = np.arange(spec.n_images) % spec.n_clusters
    vectors = centroids[cluster_of] + spec.cluster_spread * rng.standard_normal(
        (spec.n_images, spec.d)
    )
    ids = np.arange(1, spec.n_images + 1, dtype=np.uint64)
    store = EmbeddingStore(ids, vectors.astype(np.float32))
    classes = {int(i): int(c) for i, c in zip(ids, cluster_of)}

    members = [np.flatnonzero(cluster_of == k) for k in range(spec.n_clusters)]
    n = spec.n_trials
    trip_rows = np.empty((n, 3), dtype=np.intp)
    ctx_rows = np.empty(n, dtype=np.intp)
    for t in range(n):
        clusters = rng.choice(spec.n_clusters, size=3, replace=False)
        rows = [members[k][rng.integers(len(members[k]))] for k in clusters]
        while True:
            ctx = int(rng.integers(spec.n_images))
            if ctx not in rows:
                break
        trip_rows[t] = rows
        ctx_rows[t] = ctx

    X = store.vectors.astype(np.float64)
    probs = batch_triplet_probs(
        truth, X[trip_rows[:, 0]], X[trip_rows[:, 1]], X[trip_rows[:, 2]], X[ctx_rows]
    )
    u = rng.random(n)
    oddballs = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), 2)

    triplets = [
        ContextTriplet(
            context_id=int(ids[ctx_rows[t]]),
            image_ids=tuple(int(ids[j]) for j in trip_rows[t]),
            oddball_index=int(oddballs[t]),
            source_trial_id=t + 1,
            participant_id=t % spec.n_participants + 1,
        )
        for t in range(n)
    ]
    return store, triplets, classes


def truth_probabilities(
    truth: ModelParams, triplets: list[ContextTriplet], store: EmbeddingStore
) -> np.ndarray:
    """(n, 3) oddball probabilities of the generating model."""
    arrays = gather_triplets(triplets, store)
    X = store.vectors.astype(np.float64)
    return batch_triplet_probs(
        truth, X[arrays.p], X[arrays.q], X[arrays.r], X[arrays.c]
    )


def bayes_accuracy(
    truth: ModelParams, triplets: list[ContextTriplet], store: EmbeddingStore
) -> float:
    """Expected accuracy of the truth's argmax predictor: mean of max_k p_k."""
    probs = truth_probabilities(truth, triplets, store)
    return float(np.mean(probs.max(axis=1)))
