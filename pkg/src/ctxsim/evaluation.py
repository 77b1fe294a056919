"""Odd-one-out accuracy, paired bootstrap deltas, and the class-level ceiling.

Prediction vectors carry a content-derived 64-bit ID per triplet so two
vectors can be checked for alignment before a paired comparison.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import ContextTriplet
from .embedding_store import EmbeddingStore
from .errors import ValidationError
from .model import ModelParams
from .training import TripletArrays, gather_triplets, predict_batch

EVAL_MODES = ("cs", "cit_only", "fm_cosine")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def triplet_uid(triplet: ContextTriplet) -> int:
    """Stable 64-bit content hash (FNV-1a) identifying one triplet trial."""
    payload = struct.pack(
        "<QQQQBQ",
        triplet.context_id,
        *triplet.image_ids,
        triplet.oddball_index,
        triplet.source_trial_id,
    )
    h = _FNV_OFFSET
    for byte in payload:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


@dataclass
class PredictionVector:
    """Per-triplet predictions aligned with the evaluation triplet list."""

    triplet_ids: np.ndarray  # u64 content hashes
    predicted: np.ndarray  # int8 oddball positions
    correct: np.ndarray  # bool

    def __post_init__(self):
        if not (len(self.triplet_ids) == len(self.predicted) == len(self.correct)):
            raise ValidationError("prediction vector fields must have equal length")

    def __len__(self) -> int:
        return len(self.correct)


def evaluate_model(
    triplets: list[ContextTriplet],
    store: EmbeddingStore,
    mode: str,
    params: ModelParams | None = None,
) -> PredictionVector:
    """Predict the oddball for every triplet with the chosen scorer.

    cs: the context-sensitive kernel; cit_only: dot products of the
    learned transform's outputs; fm_cosine: cosines of the raw embeddings.
    """
    if mode not in EVAL_MODES:
        raise ValidationError(f"mode must be one of {EVAL_MODES}")
    if not triplets:
        raise ValidationError("no triplets to evaluate")
    arrays = gather_triplets(triplets, store)
    if mode == "fm_cosine":
        # the identity transform reduces the learned scorer to raw cosine
        d = store.dim
        params = ModelParams(
            W=np.eye(d), b=np.zeros(d), M=np.zeros((d, d)), m0=np.zeros(d),
            r=1, tau=1.0, d=d,
        )
        kind = "cit"
    elif mode == "cit_only":
        if params is None:
            raise ValidationError("cit_only evaluation requires model params")
        kind = "cit"
    else:
        if params is None:
            raise ValidationError("cs evaluation requires model params")
        kind = "cs"
    predicted = predict_batch(params, arrays, store, kind=kind)
    uids = np.array([triplet_uid(t) for t in triplets], dtype=np.uint64)
    return PredictionVector(
        triplet_ids=uids,
        predicted=predicted,
        correct=predicted == arrays.oddball,
    )


def accuracy(preds: PredictionVector) -> float:
    """Fraction of triplets whose predicted oddball matches the human choice."""
    if len(preds) == 0:
        raise ValidationError("empty prediction vector")
    return float(np.mean(preds.correct))


@dataclass
class BootstrapResult:
    delta_mean: float
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int


def paired_bootstrap(
    preds_a: PredictionVector,
    preds_b: PredictionVector,
    n_boot: int = 10_000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap of the accuracy difference acc_b - acc_a.

    Trials are resampled with replacement; resample i draws its indices
    from a generator seeded with (seed, i), so chunked or parallel
    execution reproduces the serial result exactly.
    """
    if len(preds_a) != len(preds_b) or not np.array_equal(
        preds_a.triplet_ids, preds_b.triplet_ids
    ):
        raise ValidationError("prediction vectors are not aligned on the same triplets")
    if len(preds_a) == 0:
        raise ValidationError("empty prediction vectors")
    if n_boot < 1:
        raise ValidationError("n_boot must be >= 1")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must be in (0, 1)")
    n = len(preds_a)
    diff = preds_b.correct.astype(np.float64) - preds_a.correct.astype(np.float64)
    deltas = np.empty(n_boot)
    for i in range(n_boot):
        idx = np.random.default_rng([seed, i]).integers(0, n, size=n)
        deltas[i] = diff[idx].mean()
    lo, hi = np.percentile(deltas, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(
        delta_mean=float(deltas.mean()),
        ci_low=float(lo),
        ci_high=float(hi),
        n_boot=n_boot,
        seed=seed,
    )


def format_delta(result: BootstrapResult) -> str:
    """Render a bootstrap delta as 'Δ = 0.054 [0.052, 0.057]'."""
    return (
        f"Δ = {result.delta_mean:.3f} "
        f"[{result.ci_low:.3f}, {result.ci_high:.3f}]"
    )


@dataclass
class UpperBoundResult:
    """Accuracy ceiling from class-level trial groups with >= 2 responses.

    bound is the unweighted mean over groups of max_i p_i (None when no
    group has multiple responses); bound_weighted weights groups by their
    response counts.
    """

    bound: float | None
    bound_weighted: float | None
    groups_total: int
    groups_retained: int
    responses_total: int
    responses_retained: int

    @property
    def insufficient_data(self) -> bool:
        return self.bound is None


def upper_bound(
    triplets: list[ContextTriplet],
    classes: dict[int, int],
) -> UpperBoundResult:
    """Ceiling on odd-one-out accuracy from repeated class-level trials.

    Triplets are keyed by (context class, sorted triplet class multiset);
    within a group the oddball responses are mapped to class positions
    (ordered by sorted class label) and the best deterministic predictor
    scores max_i p_i of the empirical response distribution p.
    """
    groups: dict[tuple, np.ndarray] = {}
    for t in triplets:
        try:
            labels = [classes[i] for i in t.image_ids]
            context_class = classes[t.context_id]
        except KeyError as exc:
            raise ValidationError(f"image ID {exc.args[0]} missing from class map") from None
        if len(set(labels)) != 3:
            raise ValidationError(
                f"triplet from trial {t.source_trial_id} has duplicate class labels; "
                "filter class collisions before estimating the upper bound"
            )
        ordered = sorted(labels)
        key = (context_class, tuple(ordered))
        position = ordered.index(labels[t.oddball_index])
        counts = groups.setdefault(key, np.zeros(3, dtype=np.int64))
        counts[position] += 1

    groups_total = len(groups)
    responses_total = len(triplets)
    maxima = []
    weights = []
    for counts in groups.values():
        total = int(counts.sum())
        if total < 2:
            continue
        p = counts / total
        maxima.append(float(p.max()))
        weights.append(total)
    if not maxima:
        return UpperBoundResult(
            bound=None,
            bound_weighted=None,
            groups_total=groups_total,
            groups_retained=0,
            responses_total=responses_total,
            responses_retained=0,
        )
    maxima_arr = np.array(maxima)
    weights_arr = np.array(weights, dtype=np.float64)
    return UpperBoundResult(
        bound=float(maxima_arr.mean()),
        bound_weighted=float(np.average(maxima_arr, weights=weights_arr)),
        groups_total=groups_total,
        groups_retained=len(maxima),
        responses_total=responses_total,
        responses_retained=int(weights_arr.sum()),
    )
