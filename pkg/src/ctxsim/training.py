"""Maximum-likelihood training with hand-derived gradients and grid search.

The objective over a batch of n triplet-with-context trials is

    L = -(1/n) sum_s log P(k*_s) + lambda1 ||W - I||_F^2
        + (lambda2/n) sum_s ||A_c - I||_F^2,

with P the temperature-scaled softmax over pair similarities and
A_c = B_c^T B_c.  The regularizer is evaluated in factored form,
||A_c - I||_F^2 = ||B B^T||_F^2 - 2 ||B||_F^2 + d, so the d x d kernel
is never materialized.

Backward pass, per trial (derivation used by ``batch_gradients``):
  (a) softmax/NLL in the three pair-similarity slots:
      dL/ds_k = (p_k - 1[k = k*]) / (tau * n)
  (b) each slot is s_ij = (B xt_i).(B xt_j), so with projections
      P_i = B xt_i the slot gradients fold into per-image vectors
      dP_i, and dL/dB = sum_i dP_i xt_i^T
      (identical to B (xt_i xt_j^T + xt_j xt_i^T) summed over slots)
  (c) dL/dxt_i = B^T dP_i
  (d) normalization Jacobian: xt = z/||z|| with z = W x + b gives
      dz = (dxt - (dxt.xt) xt) / ||z||, then dW += dz x^T, db += dz
  (e) regularizer: d/dB ||B^T B - I||_F^2 = 4 (B B^T B - B)
  (f) mapper chain: vec(B) = M u + m0 with u the context input, so
      dM += dvec(B) u^T, dm0 += dvec(B), du = M^T dvec(B); in "cit"
      context mode du flows on into (W, b) through (d)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .dataset import ContextTriplet
from .embedding_store import EmbeddingStore
from .errors import DivergenceError, ValidationError
from .model import (
    ModelParams,
    batch_cit_forward,
    batch_context_input,
    batch_pair_similarities,
    batch_triplet_probs,
    init_params,
    softmax,
)

MODEL_KINDS = ("cs", "cit")

# the hyperparameter grid used when none is given
DEFAULT_GRID = {
    "r": (16, 32),
    "lambda1": (1e-4, 1e-3),
    "lambda2": (1e-5, 1e-4, 1e-3),
    "tau": (1.0, 5.0, 7.5),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 128
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    r: int = 16
    tau: float = 1.0
    seed: int = 0
    shuffle: bool = True
    model: str = "cs"
    sigma_init: float | None = None
    context_mode: str = "l2"
    mapper_bias: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("regularization strengths must be nonnegative")
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}")


@dataclass
class GradientSet:
    dW: np.ndarray
    db: np.ndarray
    dM: np.ndarray
    dm0: np.ndarray

    def finite(self) -> bool:
        return all(
            np.all(np.isfinite(g)) for g in (self.dW, self.db, self.dM, self.dm0)
        )


@dataclass
class EpochStats:
    epoch: int
    loss: float
    nll: float
    reg_w: float
    reg_a: float
    val_acc: float


@dataclass
class TrainHistory:
    entries: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def final_epoch(self) -> int:
        return self.entries[-1].epoch if self.entries else 0


@dataclass
class TripletArrays:
    """Embedding row indices for a triplet list, resolved once up front."""

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    c: np.ndarray
    oddball: np.ndarray

    def __len__(self) -> int:
        return len(self.oddball)


def gather_triplets(triplets: list[ContextTriplet], store: EmbeddingStore) -> TripletArrays:
    """Resolve triplet image IDs to store rows (validates coverage)."""
    n = len(triplets)
    p = np.empty(n, dtype=np.intp)
    q = np.empty(n, dtype=np.intp)
    r = np.empty(n, dtype=np.intp)
    c = np.empty(n, dtype=np.intp)
    oddball = np.empty(n, dtype=np.intp)
    for k, t in enumerate(triplets):
        p[k] = store.row(t.image_ids[0])
        q[k] = store.row(t.image_ids[1])
        r[k] = store.row(t.image_ids[2])
        c[k] = store.row(t.context_id)
        oddball[k] = t.oddball_index
    return TripletArrays(p=p, q=q, r=r, c=c, oddball=oddball)


def _embed(store: EmbeddingStore, rows: np.ndarray) -> np.ndarray:
    return store.vectors[rows].astype(np.float64)


def _forward_backward(
    params: ModelParams,
    Xp: np.ndarray,
    Xq: np.ndarray,
    Xr: np.ndarray,
    Xc: np.ndarray,
    oddball: np.ndarray,
    lambda1: float,
    lambda2: float,
    kind: str,
    want_grads: bool,
):
    """One pass over a batch; returns (loss, nll, reg_w, reg_a, grads|None)."""
    n = Xp.shape[0]
    d = params.d
    Tp, np_norm = batch_cit_forward(params, Xp)
    Tq, nq_norm = batch_cit_forward(params, Xq)
    Tr, nr_norm = batch_cit_forward(params, Xr)

    if kind == "cit":
        Pp, Pq, Pr = Tp, Tq, Tr
        B = BBt = U = None
        reg_a_terms = np.zeros(n)
    else:
        U, c_norm = batch_context_input(params, Xc)
        vecB = U @ params.M.T + params.m0
        B = vecB.reshape(n, params.r, d)
        Pp = np.einsum("nrd,nd->nr", B, Tp)
        Pq = np.einsum("nrd,nd->nr", B, Tq)
        Pr = np.einsum("nrd,nd->nr", B, Tr)
        BBt = np.einsum("nrd,nsd->nrs", B, B)
        # ||B^T B - I||_F^2 = ||B B^T||_F^2 - 2 ||B||_F^2 + d
        reg_a_terms = (
            np.sum(BBt * BBt, axis=(1, 2)) - 2.0 * np.sum(B * B, axis=(1, 2)) + d
        )

    sims = np.stack(
        [np.sum(Pq * Pr, axis=1), np.sum(Pp * Pr, axis=1), np.sum(Pp * Pq, axis=1)],
        axis=1,
    )
    probs = softmax(sims / params.tau)
    rows = np.arange(n)
    picked = probs[rows, oddball]
    nll = float(-np.mean(np.log(picked)))
    reg_w = lambda1 * float(np.sum((params.W - np.eye(d)) ** 2))
    reg_a = lambda2 * float(np.mean(reg_a_terms))
    loss = nll + reg_w + reg_a

    if not want_grads:
        return loss, nll, reg_w, reg_a, None

    # (a) softmax/NLL gradient in the three similarity slots
    dS = probs.copy()
    dS[rows, oddball] -= 1.0
    dS /= params.tau * n

    # (b) fold slot gradients into per-image projection gradients
    dPp = dS[:, 1, None] * Pr + dS[:, 2, None] * Pq
    dPq = dS[:, 0, None] * Pr + dS[:, 2, None] * Pp
    dPr = dS[:, 0, None] * Pq + dS[:, 1, None] * Pp

    dW = 2.0 * lambda1 * (params.W - np.eye(d))
    db = np.zeros(d)
    dM = np.zeros_like(params.M)
    dm0 = np.zeros_like(params.m0)

    if kind == "cit":
        dTp, dTq, dTr = dPp, dPq, dPr
    else:
        # (c) through the projections
        dTp = np.einsum("nrd,nr->nd", B, dPp)
        dTq = np.einsum("nrd,nr->nd", B, dPq)
        dTr = np.einsum("nrd,nr->nd", B, dPr)
        dB = (
            np.einsum("nr,nd->nrd", dPp, Tp)
            + np.einsum("nr,nd->nrd", dPq, Tq)
            + np.einsum("nr,nd->nrd", dPr, Tr)
        )
        # (e) regularizer pull toward row-orthonormal B
        if lambda2 != 0.0:
            dB += (4.0 * lambda2 / n) * (np.einsum("nrs,nsd->nrd", BBt, B) - B)
        # (f) mapper chain
        dvecB = dB.reshape(n, params.r * d)
        dM += dvecB.T @ U
        if params.mapper_bias:
            dm0 += dvecB.sum(axis=0)
        if params.context_mode == "cit":
            dU = dvecB @ params.M
            dZc = (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / c_norm[:, None]
            dW += dZc.T @ Xc
            db += dZc.sum(axis=0)

    # (d) normalization Jacobian back to (W, b) for the three images
    for dT, T, norms, X in (
        (dTp, Tp, np_norm, Xp),
        (dTq, Tq, nq_norm, Xq),
        (dTr, Tr, nr_norm, Xr),
    ):
        dZ = (dT - np.sum(dT * T, axis=1, keepdims=True) * T) / norms[:, None]
        dW += dZ.T @ X
        db += dZ.sum(axis=0)

    return loss, nll, reg_w, reg_a, GradientSet(dW=dW, db=db, dM=dM, dm0=dm0)


def _batch_arrays(batch: list[ContextTriplet], store: EmbeddingStore):
    if not batch:
        raise ValidationError("batch must be nonempty")
    arrays = gather_triplets(batch, store)
    return (
        _embed(store, arrays.p),
        _embed(store, arrays.q),
        _embed(store, arrays.r),
        _embed(store, arrays.c),
        arrays.oddball,
    )


def batch_loss(
    params: ModelParams,
    batch: list[ContextTriplet],
    store: EmbeddingStore,
    lambda1: float,
    lambda2: float,
    kind: str = "cs",
) -> float:
    """Mean NLL plus the two identity regularizers over one batch."""
    Xp, Xq, Xr, Xc, oddball = _batch_arrays(batch, store)
    loss, _, _, _, _ = _forward_backward(
        params, Xp, Xq, Xr, Xc, oddball, lambda1, lambda2, kind, want_grads=False
    )
    return loss


def batch_gradients(
    params: ModelParams,
    batch: list[ContextTriplet],
    store: EmbeddingStore,
    lambda1: float,
    lambda2: float,
    kind: str = "cs",
) -> GradientSet:
    """Exact analytic gradient of :func:`batch_loss` (derivation above)."""
    Xp, Xq, Xr, Xc, oddball = _batch_arrays(batch, store)
    _, _, _, _, grads = _forward_backward(
        params, Xp, Xq, Xr, Xc, oddball, lambda1, lambda2, kind, want_grads=True
    )
    return grads


def sgd_step(params: ModelParams, grads: GradientSet, learning_rate: float) -> ModelParams:
    """Plain SGD update, theta <- theta - lr * grad; returns new params."""
    if not grads.finite():
        raise DivergenceError("non-finite gradient entry")
    return ModelParams(
        W=params.W - learning_rate * grads.dW,
        b=params.b - learning_rate * grads.db,
        M=params.M - learning_rate * grads.dM,
        m0=params.m0 - learning_rate * grads.dm0,
        r=params.r,
        tau=params.tau,
        d=params.d,
        context_mode=params.context_mode,
        mapper_bias=params.mapper_bias,
    )


def predict_batch(
    params: ModelParams,
    arrays: TripletArrays,
    store: EmbeddingStore,
    kind: str = "cs",
    chunk: int = 8192,
) -> np.ndarray:
    """Argmax oddball predictions for resolved triplets (lowest index wins ties)."""
    out = np.empty(len(arrays), dtype=np.int8)
    for lo in range(0, len(arrays), chunk):
        hi = min(lo + chunk, len(arrays))
        probs = batch_triplet_probs(
            params,
            _embed(store, arrays.p[lo:hi]),
            _embed(store, arrays.q[lo:hi]),
            _embed(store, arrays.r[lo:hi]),
            _embed(store, arrays.c[lo:hi]) if kind == "cs" else None,
            kind=kind,
        )
        out[lo:hi] = np.argmax(probs, axis=1)
    return out


def _validation_accuracy(params, val_arrays, store, kind) -> float:
    preds = predict_batch(params, val_arrays, store, kind=kind)
    return float(np.mean(preds == val_arrays.oddball))


def _full_loss(params, arrays, store, lambda1, lambda2, kind, chunk=8192):
    """Dataset-mean loss evaluated in chunks (weighted by chunk size)."""
    total = 0.0
    parts = np.zeros(3)
    n = len(arrays)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        loss, nll, reg_w, reg_a, _ = _forward_backward(
            params,
            _embed(store, arrays.p[lo:hi]),
            _embed(store, arrays.q[lo:hi]),
            _embed(store, arrays.r[lo:hi]),
            _embed(store, arrays.c[lo:hi]),
            arrays.oddball[lo:hi],
            lambda1,
            lambda2,
            kind,
            want_grads=False,
        )
        w = (hi - lo) / n
        total += w * loss
        parts += w * np.array([nll, reg_w, reg_a])
    return total, float(parts[0]), float(parts[1]), float(parts[2])


def train(
    config: TrainConfig,
    train_triplets: list[ContextTriplet],
    val_triplets: list[ContextTriplet],
    store: EmbeddingStore,
) -> tuple[ModelParams, TrainHistory]:
    """Minibatch SGD; returns params from the epoch with best validation accuracy.

    History entry 0 is the pre-training state (full-train loss, init val
    accuracy); entries 1..epochs carry the running mean of minibatch losses
    seen during that epoch.  Ties in validation accuracy go to the latest
    epoch.  A non-finite loss or gradient raises DivergenceError carrying
    the last finite params and the history so far.
    """
    if not train_triplets:
        raise ValidationError("no training triplets")
    if not val_triplets:
        raise ValidationError("no validation triplets")
    shared = {t.source_trial_id for t in train_triplets} & {
        t.source_trial_id for t in val_triplets
    }
    if shared:
        raise ValidationError(f"train/val splits share source trials, e.g. {next(iter(shared))}")

    kind = config.model
    tr = gather_triplets(train_triplets, store)
    va = gather_triplets(val_triplets, store)
    rank = 1 if kind == "cit" else config.r
    sigma = 0.0 if kind == "cit" else config.sigma_init
    params = init_params(
        store.dim,
        rank,
        config.tau,
        config.seed,
        sigma_init=sigma,
        context_mode=config.context_mode,
        mapper_bias=config.mapper_bias,
    )

    history = TrainHistory()
    loss0, nll0, reg_w0, reg_a0 = _full_loss(
        params, tr, store, config.lambda1, config.lambda2, kind
    )
    val0 = _validation_accuracy(params, va, store, kind)
    history.entries.append(EpochStats(0, loss0, nll0, reg_w0, reg_a0, val0))
    best_params, best_val, best_epoch = params.copy(), val0, 0

    n = len(tr)
    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)
        sums = np.zeros(4)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, nll, reg_w, reg_a, grads = _forward_backward(
                params,
                _embed(store, tr.p[idx]),
                _embed(store, tr.q[idx]),
                _embed(store, tr.r[idx]),
                _embed(store, tr.c[idx]),
                tr.oddball[idx],
                config.lambda1,
                config.lambda2,
                kind,
                want_grads=True,
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", params=params, history=history
                )
            try:
                params = sgd_step(params, grads, config.learning_rate)
            except DivergenceError as exc:
                exc.params, exc.history = params, history
                raise
            sums += np.array([loss, nll, reg_w, reg_a]) * len(idx)
        mean = sums / n
        val_acc = _validation_accuracy(params, va, store, kind)
        history.entries.append(EpochStats(epoch, *(float(v) for v in mean), val_acc))
        if val_acc >= best_val:
            best_params, best_val, best_epoch = params.copy(), val_acc, epoch

    history.best_epoch = best_epoch
    return best_params, history


@dataclass
class GridResult:
    config: TrainConfig
    val_acc: float | None
    status: str


@dataclass
class GridSearchOutcome:
    best_config: TrainConfig | None
    results: list[GridResult]
    best_params: ModelParams | None
    best_history: TrainHistory | None


def grid_search(
    base: TrainConfig,
    grids: dict | None,
    train_triplets: list[ContextTriplet],
    val_triplets: list[ContextTriplet],
    store: EmbeddingStore,
) -> GridSearchOutcome:
    """Train one model per grid point; pick the highest validation accuracy.

    A failed run is recorded with its error and the search continues.
    Ties keep the earliest grid point (enumeration order r, lambda1,
    lambda2, tau).
    """
    grids = dict(DEFAULT_GRID if grids is None else grids)
    for key in DEFAULT_GRID:
        grids.setdefault(key, (getattr(base, key),))
        if not grids[key]:
            raise ValidationError(f"empty grid for {key}")
    unknown = set(grids) - set(DEFAULT_GRID)
    if unknown:
        raise ValidationError(f"unknown grid keys: {sorted(unknown)}")

    outcome = GridSearchOutcome(None, [], None, None)
    best_val = -np.inf
    for r, lambda1, lambda2, tau in product(
        grids["r"], grids["lambda1"], grids["lambda2"], grids["tau"]
    ):
        config = replace(base, r=int(r), lambda1=lambda1, lambda2=lambda2, tau=tau)
        try:
            params, history = train(config, train_triplets, val_triplets, store)
        except (ValidationError, DivergenceError) as exc:
            outcome.results.append(GridResult(config, None, f"failed: {exc}"))
            continue
        val_acc = history.entries[history.best_epoch].val_acc
        outcome.results.append(GridResult(config, val_acc, "ok"))
        if val_acc > best_val:
            best_val = val_acc
            outcome.best_config = config
            outcome.best_params = params
            outcome.best_history = history
    return outcome
