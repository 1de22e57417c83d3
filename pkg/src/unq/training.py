"""Training objective, triplet sampling, QHAdam and the one-cycle schedule."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import UnqModel, gumbel_noise
from .nn import ShapeError, softmax_backward
from .search import d2_scores, exact_knn

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.01
    beta_start: float = 1.0
    beta_end: float = 0.05
    delta: float = 0.1
    batch_size: int = 1024
    epochs: int = 10
    peak_lr: float = 1e-3
    min_lr: float | None = None  # defaults to peak_lr / 25
    beta1: float = 0.95
    beta2: float = 0.998
    nu1: float = 0.7
    nu2: float = 1.0
    eps: float = 1e-8
    rerank_L: int = 500
    n_neighbors: int = 200
    no_triplet: bool = False
    triplet_only: bool = False
    no_regularizer: bool = False
    soft_gumbel: bool = False
    no_rerank: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.delta < 0:
            raise ValueError("alpha and delta must be non-negative")
        if not 0 < self.beta_end <= self.beta_start:
            raise ValueError("need 0 < beta_end <= beta_start")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.no_triplet and self.triplet_only:
            raise ValueError("no_triplet and triplet_only are mutually exclusive")
        if self.min_lr is None:
            self.min_lr = self.peak_lr / 25

    def beta_at(self, progress: float) -> float:
        progress = min(max(progress, 0.0), 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * progress

    def weights(self, progress: float) -> tuple[float, float, float]:
        """Coefficients ``(reconstruction, triplet, regularizer)`` after ablation flags."""
        w_rec = 0.0 if self.triplet_only else 1.0
        if self.triplet_only:
            alpha = 1.0
        elif self.no_triplet:
            alpha = 0.0
        else:
            alpha = self.alpha
        beta = 0.0 if self.no_regularizer else self.beta_at(progress)
        return w_rec, alpha, beta


# -- loss terms ------------------------------------------------------------------

def reconstruction_loss(x, x_rec, return_grad: bool = False):
    """Mean over rows of ``|x - x_rec|^2``; optional gradient w.r.t. ``x_rec``."""
    x, x_rec = np.asarray(x), np.asarray(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    diff = x_rec - x
    n = max(x.shape[0], 1)
    value = float(np.einsum("ij,ij->", diff, diff, dtype=np.float64) / n)
    if return_grad:
        return value, (2.0 / n) * diff
    return value


def triplet_hinge(logits: np.ndarray, pos_codes, neg_codes, delta: float, return_grad: bool = False):
    """``mean(max(0, delta + d2(x, pos) - d2(x, neg)))`` from anchor logits ``(B, M, K)``."""
    pos_codes = np.asarray(pos_codes, dtype=np.int64)
    neg_codes = np.asarray(neg_codes, dtype=np.int64)
    n, M, _ = logits.shape
    rows = np.arange(n)[:, None]
    cols = np.arange(M)[None, :]
    d_pos = -logits[rows, cols, pos_codes].sum(axis=1, dtype=np.float64)
    d_neg = -logits[rows, cols, neg_codes].sum(axis=1, dtype=np.float64)
    margin = delta + d_pos - d_neg
    value = float(np.maximum(margin, 0.0).mean()) if n else 0.0
    if not return_grad:
        return value
    grad = np.zeros_like(logits)
    active = np.flatnonzero(margin > 0)
    r = np.repeat(active, M)
    c = np.tile(np.arange(M), active.size)
    np.add.at(grad, (r, c, pos_codes[active].ravel()), -1.0 / n)
    np.add.at(grad, (r, c, neg_codes[active].ravel()), 1.0 / n)
    return value, grad


def triplet_loss(model: UnqModel, anchors, positives_codes, negatives_codes, delta: float) -> float:
    """Hinge on the learned-space distance, evaluated with the model in eval mode.

    Uses the same ``-sum_m lut[m, i_m]`` score as the database scan.
    """
    from .search import build_luts

    luts = build_luts(model, anchors)
    pos = np.asarray(positives_codes)
    neg = np.asarray(negatives_codes)
    margins = [delta + d2_scores(lut, p[None])[0] - d2_scores(lut, q[None])[0]
               for lut, p, q in zip(luts, pos, neg)]
    return float(np.maximum(np.asarray(margins, dtype=np.float64), 0.0).mean())


def cv_squared(probs) -> np.ndarray:
    """Squared coefficient of variation of batch-averaged probabilities, per codebook.

    ``probs`` is ``(B, M, K)`` (or ``(B, K)`` for one codebook).  Population
    variance over the K codewords divided by the squared mean.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, None, :]
    p_avg = p.mean(axis=0)
    mean = p_avg.mean(axis=1)
    var = ((p_avg - mean[:, None]) ** 2).mean(axis=1)
    return var / mean**2


def cv_squared_grad(probs) -> np.ndarray:
    """Gradient of ``mean_m cv_squared(probs)[m]`` w.r.t. ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    n, M, K = p.shape
    p_avg = p.mean(axis=0)
    mean = p_avg.mean(axis=1, keepdims=True)
    var = ((p_avg - mean) ** 2).mean(axis=1, keepdims=True)
    d_avg = 2.0 * (p_avg - mean) / (K * mean**2) - 2.0 * var / (K * mean**3)
    return np.broadcast_to(d_avg / (n * M), p.shape).astype(probs.dtype)


@dataclass
class LossTerms:
    reconstruction: float
    triplet: float
    regularizer: float  # mean over codebooks of CV^2
    total: float


def total_loss(model: UnqModel, batch, pos_codes, neg_codes, config: TrainConfig,
               epoch_progress: float, noise: np.ndarray,
               weights: tuple[float, float, float] | None = None) -> LossTerms:
    """Forward and backward for one minibatch; gradients accumulate in ``model``.

    ``weights`` overrides the ``(reconstruction, triplet, regularizer)``
    coefficients that ``config`` would give at ``epoch_progress``.
    """
    w_rec, alpha, beta = config.weights(epoch_progress) if weights is None else weights
    tp = model.train_forward(batch, noise, hard=not config.soft_gumbel, decode=w_rec > 0)

    d_logits = np.zeros_like(tp.logits)
    l1 = 0.0
    recon_grad = None
    if w_rec > 0:
        l1, g = reconstruction_loss(tp.x, tp.reconstruction, return_grad=True)
        recon_grad = w_rec * g

    l2 = 0.0
    if alpha > 0 and pos_codes is not None:
        l2, g = triplet_hinge(tp.logits, pos_codes, neg_codes, config.delta, return_grad=True)
        d_logits += alpha * g

    cv = float(cv_squared(tp.probs).mean())
    if beta > 0:
        d_probs = beta * cv_squared_grad(tp.probs)
        d_logits += softmax_backward(tp.probs, d_probs)

    total = w_rec * l1 + alpha * l2 + beta * cv
    for name, v in (("reconstruction", l1), ("triplet", l2), ("regularizer", cv)):
        if not math.isfinite(v):
            raise NumericalAbort(f"non-finite {name} loss ({v})")
    model.train_backward(tp, recon_grad, d_logits)
    return LossTerms(l1, l2, cv, total)


# -- triplet sampling -------------------------------------------------------------------

@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def negative_window(n_neighbors: int) -> tuple[int, int]:
    """1-based inclusive rank window for negatives, clamped to what exists."""
    hi = min(200, n_neighbors)
    lo = max(min(100, hi), 4)
    if lo > hi:
        raise ValueError(f"need at least 4 neighbours per point, got {n_neighbors}")
    return lo, hi


def sample_triplets(gt_ids, rng: np.random.Generator) -> TripletBatch:
    """One positive and one negative per anchor.

    ``gt_ids[i]`` lists the neighbours of point i by increasing distance with
    i itself removed, so column j holds rank j + 1.  Positives come from ranks
    1-3, negatives from ranks 100-200 (clamped for small sets, with a warning).
    """
    gt_ids = np.asarray(gt_ids)
    n, n_nb = gt_ids.shape
    lo, hi = negative_window(n_nb)
    if (lo, hi) != (100, 200):
        warnings.warn(f"negative window clamped to ranks {lo}-{hi} ({n_nb} neighbours available)",
                      stacklevel=2)
    anchors = np.arange(n)
    pos_col = rng.integers(0, min(3, n_nb), size=n)
    neg_col = rng.integers(lo - 1, hi, size=n)
    return TripletBatch(anchors, gt_ids[anchors, pos_col], gt_ids[anchors, neg_col])


# -- optimizer and schedule ------------------------------------------------------------------

@dataclass
class OptimizerState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def qhadam_step(params, grads, state: OptimizerState, lr: float, beta1: float = 0.95,
                beta2: float = 0.998, nu1: float = 0.7, nu2: float = 1.0, eps: float = 1e-8) -> None:
    """Quasi-hyperbolic Adam, updating ``params`` in place.

    ``nu1`` mixes the raw gradient with the bias-corrected first moment in the
    numerator, ``nu2`` does the same for squared gradient and second moment in
    the denominator.  ``nu1 = nu2 = 1`` is plain Adam.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        num = (1 - nu1) * g + nu1 * (m / c1)
        den = np.sqrt((1 - nu2) * g * g + nu2 * (v / c2)) + eps
        p -= (lr * num / den).astype(p.dtype, copy=False)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float, min_lr: float) -> float:
    """Linear rise ``min_lr -> peak_lr`` over the first 30%, then down to ``min_lr / 10``."""
    if total_steps <= 0:
        return min_lr
    apex = 0.3 * total_steps
    if step <= apex:
        return min_lr + (peak_lr - min_lr) * (step / apex)
    frac = (step - apex) / (total_steps - apex)
    return peak_lr + (min_lr / 10 - peak_lr) * frac


# -- loop -------------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    reconstruction: float
    triplet: float
    regularizer: float
    total: float
    lr: float
    beta: float

    def line(self) -> str:
        vals = (self.reconstruction, self.triplet, self.regularizer, self.total, self.lr, self.beta)
        return "\t".join([str(self.epoch)] + [f"{v:.8g}" for v in vals])


@dataclass
class FitResult:
    model: UnqModel
    history: list[EpochRecord] = field(default_factory=list)


def fit(model: UnqModel, train_set, config: TrainConfig, rng: np.random.Generator | int = 0,
        on_epoch=None, workers: int = 1) -> FitResult:
    """Minibatch training of all three objective terms.

    Triplets (and the hard codes of their positives/negatives) are refreshed
    at the start of every epoch.  ``on_epoch`` receives each
    :class:`EpochRecord` as it is produced.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(train_set, dtype=model.dtype)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != model.D:
        raise ShapeError(f"train set must be (N, {model.D}), got {x.shape}")
    result = FitResult(model)
    if config.epochs == 0:
        return result
    if n < 2:
        raise ValueError("need at least two training vectors")

    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    total_steps = config.epochs * steps_per_epoch
    use_triplets = config.weights(0.0)[1] > 0
    gt = None
    if use_triplets:
        k = min(config.n_neighbors, n - 1)
        log.info("computing %d-NN ground truth on %d training vectors", k, n)
        gt = exact_knn(x, x, k, exclude_self=True, workers=workers).ids

    params = [p for _, p, _ in model.params()]
    grads = [g for _, _, g in model.params()]
    state = OptimizerState.zeros_like(params)
    step = 0
    lr = config.min_lr
    for epoch in range(config.epochs):
        progress = epoch / (config.epochs - 1) if config.epochs > 1 else 0.0
        beta = config.weights(progress)[2]
        codes = triplets = None
        if use_triplets:
            triplets = sample_triplets(gt, rng)
            codes = model.hard_encode(x)
        model.train()
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for b in range(steps_per_epoch):
            idx = perm[b * batch:(b + 1) * batch]
            lr = one_cycle_lr(step, total_steps, config.peak_lr, config.min_lr)
            noise = gumbel_noise((idx.size, model.M, model.K), rng, model.dtype)
            pos = neg = None
            if use_triplets:
                pos = codes[triplets.positive[idx]]
                neg = codes[triplets.negative[idx]]
            model.zero_grad()
            try:
                terms = total_loss(model, x[idx], pos, neg, config, progress, noise)
            except NumericalAbort as exc:
                raise NumericalAbort(f"epoch {epoch} step {b}: {exc}") from None
            for name, _, g in model.params():
                if not np.all(np.isfinite(g)):
                    raise NumericalAbort(f"epoch {epoch} step {b}: non-finite gradient in {name}")
            qhadam_step(params, grads, state, lr, config.beta1, config.beta2,
                        config.nu1, config.nu2, config.eps)
            sums += (terms.reconstruction, terms.triplet, terms.regularizer, terms.total)
            step += 1
        model.eval()
        means = sums / steps_per_epoch
        rec = EpochRecord(epoch, *means.tolist(), lr=lr, beta=beta)
        result.history.append(rec)
        log.info("epoch %s", rec.line())
        if on_epoch is not None:
            on_epoch(rec)
    return result
