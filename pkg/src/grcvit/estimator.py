"""Training of the coarse-stage estimator parameters ``(w, a, b)``.

Pseudo-targets come from tertiles of the initial fused scores. The loss is a
mean squared error against the frozen targets plus a hinge routing term that
pushes each score to the correct side of the thresholds; without that term
``a`` and ``b`` would receive no gradient at all.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .complexity import (
    COARSE,
    FINE,
    MEDIUM,
    ComplexityFeatures,
    EstimatorParams,
    assign_granularities,
    fuse_scores,
    sigmoid,
    softmax,
    thresholds_from_raw,
)

# Range of sigmoid(softmax(w) . v) when every descriptor lies in [0, 1].
FUSED_RANGE = (0.5, float(sigmoid(1.0)))


class DegenerateQuantilesError(ValueError):
    """All corpus scores coincide; ``fallback`` labels everything medium."""

    def __init__(self, message, fallback):
        super().__init__(message)
        self.fallback = fallback


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message, entry_id=None):
        super().__init__(message)
        self.entry_id = entry_id


class TrainingDivergedError(ArithmeticError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class ComplexityCorpus:
    ids: list[str]
    features: np.ndarray  # (N, 3), frozen once extracted

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, 3)
        if len(self.ids) != len(self.features):
            raise ValueError("ids and features differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("corpus ids must be unique")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_features(cls, ids, feats: list[ComplexityFeatures]) -> "ComplexityCorpus":
        return cls(list(ids), np.array([f.as_array() for f in feats]))

    @classmethod
    def from_images(cls, ids, images, workers: int = 1) -> "ComplexityCorpus":
        from .complexity import extract_features

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                feats = list(pool.map(extract_features, images))
        else:
            feats = [extract_features(im) for im in images]
        return cls.from_features(ids, feats)


@dataclass(frozen=True)
class PseudoTargets:
    targets: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) in {1, 2, 3}
    q1: float
    q2: float


def compute_quantile_targets(corpus: ComplexityCorpus, init: EstimatorParams | None = None,
                             target_range=FUSED_RANGE) -> PseudoTargets:
    """Tertile pseudo-labels and frozen regression targets.

    Scores use ``init`` (uniform weights by default), are min-max normalised
    over the corpus, and split at the sorted ranks floor(N/3) and
    floor(2N/3). Targets are the normalised scores mapped linearly onto
    ``target_range``; pass ``(0.0, 1.0)`` to keep them in the unit interval.
    """
    n = len(corpus)
    if n < 3:
        raise ValueError(f"need at least 3 corpus entries, got {n}")
    init = init or EstimatorParams()
    raw = fuse_scores(corpus.features, init)
    lo, hi = float(raw.min()), float(raw.max())
    t_lo, t_hi = target_range
    if hi - lo <= 0.0:
        fallback = PseudoTargets(np.full(n, 0.5 * (t_lo + t_hi)), np.full(n, MEDIUM), 0.0, 1.0)
        raise DegenerateQuantilesError("all corpus scores are identical; quantiles are degenerate", fallback)
    norm = (raw - lo) / (hi - lo)
    ranked = np.sort(norm)
    q1, q2 = float(ranked[n // 3]), float(ranked[(2 * n) // 3])
    labels = np.where(norm < q1, COARSE, np.where(norm < q2, MEDIUM, FINE)).astype(np.int64)
    targets = t_lo + (t_hi - t_lo) * norm
    return PseudoTargets(targets, labels, q1, q2)


@dataclass
class CoarseTrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 15
    margin: float = 0.05
    routing_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "CoarseTrainConfig":
        """Settings for corpora of a few hundred images.

        The reference lr/batch pair assumes ~1.5k steps per epoch; a 300-image
        corpus gets ~40 steps per epoch here, so the step size is raised to
        cover a comparable distance.
        """
        base = cls(lr=0.05, batch=8, epochs=15)
        return replace(base, **overrides)


def _threshold_parts(a: float, b: float):
    sa, sb = float(sigmoid(a)), float(sigmoid(b))
    alpha = sa
    beta = sa + (1.0 - sa) * sb
    da_a = sa * (1.0 - sa)
    db_a = da_a * (1.0 - sb)
    db_b = (1.0 - sa) * sb * (1.0 - sb)
    return alpha, beta, da_a, db_a, db_b


def coarse_loss(params: EstimatorParams, features: np.ndarray, targets: np.ndarray, labels: np.ndarray,
                cfg: CoarseTrainConfig, ids=None) -> tuple[float, np.ndarray]:
    """Loss and exact gradient with respect to ``[w1, w2, w3, a, b]``."""
    features = np.asarray(features, dtype=np.float64).reshape(-1, 3)
    n = len(features)
    if n == 0:
        raise ValueError("empty batch")
    targets = np.asarray(targets, dtype=np.float64)
    labels = np.asarray(labels)

    s = softmax(params.w)
    z = features @ s
    phi = sigmoid(z)
    alpha, beta, da_a, db_a, db_b = _threshold_parts(params.a, params.b)
    m = cfg.margin

    resid = phi - targets
    mse = float(np.mean(resid ** 2))
    dphi = 2.0 * resid / n

    # hinge terms: coarse wants phi <= alpha - m, fine wants phi >= beta + m,
    # medium wants alpha + m <= phi <= beta - m
    h_lo = np.where(labels == COARSE, np.maximum(0.0, phi - alpha + m), 0.0)
    h_hi = np.where(labels == FINE, np.maximum(0.0, beta - phi + m), 0.0)
    mid = labels == MEDIUM
    h_mid_lo = np.where(mid, np.maximum(0.0, alpha - phi + m), 0.0)
    h_mid_hi = np.where(mid, np.maximum(0.0, phi - beta + m), 0.0)
    routing = float(np.mean(h_lo + h_hi + h_mid_lo + h_mid_hi))
    loss = mse + cfg.routing_weight * routing

    if not math.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(resid))
        idx = int(bad[0]) if bad.size else None
        entry = ids[idx] if ids is not None and idx is not None else idx
        raise NonFiniteLossError(f"non-finite coarse loss (entry {entry})", entry)

    lam = cfg.routing_weight / n
    act_lo = (h_lo > 0).astype(np.float64)
    act_hi = (h_hi > 0).astype(np.float64)
    act_mlo = (h_mid_lo > 0).astype(np.float64)
    act_mhi = (h_mid_hi > 0).astype(np.float64)
    dphi = dphi + lam * (act_lo - act_hi - act_mlo + act_mhi)
    d_alpha = lam * float(np.sum(-act_lo + act_mlo))
    d_beta = lam * float(np.sum(act_hi - act_mhi))

    dz = dphi * phi * (1.0 - phi)
    # d z / d w_j = s_j (v_j - z)
    grad_w = s * ((dz[:, None] * (features - z[:, None])).sum(axis=0))
    grad_a = d_alpha * da_a + d_beta * db_a
    grad_b = d_beta * db_b
    return loss, np.array([*grad_w, grad_a, grad_b])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(5))
    v: np.ndarray = field(default_factory=lambda: np.zeros(5))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_params


@dataclass
class TraceRow:
    epoch: int
    loss: float
    alpha: float
    beta: float


def full_loss(params: EstimatorParams, corpus: ComplexityCorpus, targets: PseudoTargets,
              cfg: CoarseTrainConfig) -> float:
    loss, _ = coarse_loss(params, corpus.features, targets.targets, targets.labels, cfg, corpus.ids)
    return loss


def train_estimator(corpus: ComplexityCorpus, targets: PseudoTargets, cfg: CoarseTrainConfig,
                    init: EstimatorParams | None = None) -> tuple[EstimatorParams, list[TraceRow]]:
    """Adam over shuffled minibatches. Row 0 of the trace is the start state."""
    params = init or EstimatorParams()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    n = len(corpus)

    def row(epoch):
        th = thresholds_from_raw(params)
        return TraceRow(epoch, full_loss(params, corpus, targets, cfg), th.alpha, th.beta)

    trace = [row(0)]
    vec = params.to_vector()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            try:
                _, grad = coarse_loss(params, corpus.features[idx], targets.targets[idx], targets.labels[idx],
                                      cfg, [corpus.ids[i] for i in idx])
            except NonFiniteLossError as exc:
                raise TrainingDivergedError(str(exc), trace) from exc
            state, vec = adam_step(state, vec, grad)
            if not np.all(np.isfinite(vec)):
                raise TrainingDivergedError(f"parameters became non-finite in epoch {epoch}", trace)
            params = EstimatorParams.from_vector(vec)
        try:
            trace.append(row(epoch))
        except NonFiniteLossError as exc:
            raise TrainingDivergedError(str(exc), trace) from exc
    return params, trace


def routing_agreement(params: EstimatorParams, corpus: ComplexityCorpus, targets: PseudoTargets) -> float:
    levels = assign_granularities(fuse_scores(corpus.features, params), thresholds_from_raw(params))
    return float(np.mean(levels == targets.labels))


def trace_csv(trace: list[TraceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "alpha", "beta"])
    for r in trace:
        writer.writerow([r.epoch, repr(r.loss), repr(r.alpha), repr(r.beta)])
    return buf.getvalue()
