"""Desk-scale training of the fine stage.

Routing is computed once per image and frozen. Every minibatch is split
into per-granularity sub-batches; their cross-entropy losses are combined
into the batch mean before a single backward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..complexity import (
    EstimatorParams,
    Thresholds,
    assign_granularities,
    extract_features,
    fuse_scores,
    thresholds_from_raw,
)
from ..imgcore import RgbImage, textured_rgb
from ..tensor import Tape, ops
from .config import ModelConfig
from .network import GrcViT


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, H, W, 3) with one label each")

    def __len__(self):
        return len(self.labels)


def textured_dataset(n: int, size: int = 32, seed: int = 0) -> ToyDataset:
    """Three-class colour texture set (flat blobs / smooth noise / pixel noise)."""
    images, labels = [], []
    for i in range(n):
        cls = i % 3
        images.append(textured_rgb(cls, seed * 1_000_003 + i, size).data)
        labels.append(cls)
    return ToyDataset(np.stack(images), np.array(labels))


# ---------------------------------------------------------------------------
# Routing sources


class AdaptiveRouting:
    """Frozen coarse stage: descriptors, fused score, thresholds."""

    name = "adaptive"

    def __init__(self, params: EstimatorParams, thresholds: Thresholds | None = None):
        self.params = params
        self.thresholds = thresholds if thresholds is not None else thresholds_from_raw(params)

    def scores(self, images) -> np.ndarray:
        feats = np.array([extract_features(RgbImage(im)).as_array() for im in images])
        return fuse_scores(feats, self.params)

    def route(self, images) -> np.ndarray:
        return assign_granularities(self.scores(images), self.thresholds)


class FixedRouting:
    name = "fixed"

    def __init__(self, level: int):
        if level not in (1, 2, 3):
            raise ValueError("fixed routing level must be 1, 2 or 3")
        self.level = level

    def route(self, images) -> np.ndarray:
        return np.full(len(images), self.level, dtype=np.int64)


class RandomRouting:
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def route(self, images) -> np.ndarray:
        return np.random.default_rng(self.seed).integers(1, 4, size=len(images))


def parse_routing(text: str, estimator: EstimatorParams | None = None):
    """``adaptive`` | ``fixed:<g>`` | ``random:<seed>``."""
    kind, _, arg = text.partition(":")
    if kind == "adaptive":
        if estimator is None:
            raise ValueError("adaptive routing needs estimator parameters")
        return AdaptiveRouting(estimator)
    if kind == "fixed":
        return FixedRouting(int(arg))
    if kind == "random":
        return RandomRouting(int(arg or 0))
    raise ValueError(f"unknown routing {text!r}; expected adaptive, fixed:<g> or random:<seed>")


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class FineTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch: int = 32
    epochs: int = 50
    flip: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    @classmethod
    def desk(cls, **overrides) -> "FineTrainConfig":
        return replace(cls(lr=3e-3, epochs=10), **overrides)


def decays(name: str, ndim: int) -> bool:
    """Decoupled weight decay applies to projection matrices only."""
    return name.endswith(".weight") and ndim == 2


class AdamW:
    def __init__(self, store, cfg: FineTrainConfig):
        self.store = store
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros(t.shape) for n, t in store.items()}
        self.v = {n: np.zeros(t.shape) for n, t in store.items()}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            w = p.data.astype(np.float64)
            if decays(name, p.ndim):
                w = w - lr * c.weight_decay * w
            w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = w.astype(p.data.dtype)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def _batch_loss(model: GrcViT, images, labels, routes):
    """Mean cross-entropy over the batch and the number of correct predictions."""
    n = len(labels)
    total, correct = None, 0
    for g in np.unique(routes):
        idx = np.flatnonzero(routes == g)
        logits = model.forward(images[idx], int(g))
        part = ops.scale(ops.cross_entropy(logits, labels[idx]), len(idx) / n)
        total = part if total is None else ops.add(total, part)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
    return total, correct


def evaluate(model: GrcViT, data: ToyDataset, routes, batch: int = 64) -> float:
    routes = np.asarray(routes)
    correct = 0
    for start in range(0, len(data), batch):
        sl = slice(start, start + batch)
        for g in np.unique(routes[sl]):
            idx = start + np.flatnonzero(routes[sl] == g)
            logits = model.forward(data.images[idx], int(g)).data
            correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[idx]))
    return correct / len(data)


def train_fine_toy(cfg_model: ModelConfig, data: ToyDataset, routing, cfg: FineTrainConfig,
                   test: ToyDataset | None = None, model: GrcViT | None = None):
    """Train a fresh (or given) model; returns ``(model, trace)``.

    ``trace`` holds one dict per epoch with keys epoch, loss, accuracy and,
    when ``test`` is given, test_accuracy.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= cfg_model.num_classes:
        raise ValueError(f"class label out of range [0, {cfg_model.num_classes})")
    model = model or GrcViT(cfg_model, seed=cfg.seed)
    routes = np.asarray(routing.route(data.images))
    test_routes = np.asarray(routing.route(test.images)) if test is not None else None

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total_steps = steps_per_epoch * cfg.epochs
    trace = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            images = data.images[idx]
            if cfg.flip:
                flip = rng.random(len(idx)) < 0.5
                images = np.where(flip[:, None, None, None], images[:, :, ::-1, :], images)
            model.params.zero_grad()
            with Tape() as tape:
                loss, hits = _batch_loss(model, images, data.labels[idx], routes[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
            tape.backward(loss)
            opt.step(cosine_lr(cfg.lr, step, total_steps))
            step += 1
            loss_sum += float(loss.data) * len(idx)
            correct += hits
        row = {"epoch": epoch, "loss": loss_sum / n, "accuracy": correct / n}
        if test is not None:
            row["test_accuracy"] = evaluate(model, test, test_routes)
        trace.append(row)
    return model, trace
