"""Mini-batch training and prediction for hybrid models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, backward
from .data import AugmentConfig, ClassificationSet, augment_batch
from .losses import cross_entropy_loss, segmentation_loss


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 0.025
    lr_min: float = 0.01
    augment: Optional[AugmentConfig] = None
    seed: int = 0


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "lr": self.lr}


def cosine_lr(base: float, minimum: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return minimum + 0.5 * (base - minimum) * (1 + math.cos(math.pi * step / (total - 1)))


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def targets_of(ds):
    return ds.labels if isinstance(ds, ClassificationSet) else ds.masks


def task_loss(task: str, logits: Tensor, targets) -> Tensor:
    if task == "classification":
        return cross_entropy_loss(logits, targets)
    return segmentation_loss(logits, targets)


class FeatureCache:
    """Backbone features of a fixed image set (the stem is frozen, so these never change)."""

    def __init__(self, model, images: np.ndarray, batch_size: int = 64):
        self.model = model
        chunks = []
        self.multi = False
        for idx in batches(len(images), batch_size, None):
            f = model.features(Tensor(images[idx]))
            self.multi = isinstance(f, (tuple, list))
            chunks.append([t.data for t in f] if self.multi else [f.data])
        self.arrays = [np.concatenate([c[k] for c in chunks]) for k in range(len(chunks[0]))]

    def get(self, idx):
        ts = [Tensor(a[idx]) for a in self.arrays]
        return tuple(ts) if self.multi else ts[0]


def _forward(model, images, idx, cache: Optional[FeatureCache]):
    if cache is not None:
        return model(None, features=cache.get(idx))
    return model(Tensor(images))


def train_model(model, ds, config: TrainConfig, params=None, cache: Optional[FeatureCache] = None) -> TrainHistory:
    """Adam with a per-epoch cosine schedule from ``lr`` down to ``lr_min``."""
    task = getattr(model, "task", "classification")
    params = params if params is not None else [p for p in model.parameters() if not p.frozen]
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 11])
    targets = targets_of(ds)
    if config.augment is None and cache is None and hasattr(model, "features"):
        cache = FeatureCache(model, ds.images)
    hist = TrainHistory()
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs)
        total, count = 0.0, 0
        for idx in batches(len(ds), config.batch_size, rng):
            y = targets[idx]
            if config.augment is not None:
                masks = y if task == "segmentation" else None
                x, m = augment_batch(ds.images[idx], masks, config.augment, rng)
                if m is not None:
                    y = m
                logits = model(Tensor(x))
            else:
                logits = _forward(model, ds.images[idx], idx, cache)
            loss = task_loss(task, logits, y)
            backward(loss, params)
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        hist.epoch_loss.append(total / count)
        hist.lr.append(opt.lr)
    return hist


def predict(model, ds, batch_size: int = 64, cache: Optional[FeatureCache] = None) -> np.ndarray:
    """Class probabilities: (N, K) for classification, (N, K, H, W) for segmentation."""
    outs = []
    for idx in batches(len(ds), batch_size, None):
        logits = _forward(model, ds.images[idx], idx, cache)
        outs.append(F.softmax(logits, axis=1).data)
    return np.concatenate(outs)


def evaluate_loss(model, ds, batch_size: int = 64, cache: Optional[FeatureCache] = None) -> float:
    task = getattr(model, "task", "classification")
    targets = targets_of(ds)
    total = 0.0
    for idx in batches(len(ds), batch_size, None):
        logits = _forward(model, ds.images[idx], idx, cache)
        total += float(task_loss(task, logits, targets[idx]).data) * len(idx)
    return total / len(ds)
