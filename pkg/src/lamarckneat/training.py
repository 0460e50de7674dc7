"""Epoch training and accuracy for compiled networks."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .assembly import CompiledNetwork
from .datasets import Dataset, batches
from .tensor_engine import softmax_cross_entropy

EVAL_BATCH = 256


class TrainingDiverged(FloatingPointError):
    """The loss became NaN or infinite."""


def train_epochs(net: CompiledNetwork, data: Dataset, epochs: int, batch_size: int, lr: float,
                 rng: np.random.Generator, only: Optional[Sequence[int]] = None) -> list[float]:
    """Adam over shuffled mini-batches; returns the mean loss of each epoch."""
    history = []
    for _ in range(epochs):
        total = 0.0
        for x, y in batches(data, batch_size, shuffle=True, rng=rng):
            logits, caches = net.forward(x, "train", rng)
            loss, grad = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss}")
            net.apply_gradients(net.backward(caches, grad), lr, only)
            total += loss * len(y)
        history.append(total / max(1, len(data)))
    return history


def predict(net: CompiledNetwork, images: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    preds = []
    for s in range(0, len(images), batch_size):
        logits, _ = net.forward(images[s:s + batch_size], "infer")
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def accuracy(net: CompiledNetwork, data: Dataset, batch_size: int = EVAL_BATCH) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(net, data.images, batch_size) == data.labels))


def mean_loss(net: CompiledNetwork, data: Dataset, batch_size: int = EVAL_BATCH) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        logits, _ = net.forward(data.images[s:s + batch_size], "infer")
        loss, _ = softmax_cross_entropy(logits, data.labels[s:s + batch_size])
        total += loss * len(logits)
    return total / max(1, len(data))
