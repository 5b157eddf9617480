"""Optimizers and the training loop.

Task parameters are split into two groups: masks, k coefficients and batch
norm parameters go to Adam, the classifier goes to SGD with momentum.  Both
learning rates drop by 10x at the decay epoch.
"""
from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .layers import softmax_xent
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGDMomentum:
    """v <- mu * v + g;  p <- p - lr * v."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.t = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = (p.data - self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Schedule:
    epochs: int = 20
    decay_epoch: int = 15
    batch_size: int = 32
    adam_lr: float = 1e-4
    sgd_lr: float = 1e-3
    momentum: float = 0.9
    mirror: bool = False
    prefetch: int = 0  # >0: batches assembled by a producer thread through a bounded queue

    def __post_init__(self):
        if not 0 <= self.decay_epoch < self.epochs:
            raise ValueError(f"decay epoch {self.decay_epoch} must lie in [0, {self.epochs})")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.prefetch < 0:
            raise ValueError("prefetch must be non-negative")

    def factor(self, epoch: int) -> float:
        return 0.1 if epoch >= self.decay_epoch else 1.0

    def lrs(self, epoch: int) -> dict:
        if epoch >= self.decay_epoch:
            return {"adam": self.adam_lr / 10, "sgd": self.sgd_lr / 10}
        return {"adam": self.adam_lr, "sgd": self.sgd_lr}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Schedule":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w]
    labels: np.ndarray  # [n]
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)


def predict(network, data: Dataset, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(data), batch_size):
        logits = network(Tensor(data.images[start:start + batch_size]), training=False)
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _epoch_batches(data: Dataset, schedule: Schedule, rng: np.random.Generator):
    for idx in _batches(len(data), schedule.batch_size, rng):
        x = data.images[idx]
        if schedule.mirror:
            flip = rng.random(len(idx)) < 0.5
            x = np.where(flip[:, None, None, None], x[..., ::-1], x)
        yield x, data.labels[idx]


def _prefetched(gen, depth: int):
    # the producer is the only consumer of rng while it runs, so batch order
    # is unchanged; the queue just overlaps assembly with compute
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def produce():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    worker.join()


def train_task(
    network,
    data: Dataset,
    schedule: Schedule,
    rng: np.random.Generator,
    metrics_path: Optional[Path] = None,
    eval_data: Optional[Dataset] = None,
) -> list:
    """Minimize softmax cross-entropy; return one metrics dict per epoch (and split).

    ``network`` must be callable as ``network(x, training)`` and expose
    ``parameter_groups()`` returning ``{"adam": [...], "sgd": [...]}``.
    """
    groups = network.parameter_groups()
    adam = Adam(groups.get("adam", []), lr=schedule.adam_lr)
    sgd = SGDMomentum(groups.get("sgd", []), lr=schedule.sgd_lr, momentum=schedule.momentum)
    history = []
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)

    for epoch in range(schedule.epochs):
        lrs = schedule.lrs(epoch)
        adam.lr, sgd.lr = lrs["adam"], lrs["sgd"]
        total_loss, correct, seen = 0.0, 0, 0
        stream = _epoch_batches(data, schedule, rng)
        if schedule.prefetch:
            stream = _prefetched(stream, schedule.prefetch)
        for b, (x, y) in enumerate(stream):
            adam.zero_grad()
            sgd.zero_grad()
            logits = network(Tensor(x), training=True)
            loss = softmax_xent(logits, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}, lrs {lrs}")
            backward(loss)
            adam.step()
            sgd.step()
            total_loss += value * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        rows = [{"epoch": epoch, "split": "train", "loss": total_loss / max(seen, 1), "accuracy": correct / max(seen, 1), "lrs": lrs}]
        if eval_data is not None:
            acc = float((predict(network, eval_data) == eval_data.labels).mean())
            rows.append({"epoch": epoch, "split": "test", "loss": None, "accuracy": acc, "lrs": lrs})
        for row in rows:
            log.debug("epoch %(epoch)d %(split)s loss=%(loss)s acc=%(accuracy).4f", row)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")
        history.extend(rows)
    return history
