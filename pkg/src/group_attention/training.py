"""Mini-batch SGD with step learning-rate decay, and accuracy reporting."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import GroupEmotionModel, collate
from .rng import DROPOUT, SHUFFLE, make_rng
from .synth import CLASS_NAMES, NUM_CLASSES, GroupSample
from .tensor import backward

logger = logging.getLogger(__name__)

# Column order of the report: Positive, Neutral, Negative, Overall.
REPORT_ORDER = (2, 1, 0)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.001
    decay_factor: float = 10.0
    decay_period: int = 9
    epochs: int = 27
    momentum: float = 0.9
    seed: int = 0
    merge_val: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs two rows)")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.decay_period < 1:
            raise ValueError("decay_period must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """``lr0`` divided by ``decay_factor`` once per completed ``decay_period`` epochs (0-based)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 / config.decay_factor ** (epoch // config.decay_period)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: Optional[float] = None

    def line(self) -> str:
        val = "n/a" if self.val_accuracy is None else f"{self.val_accuracy:.4f}"
        return f"epoch={self.epoch} lr={self.lr:.6g} train_loss={self.train_loss:.6f} val_acc={val}"


class SGD:
    """SGD with classical momentum: ``v = m * v + g; p -= lr * v``."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= np.asarray(lr, dtype=p.dtype) * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if chunks and len(chunks[-1]) == 1:
        logger.info("dropping a final mini-batch of size 1 (batch norm needs two rows)")
        chunks.pop()
    return chunks


def train(
    model: GroupEmotionModel,
    samples: Sequence[GroupSample],
    config: TrainConfig,
    val: Optional[Sequence[GroupSample]] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> tuple[GroupEmotionModel, list[EpochLog]]:
    """Train in place; the returned model is left in eval mode."""
    if not samples:
        raise ValueError("cannot train on an empty partition")
    samples = list(samples)
    opt = SGD(model.parameters(), config.momentum)
    drop_rng = make_rng(config.seed, DROPOUT)
    history = []
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        model.train()
        losses, weights = [], []
        for idx in _batches(len(samples), config.batch_size, make_rng(config.seed, SHUFFLE, epoch)):
            batch = collate([samples[i] for i in idx], model.dtype)
            opt.zero_grad()
            loss, _ = model.batch_loss(batch, training=True, rng=drop_rng)
            backward(loss)
            opt.step(lr)
            losses.append(loss.item())
            weights.append(len(idx))
        model.eval()
        val_acc = evaluate(model, val).overall if val else None
        entry = EpochLog(epoch, lr, float(np.average(losses, weights=weights)), val_acc)
        history.append(entry)
        logger.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
    model.eval()
    return model, history


# --- metrics ----------------------------------------------------------------


@dataclass
class Metrics:
    confusion: np.ndarray
    per_class: dict[str, Optional[float]] = field(default_factory=dict)
    overall: float = 0.0

    def headline(self) -> list[tuple[str, Optional[float]]]:
        rows = [(CLASS_NAMES[c], self.per_class[CLASS_NAMES[c]]) for c in REPORT_ORDER]
        return rows + [("Overall", self.overall)]

    def table(self) -> str:
        cols = self.headline()
        head = " ".join(f"{name:>9}" for name, _ in cols)
        vals = " ".join(f"{'n/a':>9}" if v is None else f"{100 * v:8.2f}%" for _, v in cols)
        return f"{head}\n{vals}"

    def to_record(self) -> dict:
        rec = {name.lower(): v for name, v in self.headline()}
        rec["confusion"] = self.confusion.tolist()
        rec["total"] = int(self.confusion.sum())
        return rec


def compute_metrics(confusion) -> Metrics:
    """Rows of ``confusion`` are true labels, columns predictions.

    Overall accuracy is correct / total, not the mean of per-class rates.
    Classes without support are reported as ``None``.
    """
    c = np.asarray(confusion)
    if c.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(c < 0):
        raise ValueError(f"confusion must be a non-negative {NUM_CLASSES}x{NUM_CLASSES} matrix")
    total = c.sum()
    if total == 0:
        raise ValueError("confusion matrix is all zeros")
    support = c.sum(axis=1)
    per_class = {
        CLASS_NAMES[k]: (float(c[k, k] / support[k]) if support[k] else None) for k in range(NUM_CLASSES)
    }
    return Metrics(c.astype(np.int64), per_class, float(np.trace(c) / total))


def confusion_matrix(labels, predictions) -> np.ndarray:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def metrics_from_probs(labels, probs) -> Metrics:
    return compute_metrics(confusion_matrix(labels, np.argmax(np.asarray(probs), axis=1)))


def evaluate(model: GroupEmotionModel, samples: Sequence[GroupSample]) -> Metrics:
    if not samples:
        raise ValueError("cannot evaluate on an empty partition")
    return metrics_from_probs([s.label for s in samples], model.predict_proba(list(samples)))
