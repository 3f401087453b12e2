"""Report figures written next to the line-delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import CLASS_NAMES  # noqa: E402

REPORT_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width: float = 4.0, ratio: float = 0.75):
    return plt.subplots(figsize=(width, width * ratio))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_confusion(confusion, path, title: str = "Confusion (rows: true)") -> Path:
    cm = np.asarray(confusion)
    with plt.rc_context(REPORT_RC):
        fig, ax = _figure(3.6, 1.0)
        ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(3), CLASS_NAMES)
        ax.set_yticks(range(3), CLASS_NAMES)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        peak = cm.max() if cm.size else 0
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", color="white" if v > peak / 2 else "black")
        return _save(fig, path)


def plot_attention(weights: Sequence[np.ndarray], path, dominant: Optional[Sequence[Optional[int]]] = None) -> Path:
    """Histogram of the largest face weight per sample, and of the weight on the planted face if known."""
    top = [float(np.max(w)) for w in weights]
    with plt.rc_context(REPORT_RC):
        fig, ax = _figure()
        bins = np.linspace(0, 1, 21)
        ax.hist(top, bins=bins, alpha=0.6, label="max weight")
        if dominant is not None:
            planted = [float(w[d]) for w, d in zip(weights, dominant) if d is not None]
            if planted:
                ax.hist(planted, bins=bins, alpha=0.6, label="weight on planted face")
        ax.set_xlabel("attention weight")
        ax.set_ylabel("samples")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_training_curve(history, path) -> Path:
    epochs = [h.epoch for h in history]
    with plt.rc_context(REPORT_RC):
        fig, ax = _figure()
        ax.plot(epochs, [h.train_loss for h in history], marker="o", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        val = [h.val_accuracy for h in history]
        if any(v is not None for v in val):
            ax2 = ax.twinx()
            ax2.plot(epochs, [np.nan if v is None else v for v in val], color="C1", marker="s", ms=3)
            ax2.set_ylabel("VAL accuracy", color="C1")
        return _save(fig, path)

