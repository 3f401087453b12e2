"""Differentiable layers built on :mod:`group_attention.tensor`.

Softmax variants, classification losses, batch normalization, dropout and the
segment operations used to process a mini-batch of variable-size face sets in
one pass. A batch of sets is stored flat as ``(N, d)`` rows plus ``offsets`` of
length ``B + 1``; set ``b`` owns rows ``offsets[b]:offsets[b + 1]``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _result

CE_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0:
        raise ValueError("softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0:
        raise ValueError("log_softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def grad_fn(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn, "log_softmax")


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes}), got {labels.tolist()}")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log(max(p[label], 1e-12))`` over rows of a probability matrix (or one vector)."""
    p = probs.data if probs.ndim == 2 else probs.data[None, :]
    labels = _check_labels(labels, p.shape[1])
    if len(labels) != p.shape[0]:
        raise ShapeError(f"cross_entropy: {p.shape[0]} rows but {len(labels)} labels")
    rows = np.arange(len(labels))
    picked = p[rows, labels]
    clamped = np.maximum(picked, CE_EPS)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.dtype)
    shape = probs.shape

    def grad_fn(g):
        dp = np.zeros_like(p)
        dp[rows, labels] = np.where(picked > CE_EPS, -1.0 / clamped, 0.0) / len(labels)
        return ((g * dp).reshape(shape),)

    return _result(loss, (probs,), grad_fn, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused, numerically stable ``cross_entropy(softmax(logits), labels)`` averaged over rows."""
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    labels = _check_labels(labels, z.shape[1])
    if len(labels) != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {z.shape[0]} rows but {len(labels)} labels")
    rows = np.arange(len(labels))
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    shape = logits.shape

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((g * d / len(labels)).reshape(shape),)

    return _result(loss, (logits,), grad_fn, "softmax_cross_entropy")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-feature normalization of a ``(B, D)`` batch.

    Training mode uses the biased batch variance and updates the running
    statistics in place; eval mode normalizes with the running statistics.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: batch {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    if training:
        b = xd.shape[0]
        if b < 2:
            raise ValueError(f"batch_norm in train mode needs at least 2 rows, got {b}")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv_std
    gd = gamma.data
    out = xhat * gd + beta.data

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        if training:
            n = xd.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), grad_fn, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --- segment operations -----------------------------------------------------


def check_offsets(offsets: Sequence[int], n_rows: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0 or offsets[-1] != n_rows:
        raise ShapeError(f"offsets {offsets.tolist()} do not partition {n_rows} rows")
    if np.any(np.diff(offsets) < 1):
        raise ValueError("every set needs at least one element")
    return offsets


def segment_ids(offsets: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def segment_softmax(scores: Tensor, offsets: np.ndarray) -> Tensor:
    """Softmax of a flat ``(N,)`` score vector within each set."""
    s = scores.data
    starts = offsets[:-1]
    ids = segment_ids(offsets)
    z = s - np.maximum.reduceat(s, starts)[ids]
    e = np.exp(z)
    y = e / np.add.reduceat(e, starts)[ids]

    def grad_fn(g):
        inner = np.add.reduceat(g * y, starts)[ids]
        return (y * (g - inner),)

    return _result(y, (scores,), grad_fn, "segment_softmax")


def segment_weighted_sum(w: Tensor, x: Tensor, offsets: np.ndarray) -> Tensor:
    """``out[b] = sum of w[i] * x[i]`` over the rows ``i`` of set ``b``; returns ``(B, d)``."""
    if w.ndim != 1 or x.ndim != 2 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_weighted_sum: weights {w.shape} vs rows {x.shape}")
    wd, xd = w.data, x.data
    starts = offsets[:-1]
    ids = segment_ids(offsets)
    out = np.add.reduceat(wd[:, None] * xd, starts, axis=0)

    def grad_fn(g):
        gi = g[ids]
        return np.einsum("ij,ij->i", xd, gi), wd[:, None] * gi

    return _result(out, (w, x), grad_fn, "segment_weighted_sum")


def expand_rows(x: Tensor, offsets: np.ndarray) -> Tensor:
    """Repeat row ``b`` of a ``(B, d)`` matrix once per element of set ``b``."""
    if x.ndim != 2 or x.shape[0] != len(offsets) - 1:
        raise ShapeError(f"expand_rows: {x.shape} rows for {len(offsets) - 1} sets")
    ids = segment_ids(offsets)
    starts = offsets[:-1]
    return _result(x.data[ids], (x,), lambda g: (np.add.reduceat(g, starts, axis=0),), "expand_rows")
