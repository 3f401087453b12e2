"""Trainable feature extractors for the whole-image and per-face branches.

Both are plain multi-layer perceptrons with rectified-linear activations
between layers; the last layer is linear. The face encoder is applied row-wise
with shared weights, so it commutes with any reordering of the faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, add, matmul, relu, reshape, transpose


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"encoder widths must be positive, got {widths}")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def is_identity(self) -> bool:
        return not self.hidden_widths and self.output_dim == self.input_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    def param_shapes(self, prefix: str) -> dict[str, tuple[int, ...]]:
        if self.is_identity:
            return {}
        shapes = {}
        w = self.widths
        for i in range(len(w) - 1):
            shapes[f"{prefix}.{i}.weight"] = (w[i + 1], w[i])
            shapes[f"{prefix}.{i}.bias"] = (w[i + 1],)
        return shapes


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_encoder(config: EncoderConfig, prefix: str, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in config.param_shapes(prefix).items():
        if name.endswith(".weight"):
            data = glorot_uniform(rng, shape[1], shape[0], shape)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def run_encoder(
    config: EncoderConfig,
    params: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    training: bool = False,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Map rows ``(n, input_dim)`` to ``(n, output_dim)``.

    Dropout is applied after each hidden layer in train mode; the output layer
    is left alone.
    """
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"{prefix} encoder expects rows of width {config.input_dim}, got shape {x.shape}")
    if config.is_identity:
        return x
    n_layers = len(config.widths) - 1
    h = x
    for i in range(n_layers):
        h = add(matmul(h, transpose(params[f"{prefix}.{i}.weight"])), params[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            h = F.dropout(relu(h), dropout, training, rng)
    return h


def encode_global(config, params, context, training=False, dropout=0.0, rng=None, prefix="global") -> Tensor:
    """Encode one whole-image context vector into a ``(output_dim,)`` feature."""
    context = context if isinstance(context, Tensor) else Tensor(np.asarray(context, dtype=np.float32))
    if context.ndim != 1:
        raise ShapeError(f"global context must be a vector, got shape {context.shape}")
    out = run_encoder(config, params, prefix, reshape(context, (1, -1)), training, dropout, rng)
    return reshape(out, (config.output_dim,))


def encode_faces(config, params, faces, training=False, dropout=0.0, rng=None, prefix="face") -> Tensor:
    """Encode ``n`` raw face vectors with shared weights into an ``(n, output_dim)`` matrix."""
    faces = faces if isinstance(faces, Tensor) else Tensor(np.asarray(faces, dtype=np.float32))
    if faces.ndim != 2 or faces.shape[0] == 0:
        raise ValueError(f"need at least one face as an (n, d) matrix, got shape {faces.shape}")
    return run_encoder(config, params, prefix, faces, training, dropout, rng)
