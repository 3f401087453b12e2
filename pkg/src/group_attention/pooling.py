"""Pooling of a variable-size set of face features into one vector.

Four mechanisms are provided:

``average``
    Column mean of the face features, uniform weights.
``a``
    Dot-product attention with the global feature as the query.
``b``
    As ``a``, but the query is first passed through an intermediate fully
    connected layer mapping the global feature to the face feature width.
``c``
    A small two-layer network scores each face on its own; the weights are the
    softmax of those scores.

Every mechanism returns ``(pooled, weights)``. The batched ``*_sets``
functions operate on flat rows plus set offsets (see
:mod:`group_attention.functional`); the per-sample functions wrap them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .encoders import glorot_uniform
from .tensor import ShapeError, Tensor, add, matmul, mul, relu, reshape, rowdot

SCORER_HIDDEN = 64


class Mechanism(str, enum.Enum):
    AVERAGE = "average"
    A = "a"
    B = "b"
    C = "c"

    @classmethod
    def parse(cls, value) -> "Mechanism":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"avg": "average", "mean": "average", "attention_a": "a", "attention_b": "b", "attention_c": "c"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown pooling mechanism {value!r}; choose average, a, b or c") from None

    @property
    def needs_context(self) -> bool:
        return self in (Mechanism.A, Mechanism.B)


@dataclass(frozen=True)
class PoolingConfig:
    mechanism: Mechanism
    face_dim: int
    global_dim: int
    scaled: bool = False
    proj_relu: bool = False
    scorer_hidden: int = SCORER_HIDDEN

    def param_shapes(self, prefix: str = "pool") -> dict[str, tuple[int, ...]]:
        if self.mechanism is Mechanism.B:
            return {f"{prefix}.proj.weight": (self.global_dim, self.face_dim), f"{prefix}.proj.bias": (self.face_dim,)}
        if self.mechanism is Mechanism.C:
            h = self.scorer_hidden
            return {
                f"{prefix}.scorer.0.weight": (self.face_dim, h),
                f"{prefix}.scorer.0.bias": (h,),
                f"{prefix}.scorer.1.weight": (h, 1),
                f"{prefix}.scorer.1.bias": (1,),
            }
        return {}


def init_pooling(config: PoolingConfig, rng: np.random.Generator, prefix: str = "pool") -> dict[str, Tensor]:
    params = {}
    for name, shape in config.param_shapes(prefix).items():
        if name.endswith(".weight"):
            data = glorot_uniform(rng, shape[0], shape[1], shape)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


# --- batched forms ----------------------------------------------------------


def _uniform_weights(offsets: np.ndarray, dtype) -> Tensor:
    counts = np.diff(offsets)
    return Tensor(np.repeat(1.0 / counts, counts).astype(dtype))


def average_sets(faces: Tensor, offsets: np.ndarray) -> tuple[Tensor, Tensor]:
    w = _uniform_weights(offsets, faces.dtype)
    return F.segment_weighted_sum(w, faces, offsets), w


def dot_attention_sets(faces: Tensor, query: Tensor, offsets: np.ndarray, scaled: bool = False):
    """Query ``(B, d)`` against keys ``(N, d)``; softmax within each set."""
    if query.ndim != 2 or query.shape[1] != faces.shape[1]:
        raise ShapeError(f"attention query {query.shape} does not match face features {faces.shape}")
    scores = rowdot(faces, F.expand_rows(query, offsets))
    if scaled:
        scores = mul(scores, 1.0 / np.sqrt(faces.shape[1]))
    w = F.segment_softmax(scores, offsets)
    return F.segment_weighted_sum(w, faces, offsets), w


def intermediate_query(context: Tensor, weight: Tensor, bias: Tensor, use_relu: bool = False) -> Tensor:
    if context.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"projection {weight.shape} + bias {bias.shape} cannot map context {context.shape}")
    q = add(matmul(context, weight), bias)
    return relu(q) if use_relu else q


def face_scores(faces: Tensor, params: dict[str, Tensor], prefix: str = "pool") -> Tensor:
    w1 = params[f"{prefix}.scorer.0.weight"]
    if faces.shape[1] != w1.shape[0]:
        raise ShapeError(f"scorer expects face width {w1.shape[0]}, got {faces.shape}")
    h = relu(add(matmul(faces, w1), params[f"{prefix}.scorer.0.bias"]))
    s = add(matmul(h, params[f"{prefix}.scorer.1.weight"]), params[f"{prefix}.scorer.1.bias"])
    return reshape(s, (faces.shape[0],))


def score_attention_sets(faces: Tensor, params: dict[str, Tensor], offsets: np.ndarray, prefix: str = "pool"):
    w = F.segment_softmax(face_scores(faces, params, prefix), offsets)
    return F.segment_weighted_sum(w, faces, offsets), w


def pool_sets(
    config: PoolingConfig,
    params: dict[str, Tensor],
    faces: Tensor,
    offsets,
    context: Optional[Tensor] = None,
    prefix: str = "pool",
) -> tuple[Tensor, Tensor]:
    """Pool every set of a flat batch; returns ``(B, face_dim)`` and flat ``(N,)`` weights."""
    offsets = F.check_offsets(offsets, faces.shape[0])
    mech = config.mechanism
    if mech.needs_context and context is None:
        raise ValueError(f"mechanism {mech.value!r} needs the global context vector")
    if mech is Mechanism.AVERAGE:
        return average_sets(faces, offsets)
    if mech is Mechanism.A:
        return dot_attention_sets(faces, context, offsets, config.scaled)
    if mech is Mechanism.B:
        q = intermediate_query(context, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], config.proj_relu)
        return dot_attention_sets(faces, q, offsets, config.scaled)
    return score_attention_sets(faces, params, offsets, prefix)


# --- single set -------------------------------------------------------------


def _as_matrix(faces) -> Tensor:
    faces = faces if isinstance(faces, Tensor) else Tensor(faces)
    if faces.ndim != 2 or faces.shape[0] == 0:
        raise ValueError(f"need at least one face feature row, got shape {faces.shape}")
    return faces


def _single(offsets_n: int):
    return np.array([0, offsets_n])


def _vector_as_row(g) -> Tensor:
    g = g if isinstance(g, Tensor) else Tensor(g)
    if g.ndim != 1:
        raise ShapeError(f"context must be a vector, got shape {g.shape}")
    return reshape(g, (1, g.shape[0]))


def _unbatch(pooled: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    return reshape(pooled, (pooled.shape[1],)), w


def pool_average(faces) -> tuple[Tensor, Tensor]:
    faces = _as_matrix(faces)
    return _unbatch(*average_sets(faces, _single(faces.shape[0])))


def pool_attention_a(faces, context, scaled: bool = False) -> tuple[Tensor, Tensor]:
    faces = _as_matrix(faces)
    g = _vector_as_row(context)
    return _unbatch(*dot_attention_sets(faces, g, _single(faces.shape[0]), scaled))


def pool_attention_b(faces, context, weight: Tensor, bias: Tensor, use_relu=False, scaled=False):
    faces = _as_matrix(faces)
    q = intermediate_query(_vector_as_row(context), weight, bias, use_relu)
    return _unbatch(*dot_attention_sets(faces, q, _single(faces.shape[0]), scaled))


def pool_attention_c(faces, params: dict[str, Tensor], prefix: str = "pool"):
    faces = _as_matrix(faces)
    return _unbatch(*score_attention_sets(faces, params, _single(faces.shape[0]), prefix))


def pool(config: PoolingConfig, params: dict[str, Tensor], faces, context=None, prefix: str = "pool"):
    """Dispatch a single face set to its mechanism."""
    faces = _as_matrix(faces)
    g = None if context is None else _vector_as_row(context)
    return _unbatch(*pool_sets(config, params, faces, _single(faces.shape[0]), g, prefix))


def most_important_face(weights) -> int:
    """Index of the largest attention weight, lowest index on ties."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return int(np.argmax(w))
