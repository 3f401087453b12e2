"""Two-branch group emotion classifier.

Pipeline for a batch of samples::

    context -> global encoder ----------------------------> batch norm --+
    faces   -> face encoder (shared) -> pooling mechanism -> batch norm --+-> concat
            -> dropout -> linear classifier -> softmax over 3 classes

Class indices: 0 Negative, 1 Neutral, 2 Positive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .encoders import EncoderConfig, glorot_uniform, init_encoder, run_encoder
from .pooling import Mechanism, PoolingConfig, init_pooling, pool_sets
from .rng import DROPOUT, INIT, make_rng
from .synth import NUM_CLASSES, GroupSample
from .tensor import ShapeError, Tensor, add, concat, matmul

DEFAULT_FEATURE_DIM = 256
COMPACT_FEATURE_DIM = 64


@dataclass(frozen=True)
class ModelConfig:
    mechanism: Mechanism = Mechanism.C
    global_input_dim: int = 64
    face_input_dim: int = 33
    global_dim: int = DEFAULT_FEATURE_DIM
    face_dim: Optional[int] = None
    global_hidden: tuple[int, ...] = ()
    face_hidden: tuple[int, ...] = ()
    dropout: float = 0.5
    scaled_attention: bool = False
    proj_relu: bool = False
    scorer_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism.parse(self.mechanism))
        object.__setattr__(self, "global_hidden", tuple(int(w) for w in self.global_hidden))
        object.__setattr__(self, "face_hidden", tuple(int(w) for w in self.face_hidden))
        if self.face_dim is None:
            dim = COMPACT_FEATURE_DIM if self.mechanism is Mechanism.B else DEFAULT_FEATURE_DIM
            object.__setattr__(self, "face_dim", dim)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mechanism is Mechanism.A and self.global_dim != self.face_dim:
            raise ValueError(
                f"mechanism 'a' compares global and face features directly; "
                f"global_dim {self.global_dim} != face_dim {self.face_dim}"
            )

    @property
    def global_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.global_input_dim, self.global_dim, self.global_hidden)

    @property
    def face_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.face_input_dim, self.face_dim, self.face_hidden)

    @property
    def pooling(self) -> PoolingConfig:
        return PoolingConfig(
            self.mechanism, self.face_dim, self.global_dim, self.scaled_attention, self.proj_relu, self.scorer_hidden
        )

    @property
    def fused_dim(self) -> int:
        return self.global_dim + self.face_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mechanism"] = self.mechanism.value
        d["global_hidden"] = list(self.global_hidden)
        d["face_hidden"] = list(self.face_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        shapes.update(self.global_encoder.param_shapes("global"))
        shapes.update(self.face_encoder.param_shapes("face"))
        shapes.update(self.pooling.param_shapes("pool"))
        for branch, dim in (("bn_global", self.global_dim), ("bn_face", self.face_dim)):
            shapes[f"{branch}.gamma"] = (dim,)
            shapes[f"{branch}.beta"] = (dim,)
        shapes["classifier.weight"] = (self.fused_dim, NUM_CLASSES)
        shapes["classifier.bias"] = (NUM_CLASSES,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "bn_global.running_mean": (self.global_dim,),
            "bn_global.running_var": (self.global_dim,),
            "bn_face.running_mean": (self.face_dim,),
            "bn_face.running_var": (self.face_dim,),
        }


@dataclass
class Batch:
    contexts: np.ndarray
    faces: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def collate(samples: Sequence[GroupSample], dtype=np.float32) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty list of samples")
    counts = [s.n_faces for s in samples]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Batch(
        contexts=np.stack([s.global_context for s in samples]).astype(dtype),
        faces=np.concatenate([s.faces for s in samples]).astype(dtype),
        offsets=offsets,
        labels=np.array([s.label for s in samples], dtype=np.int64),
        ids=[s.id for s in samples],
    )


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    weights: Tensor
    offsets: np.ndarray

    def weights_per_sample(self) -> list[np.ndarray]:
        w = self.weights.data
        return [w[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


class GroupEmotionModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params=None, buffers=None):
        self.config = config
        self.seed = seed
        self.training = False
        if params is None:
            rng = make_rng(seed, INIT)
            params = {}
            params.update(init_encoder(config.global_encoder, "global", rng))
            params.update(init_encoder(config.face_encoder, "face", rng))
            params.update(init_pooling(config.pooling, rng, "pool"))
            for branch, dim in (("bn_global", config.global_dim), ("bn_face", config.face_dim)):
                params[f"{branch}.gamma"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
                params[f"{branch}.beta"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
            w = glorot_uniform(rng, config.fused_dim, NUM_CLASSES, (config.fused_dim, NUM_CLASSES))
            params["classifier.weight"] = Tensor(w, requires_grad=True)
            params["classifier.bias"] = Tensor(np.zeros(NUM_CLASSES, dtype=np.float32), requires_grad=True)
        if buffers is None:
            buffers = {
                name: (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=np.float32)
                for name, shape in config.buffer_shapes().items()
            }
        self.params: dict[str, Tensor] = params
        self.buffers: dict[str, np.ndarray] = buffers
        self.dropout_rng = make_rng(seed, DROPOUT)

    # -- state ---------------------------------------------------------------

    @property
    def dtype(self):
        return self.params["classifier.weight"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.params.items()}
        state.update(self.buffers)
        return state

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self) -> "GroupEmotionModel":
        self.training = True
        return self

    def eval(self) -> "GroupEmotionModel":
        self.training = False
        return self

    def copy(self, dtype=None) -> "GroupEmotionModel":
        dtype = dtype or self.dtype
        params = {k: Tensor(np.array(v.data, dtype=dtype), requires_grad=True) for k, v in self.params.items()}
        buffers = {k: np.array(v, dtype=dtype) for k, v in self.buffers.items()}
        m = GroupEmotionModel(self.config, self.seed, params, buffers)
        m.training = self.training
        return m

    # -- forward -------------------------------------------------------------

    def forward_batch(
        self, batch: Batch, training: Optional[bool] = None, rng: Optional[np.random.Generator] = None
    ) -> ForwardResult:
        training = self.training if training is None else training
        cfg = self.config
        if batch.contexts.shape[1] != cfg.global_input_dim:
            raise ShapeError(f"context width {batch.contexts.shape[1]} != model global input {cfg.global_input_dim}")
        if batch.faces.shape[1] != cfg.face_input_dim:
            raise ShapeError(f"face width {batch.faces.shape[1]} != model face input {cfg.face_input_dim}")
        rng = rng if rng is not None else self.dropout_rng
        p = self.params
        drop = cfg.dropout
        ctx = Tensor(np.asarray(batch.contexts, dtype=self.dtype))
        faces = Tensor(np.asarray(batch.faces, dtype=self.dtype))

        g = run_encoder(cfg.global_encoder, p, "global", ctx, training, drop, rng)
        f = run_encoder(cfg.face_encoder, p, "face", faces, training, drop, rng)
        pooled, weights = pool_sets(cfg.pooling, p, f, batch.offsets, g, "pool")

        b = self.buffers
        g_n = F.batch_norm(g, p["bn_global.gamma"], p["bn_global.beta"], b["bn_global.running_mean"], b["bn_global.running_var"], training)
        f_n = F.batch_norm(pooled, p["bn_face.gamma"], p["bn_face.beta"], b["bn_face.running_mean"], b["bn_face.running_var"], training)
        fused = F.dropout(concat([g_n, f_n], axis=1), drop, training, rng)
        logits = add(matmul(fused, p["classifier.weight"]), p["classifier.bias"])
        return ForwardResult(logits, F.softmax(logits, axis=1), weights, batch.offsets)

    def batch_loss(self, batch: Batch, training: Optional[bool] = None, rng=None) -> tuple[Tensor, ForwardResult]:
        out = self.forward_batch(batch, training, rng)
        return F.softmax_cross_entropy(out.logits, batch.labels), out

    def predict_proba(self, samples: Sequence[GroupSample], batch_size: int = 256) -> np.ndarray:
        """Eval-mode class probabilities, one row per sample."""
        rows = []
        for i in range(0, len(samples), batch_size):
            rows.append(self.forward_batch(collate(samples[i : i + batch_size], self.dtype), training=False).probs.data)
        return np.concatenate(rows) if rows else np.zeros((0, NUM_CLASSES), dtype=self.dtype)


def forward(sample: GroupSample, model: GroupEmotionModel, mode: str = "eval") -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and face attention weights for one sample."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = model.forward_batch(collate([sample], model.dtype), training=(mode == "train"))
    return out.probs.data[0], out.weights.data


def loss(probs, label) -> float:
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    return F.cross_entropy(probs, label).item()


def predict(probs) -> int:
    """Arg-max class; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(probs)))


def ensemble_probs(models: Sequence[GroupEmotionModel], samples: Sequence[GroupSample]) -> np.ndarray:
    if not models:
        raise ValueError("an ensemble needs at least one model")
    total = None
    for m in models:
        p = m.predict_proba(samples).astype(np.float64)
        total = p if total is None else total + p
    return total / len(models)


def ensemble_predict(models: Sequence[GroupEmotionModel], sample: GroupSample) -> np.ndarray:
    """Component-wise mean of the members' eval-mode class probabilities."""
    return ensemble_probs(models, [sample])[0]
