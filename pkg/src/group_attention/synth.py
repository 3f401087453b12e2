"""Synthetic group samples with one planted dominant face.

Each sample imitates a group photo: a whole-image context vector and a set of
face vectors. Exactly one face (the dominant one) carries the label through
its class prototype and stands out on a dedicated salience channel; every
other face points at an independently drawn, often conflicting, class. Plain
averaging mixes those conflicting votes, while a pooling step that finds the
dominant face can ignore them.

Generative process, per sample and for fixed orthonormal prototypes
``c_0..c_2`` (face space) and ``h_0..h_2`` (context space)::

    y ~ uniform{0, 1, 2}
    n ~ uniform{faces_min..faces_max},  d ~ uniform{0..n-1}
    face d        = signal * c_y      + noise * z_d,  salience = salience_gap + noise * e_d
    face j != d   = distractor * c_y' + noise * z_j,  salience = noise * e_j,  y' ~ uniform{0, 1, 2}
    context       = global_strength * h_y + fingerprint * E P z_d + noise * eta

``P`` removes the prototype directions from the dominant face's noise draw and
``E`` embeds the rest into a context subspace orthogonal to the ``h``
prototypes. This fingerprint carries no label information (and cannot be used
to denoise the class readout of the face) but lets a context-driven query pick
out the dominant face.

Every sample has its own counter-based random stream, so generation is
independent of ordering and parallelism.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .rng import DATA, make_rng

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
CLASS_NAMES = ("Negative", "Neutral", "Positive")
PARTITIONS = ("train", "val", "eval")
_PROTOTYPE_SEED = 2018


@dataclass
class GroupSample:
    id: str
    global_context: np.ndarray
    faces: np.ndarray
    label: int
    dominant_index: Optional[int] = None

    def __post_init__(self):
        self.global_context = np.asarray(self.global_context, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.float64)
        if self.faces.ndim != 2 or self.faces.shape[0] < 1:
            raise ValueError(f"sample {self.id!r}: need at least one face, got shape {self.faces.shape}")
        if self.label not in (0, 1, 2):
            raise ValueError(f"sample {self.id!r}: label must be 0, 1 or 2, got {self.label!r}")
        if self.dominant_index is not None and not 0 <= self.dominant_index < len(self.faces):
            raise ValueError(f"sample {self.id!r}: dominant index {self.dominant_index} out of range")

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def permuted(self, order) -> "GroupSample":
        order = np.asarray(order)
        dom = None if self.dominant_index is None else int(np.flatnonzero(order == self.dominant_index)[0])
        return GroupSample(self.id, self.global_context, self.faces[order], self.label, dom)


@dataclass
class DatasetConfig:
    n_train: int = 4000
    n_val: int = 1000
    n_eval: int = 1000
    faces_min: int = 1
    faces_max: int = 8
    signal: float = 3.0
    distractor: float = 1.5
    salience_gap: float = 4.5
    noise: float = 1.0
    global_strength: float = 1.5
    fingerprint: float = 1.0
    face_dim: int = 32
    global_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if min(self.n_train, self.n_val, self.n_eval) < 0:
            problems.append("partition sizes must be non-negative")
        if not 1 <= self.faces_min <= self.faces_max:
            problems.append(f"need 1 <= faces_min <= faces_max, got {self.faces_min}..{self.faces_max}")
        if not self.signal >= self.distractor >= 0:
            problems.append(f"need signal >= distractor >= 0, got {self.signal} and {self.distractor}")
        if not self.noise > 0:
            problems.append(f"noise must be positive, got {self.noise}")
        if self.face_dim < NUM_CLASSES:
            problems.append(f"face_dim must be at least {NUM_CLASSES}")
        if self.global_dim < self.face_dim + NUM_CLASSES:
            problems.append(f"global_dim must be at least face_dim + {NUM_CLASSES}")
        if problems:
            raise ValueError("invalid dataset config: " + "; ".join(problems))

    @property
    def face_input_dim(self) -> int:
        return self.face_dim + 1

    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "eval": self.n_eval}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Prototypes:
    face: np.ndarray  # (3, face_dim)
    context: np.ndarray  # (3, global_dim)
    embed: np.ndarray  # (global_dim, face_dim), prototype directions already projected out


def prototypes(face_dim: int, global_dim: int) -> Prototypes:
    """Fixed orthonormal class directions; identical for every seed."""
    rng = make_rng(_PROTOTYPE_SEED, face_dim, global_dim)
    qf, _ = np.linalg.qr(rng.standard_normal((face_dim, face_dim)))
    qg, _ = np.linalg.qr(rng.standard_normal((global_dim, global_dim)))
    face = qf[:, :NUM_CLASSES].T.copy()
    off_class = np.eye(face_dim) - face.T @ face
    return Prototypes(
        face=face,
        context=qg[:, face_dim : face_dim + NUM_CLASSES].T.copy(),
        embed=qg[:, :face_dim] @ off_class,
    )


def generate_sample(config: DatasetConfig, protos: Prototypes, partition: int, index: int, sample_id: str):
    rng = make_rng(config.seed, DATA, partition, index)
    y = int(rng.integers(NUM_CLASSES))
    n = int(rng.integers(config.faces_min, config.faces_max + 1))
    d = int(rng.integers(n))
    faces = np.empty((n, config.face_input_dim))
    noise = config.noise * rng.standard_normal((n, config.face_dim))
    salience = config.noise * rng.standard_normal(n)
    for j in range(n):
        if j == d:
            faces[j, :-1] = config.signal * protos.face[y] + noise[j]
            faces[j, -1] = config.salience_gap + salience[j]
        else:
            other = int(rng.integers(NUM_CLASSES))
            faces[j, :-1] = config.distractor * protos.face[other] + noise[j]
            faces[j, -1] = salience[j]
    context = (
        config.global_strength * protos.context[y]
        + config.fingerprint * protos.embed @ noise[d]
        + config.noise * rng.standard_normal(config.global_dim)
    )
    return GroupSample(sample_id, context, faces, y, d)


def generate_partition(config: DatasetConfig, name: str, count: Optional[int] = None) -> list[GroupSample]:
    part = PARTITIONS.index(name)
    count = config.sizes()[name] if count is None else count
    protos = prototypes(config.face_dim, config.global_dim)
    return [generate_sample(config, protos, part, i, f"{name}-{i:06d}") for i in range(count)]


def generate_dataset(config: DatasetConfig) -> dict[str, list[GroupSample]]:
    """Train, VAL and EVAL partitions; a pure function of ``config``."""
    config.validate()
    return {name: generate_partition(config, name) for name in PARTITIONS}


def salience_argmax(sample: GroupSample) -> int:
    return int(np.argmax(sample.faces[:, -1]))


def oracle_predict(config: DatasetConfig, protos: Prototypes, sample: GroupSample) -> int:
    """Known-model rule: take the most salient face, then match prototypes.

    The class score adds the matched-filter responses of that face and of the
    context, each weighted by its signal-to-noise ratio.
    """
    face = sample.faces[salience_argmax(sample), :-1]
    scores = config.signal * (protos.face @ face) + config.global_strength * (protos.context @ sample.global_context)
    return int(np.argmax(scores))


def bayes_oracle_accuracy(config: DatasetConfig, n_mc: int = 20000, seed_offset: int = 7919) -> tuple[float, float]:
    """Monte-Carlo accuracy of :func:`oracle_predict` with its 95% half-width.

    Trials use a seed disjoint from ``config.seed`` so they never coincide
    with the generated partitions.
    """
    if n_mc < 1000:
        raise ValueError(f"n_mc must be at least 1000 for a usable estimate, got {n_mc}")
    cfg = DatasetConfig(**{**config.to_dict(), "seed": config.seed + seed_offset})
    protos = prototypes(cfg.face_dim, cfg.global_dim)
    hits = 0
    for i in range(n_mc):
        s = generate_sample(cfg, protos, 0, i, "mc")
        hits += oracle_predict(cfg, protos, s) == s.label
    p = hits / n_mc
    return p, 1.96 * math.sqrt(max(p * (1 - p), 1e-12) / n_mc)


# --- line-delimited files ---------------------------------------------------

_KNOWN_FIELDS = {"id", "label", "global", "faces", "dominant"}


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


def sample_to_record(sample: GroupSample) -> dict:
    rec = {
        "id": sample.id,
        "label": int(sample.label),
        "global": sample.global_context.tolist(),
        "faces": sample.faces.tolist(),
    }
    if sample.dominant_index is not None:
        rec["dominant"] = int(sample.dominant_index)
    return rec


def write_dataset(samples: Iterable[GroupSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def _parse_record(rec, path, lineno: int) -> GroupSample:
    if not isinstance(rec, dict):
        raise DatasetFormatError(path, lineno, "record is not a JSON object")
    for key in ("id", "label", "global", "faces"):
        if key not in rec:
            raise DatasetFormatError(path, lineno, f"missing field {key!r}")
    unknown = sorted(set(rec) - _KNOWN_FIELDS)
    if unknown:
        warnings.warn(f"{path}:{lineno}: ignoring unknown fields {unknown}", stacklevel=3)
    label, dom = rec["label"], rec.get("dominant")
    if not isinstance(rec["id"], str):
        raise DatasetFormatError(path, lineno, "field 'id' must be a string")
    if isinstance(label, bool) or not isinstance(label, int):
        raise DatasetFormatError(path, lineno, "field 'label' must be an integer")
    if dom is not None and (isinstance(dom, bool) or not isinstance(dom, int)):
        raise DatasetFormatError(path, lineno, "field 'dominant' must be an integer")
    try:
        context = np.asarray(rec["global"], dtype=np.float64)
        faces = np.asarray(rec["faces"], dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(path, lineno, "'global' and 'faces' must be numeric arrays") from None
    if context.ndim != 1:
        raise DatasetFormatError(path, lineno, "'global' must be a flat number array")
    if faces.ndim != 2:
        raise DatasetFormatError(path, lineno, "'faces' must be a non-empty array of equal-length number arrays")
    try:
        return GroupSample(rec["id"], context, faces, label, dom)
    except ValueError as exc:
        raise DatasetFormatError(path, lineno, str(exc)) from None


def read_dataset(path) -> list[GroupSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            samples.append(_parse_record(rec, path, lineno))
    return samples


def write_splits(dataset: dict[str, list[GroupSample]], out_dir, config: DatasetConfig) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, samples in dataset.items():
        paths[name] = out / f"{name}.jsonl"
        write_dataset(samples, paths[name])
    meta = {"config": config.to_dict(), "sizes": {k: len(v) for k, v in dataset.items()}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_splits(data_dir) -> dict[str, list[GroupSample]]:
    d = Path(data_dir)
    return {name: read_dataset(d / f"{name}.jsonl") for name in PARTITIONS if (d / f"{name}.jsonl").exists()}


@dataclass
class SplitSpec:
    sizes: dict[str, int] = field(default_factory=dict)

    @classmethod
    def of(cls, dataset: dict[str, list[GroupSample]]) -> "SplitSpec":
        ids = [s.id for part in dataset.values() for s in part]
        if len(ids) != len(set(ids)):
            raise ValueError("partitions share sample ids")
        return cls({k: len(v) for k, v in dataset.items()})

    @property
    def total(self) -> int:
        return sum(self.sizes.values())
