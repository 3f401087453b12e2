"""Binary model checkpoints (``.gemr``).

Layout, all integers little-endian::

    b"GEMR"  u16 version (=1)  u32 parameter count
    per parameter:
        u16 name length, UTF-8 name, u8 rank, u32 per dim, float32 LE payload
    u32 metadata length, UTF-8 JSON metadata

Metadata holds the model config plus training provenance (seed, epoch,
mechanism). Batch-norm running statistics are stored as ordinary arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import GroupEmotionModel, ModelConfig
from .tensor import Tensor

MAGIC = b"GEMR"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


def encode(arrays: dict[str, np.ndarray], metadata: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"truncated payload: needed {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file is version {version}, reader supports {VERSION}")
    (count,) = r.unpack("<I", "parameter count")
    arrays = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of parameter {i}")
        try:
            name = r.take(nlen, f"name of parameter {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"parameter {i} name is not valid UTF-8") from None
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (mlen,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("metadata block is not UTF-8 JSON") from None
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes after metadata")
    return arrays, metadata


def save_checkpoint(model: GroupEmotionModel, path, metadata: Optional[dict] = None) -> None:
    meta = {"config": model.config.to_dict(), "seed": model.seed, "mechanism": model.config.mechanism.value}
    meta.update(metadata or {})
    Path(path).write_bytes(encode(model.state_dict(), meta))


def load_checkpoint(path) -> tuple[GroupEmotionModel, dict]:
    """Rebuild a model in eval mode; returns it with the stored metadata."""
    arrays, meta = decode(Path(path).read_bytes())
    if "config" not in meta:
        raise ManifestMismatchError("metadata has no model config")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (TypeError, ValueError) as exc:
        raise ManifestMismatchError(f"model config in metadata is invalid: {exc}") from None
    expected = {**config.param_shapes(), **config.buffer_shapes()}
    found = {k: tuple(v.shape) for k, v in arrays.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        raise ManifestMismatchError(f"shape/manifest mismatch: missing {missing}, unexpected {extra}, wrong shape {wrong}")
    params = {k: Tensor(arrays[k].copy(), requires_grad=True) for k in config.param_shapes()}
    buffers = {k: arrays[k].copy() for k in config.buffer_shapes()}
    model = GroupEmotionModel(config, int(meta.get("seed", 0)), params, buffers)
    return model.eval(), meta
