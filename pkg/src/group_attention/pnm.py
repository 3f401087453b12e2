"""Binary PGM (P5) and PPM (P6) images with maxval 255.

Images are numpy ``uint8`` arrays: ``(height, width)`` for P5 and
``(height, width, 3)`` for P6.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAX_DIM = 1 << 16
_WHITESPACE = b" \t\n\r\x0b\x0c"


class PNMError(ValueError):
    """Malformed image; ``kind`` names the failure."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


def _skip_separators(data: bytes, pos: int) -> int:
    """Skip whitespace and ``#`` comments (which run to the end of the line)."""
    while pos < len(data):
        if data[pos] == ord("#"):
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif data[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    return pos


def _header_tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    while len(tokens) < count:
        pos = _skip_separators(data, pos)
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise PNMError("truncated header", f"expected {count} header fields, found {len(tokens)}")
        tokens.append(data[start:pos])
    return tokens, pos


def parse_pnm(data: bytes) -> np.ndarray:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise PNMError("bad magic", f"expected P5 or P6, found {bytes(data[:2])!r}")
    channels = 1 if data[:2] == b"P5" else 3
    if len(data) > 2 and data[2] not in _WHITESPACE and data[2] != ord("#"):
        raise PNMError("bad magic", f"unexpected byte after magic: {bytes(data[2:3])!r}")
    tokens, pos = _header_tokens(data, 3, 2)
    if not all(t.isdigit() for t in tokens):
        raise PNMError("malformed header", f"non-numeric header fields {[t.decode('latin-1') for t in tokens]}")
    width, height, maxval = (int(t) for t in tokens)
    if width > MAX_DIM or height > MAX_DIM:
        raise PNMError("oversized dimensions", f"{width}x{height} exceeds {MAX_DIM}")
    if width == 0 or height == 0:
        raise PNMError("malformed header", f"zero-sized image {width}x{height}")
    if maxval != 255:
        raise PNMError("unsupported maxval", f"only 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PNMError("truncated raster", "missing whitespace before raster")
    pos += 1
    size = width * height * channels
    raster = data[pos : pos + size]
    if len(raster) < size:
        raise PNMError("truncated raster", f"expected {size} bytes, got {len(raster)}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.frombuffer(raster, dtype=np.uint8).reshape(shape).copy()


def write_pnm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"PNM images must be uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (h, w) or (h, w, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_pnm(path) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes())


def save_pnm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(write_pnm(image))
