"""Landmark-based face normalization onto a 96x112 frame.

A least-squares similarity transform (uniform scale, rotation, translation; no
reflection) maps five detected landmarks onto a fixed template whose eyes lie
on one horizontal line. The face is then resampled by inverse mapping with
bilinear interpolation; samples falling outside the source are filled with 0.

Coordinates are ``(x, y)`` in pixels with the centre of pixel ``(0, 0)`` at
``(0.0, 0.0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

OUTPUT_WIDTH = 96
OUTPUT_HEIGHT = 112
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
TEMPLATE = np.array([[30.0, 52.0], [66.0, 52.0], [48.0, 72.0], [33.0, 92.0], [63.0, 92.0]])
_BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(theta) @ p + (tx, ty)``."""

    scale: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def linear(self) -> np.ndarray:
        return self.scale * self.rotation

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        t = -inv_scale * (self.rotation.T @ self.translation)
        return SimilarityTransform(inv_scale, -self.theta, float(t[0]), float(t[1]))

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying ``first`` and then ``self``."""
        t = self.linear @ first.translation + self.translation
        theta = math.atan2(math.sin(self.theta + first.theta), math.cos(self.theta + first.theta))
        return SimilarityTransform(self.scale * first.scale, theta, float(t[0]), float(t[1]))

    @classmethod
    def from_matrix(cls, linear: np.ndarray, translation) -> "SimilarityTransform":
        scale = math.sqrt(abs(np.linalg.det(linear)))
        theta = math.atan2(linear[1, 0], linear[0, 0])
        return cls(scale, theta, float(translation[0]), float(translation[1]))


def _points(points, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError(f"{name} must be an (n, 2) array with n >= 2, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def estimate_similarity(src, dst=TEMPLATE, eyes_only: bool = False) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst``.

    Closed form from the SVD of the centred cross-covariance; a sign flip on
    the smallest singular direction rules out reflections.
    """
    src, dst = _points(src, "src"), _points(dst, "dst")
    if src.shape != dst.shape:
        raise ValueError(f"src {src.shape} and dst {dst.shape} differ in shape")
    if eyes_only:
        src, dst = src[:2], dst[:2]
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    if var_s < 1e-12:
        raise ValueError("degenerate landmarks: all source points coincide")
    cov = xd.T @ xs / len(src)
    u, sing, vt = np.linalg.svd(cov)
    d = np.array([1.0, 1.0 if np.linalg.det(u) * np.linalg.det(vt) >= 0 else -1.0])
    rot = u @ np.diag(d) @ vt
    scale = float((sing * d).sum() / var_s)
    t = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, math.atan2(rot[1, 0], rot[0, 0]), float(t[0]), float(t[1]))


def warp(image: np.ndarray, transform: SimilarityTransform, width: int, height: int) -> np.ndarray:
    """Resample ``image`` into a ``height x width`` frame where ``transform`` maps source to output."""
    img = np.asarray(image)
    if img.ndim not in (2, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (h, w) or (h, w, c) image, got shape {img.shape}")
    h, w = img.shape[:2]
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    src = transform.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0], src[:, 1]
    inside = (sx >= -_BOUNDS_TOL) & (sx <= w - 1 + _BOUNDS_TOL) & (sy >= -_BOUNDS_TOL) & (sy <= h - 1 + _BOUNDS_TOL)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    if img.ndim == 3:
        fx, fy, inside = fx[:, None], fy[:, None], inside[:, None]
    src_f = img.astype(np.float64)
    val = (
        (1 - fx) * (1 - fy) * src_f[y0, x0]
        + fx * (1 - fy) * src_f[y0, x1]
        + (1 - fx) * fy * src_f[y1, x0]
        + fx * fy * src_f[y1, x1]
    )
    val = np.where(inside, val, 0.0)
    out = np.clip(np.rint(val), 0, 255).astype(np.uint8)
    return out.reshape((height, width) + img.shape[2:])


def warp_to_template(image: np.ndarray, transform: SimilarityTransform) -> np.ndarray:
    return warp(image, transform, OUTPUT_WIDTH, OUTPUT_HEIGHT)


def align_face(image: np.ndarray, landmarks, template=TEMPLATE, eyes_only: bool = False):
    """Aligned 96x112 face and the transform that produced it."""
    t = estimate_similarity(landmarks, template, eyes_only)
    return warp_to_template(image, t), t


def parse_landmarks(text: str, count: int = 5) -> np.ndarray:
    """Parse ``"x1,y1;x2,y2;..."`` into a ``(count, 2)`` array."""
    pairs = [p for p in text.strip().split(";") if p.strip()]
    if len(pairs) != count:
        raise ValueError(f"expected {count} landmarks 'x,y' separated by ';', got {len(pairs)}")
    pts = []
    for p in pairs:
        xy = p.split(",")
        if len(xy) != 2:
            raise ValueError(f"landmark {p!r} is not of the form 'x,y'")
        try:
            pts.append([float(xy[0]), float(xy[1])])
        except ValueError:
            raise ValueError(f"landmark {p!r} has non-numeric coordinates") from None
    arr = np.array(pts)
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmarks must be finite")
    return arr


def format_landmarks(points) -> str:
    return ";".join(f"{x:g},{y:g}" for x, y in np.asarray(points))


def render_template_face(background: float = 40.0) -> np.ndarray:
    """A smooth synthetic face drawn in the template frame, for alignment checks."""
    ys, xs = np.mgrid[0:OUTPUT_HEIGHT, 0:OUTPUT_WIDTH].astype(np.float64)

    def blob(cx, cy, sx, sy, amp):
        return amp * np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))

    img = background + blob(48, 66, 26, 34, 150.0)
    for (cx, cy), amp in zip(TEMPLATE, (-90.0, -90.0, 40.0, -60.0, -60.0)):
        img += blob(cx, cy, 5.0, 4.0, amp)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
