"""Boxes, IoU and planar homographies.

Continuous image coordinates: pixel (row r, col c) covers [c, c+1) x [r, r+1),
so its centre is (c + 0.5, r + 0.5).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float
    score: float = 1.0

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def to_list(self) -> list:
        return [_num(self.x), _num(self.y), _num(self.w), _num(self.h)]

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, score: float = 1.0) -> "BBox":
        return cls(x0, y0, x1 - x0, y1 - y0, score)

    def with_score(self, score: float) -> "BBox":
        return replace(self, score=float(score))

    def translate(self, dx: float, dy: float) -> "BBox":
        return replace(self, x=self.x + dx, y=self.y + dy)

    def expand(self, mx: float, my: float | None = None) -> "BBox":
        my = mx if my is None else my
        return replace(self, x=self.x - mx, y=self.y - my, w=self.w + 2 * mx, h=self.h + 2 * my)

    def clamp(self, width: float, height: float) -> "BBox":
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x2, width), min(self.y2, height)
        return BBox.from_corners(x0, y0, max(x1, x0), max(y1, y0), self.score)

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x2 and self.y <= py <= self.y2


def _num(v):
    f = float(v)
    return int(f) if f.is_integer() else f


def intersection(a: BBox, b: BBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    return ix * iy if ix > 0 and iy > 0 else 0.0


def iou(a: BBox, b: BBox) -> float:
    inter = intersection(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: list[BBox], b: list[BBox]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([[p.x, p.y, p.x2, p.y2] for p in a], dtype=float)
    B = np.array([[p.x, p.y, p.x2, p.y2] for p in b], dtype=float)
    ix = np.clip(np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


# ---------------------------------------------------------------------------
# homographies

def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(1.0, float(np.ptp(pts, axis=0).max()))
    for i, j, k in itertools.combinations(range(4), 3):
        a, b, c = pts[i], pts[j], pts[k]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= tol * scale * scale:
            return True
    return False


def solve_homography(src, dst) -> np.ndarray:
    """3x3 matrix H (H[2,2] = 1) with H @ [x, y, 1] ~ [x', y', 1] for 4 point pairs."""
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    if _has_collinear_triple(src) or _has_collinear_triple(dst):
        raise ValueError("three of the four correspondence points are collinear")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i], rhs[2 * i + 1] = u, v
    h = np.linalg.solve(A, rhs)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:3]


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float) -> np.ndarray:
    """Samples ``img`` at continuous coordinates; outside samples take ``fill``."""
    h, w = img.shape
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    padded = np.pad(img.astype(np.float64), 1, constant_values=fill)
    xi = np.clip(x0 + 1, 0, w + 1)
    yi = np.clip(y0 + 1, 0, h + 1)
    xj = np.clip(x0 + 2, 0, w + 1)
    yj = np.clip(y0 + 2, 0, h + 1)
    out = (padded[yi, xi] * (1 - fx) * (1 - fy) + padded[yi, xj] * fx * (1 - fy)
           + padded[yj, xi] * (1 - fx) * fy + padded[yj, xj] * fx * fy)
    outside = (u < -1) | (v < -1) | (u > w) | (v > h)
    out[outside] = fill
    return out


def warp(img: np.ndarray, H: np.ndarray, out_shape: tuple[int, int], fill: float = 255) -> np.ndarray:
    """Inverse-mapped bilinear warp: output pixel p samples ``img`` at H^-1 p."""
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.c_[xs.ravel() + 0.5, ys.ravel() + 0.5]
    src = apply_homography(np.linalg.inv(H), pts)
    vals = bilinear_sample(img, src[:, 0], src[:, 1], fill)
    return vals.reshape(oh, ow)
