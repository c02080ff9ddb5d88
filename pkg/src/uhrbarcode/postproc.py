"""Mask -> boxes: binarize, erode, follow outer borders, fit and expand.

Erosion by k iterations of a 3x3 square shrinks every side of a blob by k
pixels, so expanding fitted boxes by the same margin restores the extents
while the widened gaps keep near-touching barcodes apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import BBox

# 8-neighbourhood in (row, col), counter-clockwise on screen starting east
_NEIGHBOURS = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
_EIGHT = np.ones((3, 3), bool)


@dataclass(frozen=True)
class PostprocParams:
    threshold: float = 0.5
    erosion_iterations: int = 2
    margin: int | None = None  # defaults to erosion_iterations
    min_area: int = 16

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.erosion_iterations < 0:
            raise ValueError("erosion_iterations must be >= 0")
        if self.margin is not None and self.margin < 0:
            raise ValueError("margin must be >= 0")

    @property
    def m(self) -> int:
        return self.erosion_iterations if self.margin is None else self.margin

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "erosion_iterations": self.erosion_iterations,
                "margin": self.margin, "min_area": self.min_area}


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def erode(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """3x3 square erosion; pixels outside the image count as 0."""
    out = np.asarray(mask, bool)
    h, w = out.shape
    for _ in range(iterations):
        p = np.zeros((h + 2, w + 2), bool)
        p[1:-1, 1:-1] = out
        # separable: a 3x3 minimum is a 1x3 minimum of a 3x1 minimum
        rows = p[:-2] & p[1:-1] & p[2:]
        out = rows[:, :-2] & rows[:, 1:-1] & rows[:, 2:]
    return out.copy() if iterations == 0 else out


def follow_border(mask: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Outer border of the component containing ``start``, which must have a
    background west neighbour. Returns (row, col) points, closed implicitly."""
    p = np.pad(np.asarray(mask, bool), 1)
    i, j = start[0] + 1, start[1] + 1

    def first_nonzero(ci, cj, from_k, step):
        for t in range(1, 9):
            k = (from_k + step * t) % 8
            di, dj = _NEIGHBOURS[k]
            if p[ci + di, cj + dj]:
                return k
        return None

    # clockwise from the west neighbour for the first foreground pixel
    west = 4
    k1 = None
    for t in range(0, 8):
        k = (west - t) % 8
        di, dj = _NEIGHBOURS[k]
        if p[i + di, j + dj]:
            k1 = k
            break
    if k1 is None:
        return np.array([[start[0], start[1]]])
    i1, j1 = i + _NEIGHBOURS[k1][0], j + _NEIGHBOURS[k1][1]
    i2, j2 = i1, j1
    i3, j3 = i, j
    points = []
    while True:
        points.append((i3 - 1, j3 - 1))
        back = _NEIGHBOURS.index((i2 - i3, j2 - j3))
        k4 = first_nonzero(i3, j3, back, 1)
        i4, j4 = i3 + _NEIGHBOURS[k4][0], j3 + _NEIGHBOURS[k4][1]
        if (i4, j4) == (i, j) and (i3, j3) == (i1, j1):
            break
        i2, j2, i3, j3 = i3, j3, i4, j4
    return np.array(points)


def extract_contours(mask: np.ndarray) -> list[np.ndarray]:
    """One outer contour per 8-connected component, in row-major discovery order."""
    mask = np.asarray(mask, bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    # label ids follow raster order of each component's first pixel
    flat = labels.ravel()
    first = np.full(n + 1, -1)
    nz = np.flatnonzero(flat)
    ids = flat[nz]
    order = np.unique(ids, return_index=True)[1]
    first[ids[order]] = nz[order]
    w = mask.shape[1]
    contours = []
    for lab, (rs, cs) in enumerate(ndimage.find_objects(labels), start=1):
        r, c = divmod(int(first[lab]), w)
        sub = labels[rs, cs] == lab
        contours.append(follow_border(sub, (r - rs.start, c - cs.start)) + (rs.start, cs.start))
    return contours


def fit_and_expand(contours: list[np.ndarray], params: PostprocParams, shape: tuple[int, int]) -> list[BBox]:
    """Pixel-extent boxes of each contour, area-filtered before expansion by
    the margin, clamped to ``shape`` and sorted by (y, x)."""
    h, w = shape
    m = params.m
    boxes = []
    for c in contours:
        r0, c0 = c.min(0)
        r1, c1 = c.max(0) + 1
        if (r1 - r0) * (c1 - c0) < params.min_area:
            continue
        boxes.append(BBox.from_corners(int(c0), int(r0), int(c1), int(r1)).expand(m).clamp(w, h))
    return sorted(boxes, key=lambda b: (b.y, b.x))


def extract_boxes(prob: np.ndarray, params: PostprocParams | None = None) -> list[BBox]:
    params = params or PostprocParams()
    mask = erode(binarize(prob, params.threshold), params.erosion_iterations)
    return fit_and_expand(extract_contours(mask), params, mask.shape)
