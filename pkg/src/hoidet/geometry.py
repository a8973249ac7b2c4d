"""Axis-aligned boxes in (cx, cy, w, h) form, IoU and the L1 box metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SENTINEL_TOL = 1e-3


@dataclass(frozen=True)
class Box:
    """Center-size box in normalized image coordinates.

    The all-zeros box is the reserved sentinel standing for an occluded
    object.
    """

    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def area(self) -> float:
        return self.w * self.h

    def corners(self):
        hw, hh = self.w / 2.0, self.h / 2.0
        return self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh


SENTINEL = Box(0.0, 0.0, 0.0, 0.0)


def as_box(b) -> Box:
    if isinstance(b, Box):
        return b
    cx, cy, w, h = (float(v) for v in b)
    return Box(cx, cy, w, h)


def is_sentinel(b, tol: float = SENTINEL_TOL) -> bool:
    b = as_box(b)
    return max(abs(b.cx), abs(b.cy), abs(b.w), abs(b.h)) <= tol


def iou(a, b) -> float:
    """Intersection over union. Two zero-area boxes score 1 only if equal."""
    a, b = as_box(a), as_box(b)
    area_a, area_b = a.area(), b.area()
    if area_a == 0.0 and area_b == 0.0:
        return 1.0 if a == b else 0.0
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def l1_box_distance(a, b) -> float:
    """Sum of absolute coordinate differences between two boxes."""
    a, b = as_box(a), as_box(b)
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy)
            + abs(a.w - b.w) + abs(a.h - b.h))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (n,4) arrays of cxcywh boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = iou(a[i], b[j])
    return out
