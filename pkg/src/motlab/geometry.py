"""Box geometry in arena-normalized (cx, cy, w, h) coordinates.

Scalar functions take :class:`Box` values; the ``*_array`` helpers operate on
``(n, 4)`` numpy arrays and are used by the engine's vectorized forward pass.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate (zero-area) boxes where an overlap is required."""


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class CornerBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float


def to_corners(b: Box) -> CornerBox:
    cx, cy, w, h = b
    return CornerBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def from_corners(c: CornerBox) -> Box:
    x1, y1, x2, y2 = c
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def is_degenerate(b: Box) -> bool:
    return not (b[2] > 0 and b[3] > 0)


def _check(b: Box) -> None:
    if is_degenerate(b):
        raise GeometryError(f"degenerate box {tuple(b)}: width and height must be positive")


def _overlap_terms(a: Box, b: Box) -> tuple[float, float, float]:
    """Return (intersection, union, enclosure) areas."""
    _check(a)
    _check(b)
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the corner form so that iou(a, a) is exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclosure = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclosure


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap_terms(a, b)
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: ``iou - (enclosure - union) / enclosure``, in (-1, 1]."""
    inter, union, enclosure = _overlap_terms(a, b)
    return inter / union - (enclosure - union) / enclosure


def giou_and_grad(a: Box, b: Box) -> tuple[float, np.ndarray]:
    """GIoU of ``a`` against a fixed ``b`` and its gradient w.r.t. ``a``'s (cx, cy, w, h).

    The derivative is the closed-form piecewise one: each min/max picks the
    active side (ties resolve to ``b``, giving a zero partial for ``a``).
    """
    _check(a)
    _check(b)
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)

    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    overlapping = iw > 0 and ih > 0
    iw, ih = max(iw, 0.0), max(ih, 0.0)
    inter = iw * ih
    area_a = a[2] * a[3]
    union = area_a + b[2] * b[3] - inter
    ew = max(ax2, bx2) - min(ax1, bx1)
    eh = max(ay2, by2) - min(ay1, by1)
    enc = ew * eh
    value = inter / union - (enc - union) / enc

    # d/d(x1, y1, x2, y2) of a
    d_inter = np.zeros(4)
    if overlapping:
        if ax1 > bx1:
            d_inter[0] = -ih
        if ay1 > by1:
            d_inter[1] = -iw
        if ax2 < bx2:
            d_inter[2] = ih
        if ay2 < by2:
            d_inter[3] = iw
    d_area = np.array([-a[3], -a[2], a[3], a[2]])
    d_enc = np.zeros(4)
    if ax1 < bx1:
        d_enc[0] = -eh
    if ay1 < by1:
        d_enc[1] = -ew
    if ax2 > bx2:
        d_enc[2] = eh
    if ay2 > by2:
        d_enc[3] = ew
    d_union = d_area - d_inter
    # giou = inter/union - 1 + union/enc
    d_corner = (d_inter * union - inter * d_union) / union**2 + (d_union * enc - union * d_enc) / enc**2

    # corners -> (cx, cy, w, h)
    g = np.array([
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ])
    return value, g


def l1_box_distance(a: Box, b: Box) -> float:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2]) + abs(a[3] - b[3])


def clamp_to_arena(b: Box) -> Box:
    """Clip the corner form into the unit square and re-encode."""
    x1, y1, x2, y2 = to_corners(b)
    if 0.0 <= x1 and x2 <= 1.0 and 0.0 <= y1 and y2 <= 1.0:
        return Box(*map(float, b))
    x1, x2 = min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0)
    y1, y2 = min(max(y1, 0.0), 1.0), min(max(y2, 0.0), 1.0)
    return from_corners(CornerBox(x1, y1, x2, y2))


# ---------------------------------------------------------------------------
# array forms


def corners_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(n, 4)`` and ``(m, 4)`` cxcywh arrays."""
    ca, cb = corners_array(a), corners_array(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0):
        raise GeometryError("degenerate box in pairwise_giou")
    ca, cb = corners_array(a), corners_array(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    elt = np.minimum(ca[:, None, :2], cb[None, :, :2])
    erb = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    ewh = erb - elt
    enc = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enc - union) / enc


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(a, float)[:, None, :] - np.asarray(b, float)[None, :, :]).sum(-1)
