"""Detection losses: focal classification, L1 and GIoU box terms, PLD reweighting, clip loss.

All frame-level losses are unnormalized sums over queries.  Gradients are
closed-form; the score enters through a sigmoid so ``dp/ds = p (1 - p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .assignment import FOCAL_ALPHA, FOCAL_GAMMA, Matching
from .geometry import GeometryError, giou_and_grad

EPS = 1e-7
PLD_BACKGROUND_WEIGHT = 0.5


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise LossError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cls, self.l1, self.giou)


@dataclass(frozen=True)
class LossBreakdown:
    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    total: float = 0.0
    rfs: float = 0.0
    pld: float = 0.0
    tgd: float = 0.0
    omega: tuple = field(default=(), compare=False)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.cls + other.cls, self.l1 + other.l1, self.giou + other.giou, self.total + other.total,
            self.rfs + other.rfs, self.pld + other.pld, self.tgd + other.tgd, self.omega + other.omega,
        )


def focal_loss(p, target: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    p = np.clip(p, EPS, 1 - EPS)
    if target == 1:
        return -alpha * (1 - p) ** gamma * np.log(p)
    return -(1 - alpha) * p**gamma * np.log(1 - p)


def focal_grad(p, target: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """d focal / d p; zero where the clamp is active."""
    p_raw = np.asarray(p, dtype=float)
    p = np.clip(p_raw, EPS, 1 - EPS)
    if target == 1:
        g = alpha * (gamma * (1 - p) ** (gamma - 1) * np.log(p) - (1 - p) ** gamma / p)
    else:
        g = -(1 - alpha) * (gamma * p ** (gamma - 1) * np.log(1 - p) - p**gamma / (1 - p))
    return np.where((p_raw > EPS) & (p_raw < 1 - EPS), g, 0.0)


def _as_boxes(x) -> np.ndarray:
    return np.asarray([tuple(b) for b in x], dtype=float).reshape(-1, 4)


def matching_loss(
    matching: Matching,
    boxes,
    scores,
    label_boxes,
    weights: LossWeights = LossWeights(),
    pos_weight=None,
    neg_weight: float = 1.0,
    grad: bool = False,
):
    """Weighted loss of a matching, optionally with gradients w.r.t. boxes and scores.

    ``pos_weight[k]`` multiplies the loss of the query matched to label ``k``;
    every unmatched query pays ``neg_weight`` times the background focal term.
    Returns ``(LossBreakdown, d_boxes, d_scores)``; the gradient arrays are
    ``None`` unless ``grad`` is set.
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    label_boxes = _as_boxes(label_boxes)
    n = len(scores)
    if len(boxes) != n:
        raise LossError("boxes and scores differ in length")
    for q, k in matching.pairs:
        if not (0 <= q < n and 0 <= k < len(label_boxes)):
            raise LossError(f"matching pair {(q, k)} out of range")
    if pos_weight is None:
        pos_weight = np.ones(len(label_boxes))

    cls = l1 = gl = 0.0
    omega = [neg_weight] * n
    d_boxes = np.zeros((n, 4)) if grad else None
    d_scores = np.zeros(n) if grad else None
    matched = np.zeros(n, dtype=bool)
    for q, k in matching.pairs:
        matched[q] = True
        w = float(pos_weight[k])
        omega[q] = w
        b, y = boxes[q], label_boxes[k]
        try:
            g_val, g_grad = giou_and_grad(b, y)
        except GeometryError as exc:
            raise LossError(str(exc)) from exc
        cls += w * float(focal_loss(scores[q], 1))
        l1 += w * float(np.abs(b - y).sum())
        gl += w * (1.0 - g_val)
        if grad:
            d_scores[q] = w * weights.cls * float(focal_grad(scores[q], 1))
            d_boxes[q] = w * (weights.l1 * np.sign(b - y) - weights.giou * g_grad)
    bg = ~matched
    if bg.any():
        cls += neg_weight * float(np.sum(focal_loss(scores[bg], 0)))
        if grad:
            d_scores[bg] = neg_weight * weights.cls * focal_grad(scores[bg], 0)
    total = weights.cls * cls + weights.l1 * l1 + weights.giou * gl
    return LossBreakdown(cls, l1, gl, total, omega=tuple(omega)), d_boxes, d_scores


def frame_loss(matching: Matching, predictions, labels, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Unweighted loss: matched queries pay focal(target 1) + box terms, the rest focal(target 0).

    ``predictions`` is a sequence of ``(Box, score)``.
    """
    boxes = [b for b, _ in predictions]
    scores = [s for _, s in predictions]
    bd, _, _ = matching_loss(matching, boxes, scores, labels, weights)
    return replace(bd, omega=())


def pld_weighted_loss(
    matching: Matching,
    predictions,
    pseudo_labels,
    weights: LossWeights = LossWeights(),
    background_weight: float = PLD_BACKGROUND_WEIGHT,
) -> LossBreakdown:
    """Confidence-reweighted loss against pseudo labels ``(Box, c_e)``.

    Matched pairs are scaled by the pseudo label's confidence, unmatched
    queries' background loss by ``background_weight``.  ``omega`` on the result
    carries the factor applied to each query.
    """
    conf = np.array([c for _, c in pseudo_labels], dtype=float)
    if np.any((conf < 0) | (conf > 1)):
        raise LossError("pseudo-label confidence must lie in [0, 1]")
    boxes = [b for b, _ in predictions]
    scores = [s for _, s in predictions]
    bd, _, _ = matching_loss(matching, boxes, scores, [b for b, _ in pseudo_labels], weights,
                             pos_weight=conf, neg_weight=background_weight)
    return replace(bd, pld=bd.total)


def clip_loss(frames: Iterable[Sequence]) -> float:
    """Sum over frames of ``(rfs + pld + tgd) / objects``; frames without objects add nothing.

    Each frame is ``(rfs, pld, tgd, n_objects)`` where the first three are
    :class:`LossBreakdown` values or plain floats.
    """
    total = 0.0
    for rfs, pld, tgd, n_objects in frames:
        if n_objects <= 0:
            continue
        parts = [x.total if isinstance(x, LossBreakdown) else float(x) for x in (rfs, pld, tgd)]
        total += sum(parts) / n_objects
    return total


def loss_gradients(matching: Matching, boxes, logits, label_boxes, weights: LossWeights = LossWeights(),
                   pos_weight=None, neg_weight: float = 1.0) -> np.ndarray:
    """Gradient of the matching loss w.r.t. each query's (box residual, logit).

    Boxes are taken as ``ref + residual`` so the box gradient is the residual
    gradient.  Returns an ``(n, 5)`` array: four box components then the logit.
    """
    logits = np.asarray(logits, dtype=float).reshape(-1)
    p = 1.0 / (1.0 + np.exp(-logits))
    _, d_boxes, d_scores = matching_loss(matching, boxes, p, label_boxes, weights, pos_weight, neg_weight, grad=True)
    return np.concatenate([d_boxes, (d_scores * p * (1 - p))[:, None]], axis=1)
