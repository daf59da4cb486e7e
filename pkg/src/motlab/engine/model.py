"""The toy query model.

Queries see the frame only through *observations*: noisy boxes with a scalar
objectness feature (a stand-in for image features).  Every query starts from
a reference box and is pulled toward one observation by a learned shared
per-stage gain (one gain for detect queries, one for track queries), on top
of its own per-slot residuals.  Detect queries start from a fixed anchor grid
and look at the observation assigned to their cell; track queries start from
their previous box and look at the observation they overlap most.

Stage ``l`` of query ``i``::

    raw   = ref + sum_{k<=l} (delta_k + gain_k * (obs - ref))
    box   = decode(raw)                               # clip into the arena
    z     = s_l + [detect] wd_l * f + [track] (bias_l + wt_l * f)
    score = sigmoid(z - beta * m)

Boxes refine cumulatively; logits are per stage.  ``m`` is the largest IoU
with a visible query of higher raw score; it is treated as a constant in the
backward pass.  Equal raw scores resolve toward the smaller tie key (detect
slots first, then older track slots); copies of one track slot share a key
and never suppress each other on a tie.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..config import TrainConfig
from ..geometry import pairwise_iou
from ..tgd import GroupLayout

MIN_SIZE = 1e-3


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# parameters

HEAD_KEYS = ("det_gain", "det_feat_w", "trk_gain", "trk_bias", "trk_feat_w")


@dataclass
class ModelParams:
    det_delta: np.ndarray  # (M, L, 4)
    det_logit: np.ndarray  # (M, L)
    det_gain: np.ndarray  # (L, 4)
    det_feat_w: np.ndarray  # (L,)
    trk_gain: np.ndarray  # (L, 4)
    trk_bias: np.ndarray  # (L,)
    trk_feat_w: np.ndarray  # (L,)

    @classmethod
    def init(cls, cfg: TrainConfig) -> "ModelParams":
        M, L = cfg.M, cfg.L
        return cls(
            det_delta=np.zeros((M, L, 4)),
            det_logit=np.full((M, L), cfg.detect_logit_init),
            det_gain=np.full((L, 4), cfg.detect_gain_init),
            det_feat_w=np.full(L, cfg.detect_feature_init),
            trk_gain=np.full((L, 4), cfg.track_gain_init),
            trk_bias=np.full(L, cfg.track_bias_init),
            trk_feat_w=np.full(L, cfg.track_feature_init),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    def to_json(self) -> str:
        return json.dumps({k: v.tolist() for k, v in self.arrays().items()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        raw = json.loads(text)
        return cls(**{k: np.asarray(raw[k], dtype=float) for k in cls.__dataclass_fields__})


@dataclass
class SlotParams:
    """Per-track-slot parameters, created at spawn."""

    delta: np.ndarray  # (L, 4)
    logit: np.ndarray  # (L,)

    @classmethod
    def init(cls, cfg: TrainConfig) -> "SlotParams":
        return cls(np.zeros((cfg.L, 4)), np.full(cfg.L, cfg.track_logit_init))


# ---------------------------------------------------------------------------
# observations (encoder stand-in)


@dataclass
class Observations:
    boxes: np.ndarray  # (K, 4)
    feat: np.ndarray  # (K,)
    source: np.ndarray  # (K,) identity, -1 for clutter


def observe(labels, cfg: TrainConfig, rng: np.random.Generator) -> Observations:
    boxes, feat, source = [], [], []
    for lab in labels:
        if cfg.obs_miss and rng.random() < cfg.obs_miss:
            continue
        b = np.asarray(lab.box, dtype=float) + rng.normal(0.0, cfg.obs_noise, 4)
        boxes.append(b)
        feat.append(rng.normal(cfg.feature_mean, cfg.feature_noise))
        source.append(lab.identity)
    for _ in range(int(rng.poisson(cfg.clutter_rate))):
        w, h = rng.uniform(0.05, 0.15, 2)
        boxes.append(np.array([rng.uniform(0, 1), rng.uniform(0, 1), w, h]))
        feat.append(rng.normal(0.0, cfg.feature_noise))
        source.append(-1)
    if not boxes:
        return Observations(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int))
    arr, _ = decode_boxes(np.array(boxes))
    return Observations(arr, np.array(feat), np.array(source, dtype=int))


def grid_shape(M: int) -> tuple[int, int]:
    rows = max(d for d in range(1, int(math.isqrt(M)) + 1) if M % d == 0)
    return rows, M // rows


def anchors(cfg: TrainConfig) -> np.ndarray:
    rows, cols = grid_shape(cfg.M)
    out = np.empty((cfg.M, 4))
    for r in range(rows):
        for c in range(cols):
            out[r * cols + c] = ((c + 0.5) / cols, (r + 0.5) / rows, cfg.anchor_size, cfg.anchor_size)
    return out


def propose(obs: Observations, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Assign observations to detect slots.

    Observations are taken in decreasing feature order; each claims its own
    anchor cell, or the nearest unclaimed anchor when the cell is taken.
    Returns ``(ref, target, feat, src)``: anchor boxes, the assigned
    observation box (the anchor itself when unclaimed), its feature (0 when
    unclaimed) and the observation index (-1).
    """
    rows, cols = grid_shape(cfg.M)
    ref = anchors(cfg)
    target = ref.copy()
    feat = np.zeros(cfg.M)
    src = np.full(cfg.M, -1)
    for i in sorted(range(len(obs.feat)), key=lambda j: (-obs.feat[j], j)):
        b = obs.boxes[i]
        r = min(int(b[1] * rows), rows - 1)
        c = min(int(b[0] * cols), cols - 1)
        slot = r * cols + c
        if src[slot] >= 0:
            free = np.flatnonzero(src < 0)
            if not len(free):
                break
            d = np.sum((ref[free, :2] - b[:2]) ** 2, axis=1)
            slot = int(free[np.argmin(d)])
        target[slot], feat[slot], src[slot] = b, obs.feat[i], i
    return ref, target, feat, src


def lookup(refs: np.ndarray, obs: Observations, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Observation each track is pulled toward; a lost track sees its own box and zero feature."""
    refs = np.asarray(refs, dtype=float).reshape(-1, 4)
    target = refs.copy()
    feat = np.zeros(len(refs))
    if len(refs) and len(obs.boxes):
        ious = pairwise_iou(refs, obs.boxes)
        best = ious.argmax(axis=1)
        ok = ious[np.arange(len(refs)), best] >= cfg.lost_iou
        target[ok] = obs.boxes[best[ok]]
        feat[ok] = obs.feat[best[ok]]
    return target, feat


# ---------------------------------------------------------------------------
# forward / backward


def decode_boxes(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip raw (cx, cy, w, h) into valid arena boxes; also return the Jacobian ``(n, 4, 4)``.

    Centers are clipped to [0, 1], sizes to [MIN_SIZE, 1], then corners to
    the arena.  The Jacobian is exact wherever no clip sits on its boundary.
    """
    raw = np.asarray(raw, dtype=float).reshape(-1, 4)
    out = np.empty_like(raw)
    jac = np.zeros((len(raw), 4, 4))
    for c_i, s_i in ((0, 2), (1, 3)):
        c, s = raw[:, c_i], raw[:, s_i]
        dc1 = ((c > 0) & (c < 1)).astype(float)
        ds1 = ((s > MIN_SIZE) & (s < 1)).astype(float)
        c1 = np.clip(c, 0.0, 1.0)
        s1 = np.clip(s, MIN_SIZE, 1.0)
        x1, x2 = c1 - s1 / 2, c1 + s1 / 2
        a = (x1 > 0).astype(float)
        b = (x2 < 1).astype(float)
        x1c, x2c = np.maximum(x1, 0.0), np.minimum(x2, 1.0)
        out[:, c_i] = (x1c + x2c) / 2
        out[:, s_i] = x2c - x1c
        jac[:, c_i, c_i] = dc1 * (a + b) / 2
        jac[:, c_i, s_i] = ds1 * (b - a) / 4
        jac[:, s_i, c_i] = dc1 * (b - a)
        jac[:, s_i, s_i] = ds1 * (a + b) / 2
    return out, jac


@dataclass
class QueryBatch:
    layout: GroupLayout
    ref: np.ndarray  # (S, 4)
    obs: np.ndarray  # (S, 4) observation each query is pulled toward
    feat: np.ndarray  # (S,)
    is_track: np.ndarray  # (S,) bool
    delta: np.ndarray  # (S, L, 4)
    logit: np.ndarray  # (S, L)
    slot_ids: list = field(default_factory=list)  # detect index or track slot id per query

    @property
    def S(self) -> int:
        return len(self.feat)

    def tie_keys(self) -> np.ndarray:
        M = self.layout.M
        if len(self.slot_ids) != self.S:
            return np.arange(self.S)
        return np.array([sid if i < M else M + sid for i, sid in enumerate(self.slot_ids)])


@dataclass
class StagePredictions:
    boxes: np.ndarray  # (L, S, 4)
    jac: np.ndarray  # (L, S, 4, 4)
    logits: np.ndarray  # (L, S) pre-suppression
    raw_scores: np.ndarray  # (L, S)
    suppression: np.ndarray  # (L, S)
    scores: np.ndarray  # (L, S) suppressed


class ShapeError(ValueError):
    pass


def forward(batch: QueryBatch, params: ModelParams, mask: np.ndarray, beta: float,
            suppression: np.ndarray | None = None) -> StagePredictions:
    """Predictions of every query at every stage.

    ``suppression`` overrides the interaction term (used to evaluate the
    objective with it held fixed).
    """
    S = batch.S
    if mask.shape != (S, S):
        raise ShapeError(f"mask {mask.shape} does not match {S} queries")
    L = batch.delta.shape[1]
    trk = batch.is_track
    cum_delta = np.cumsum(batch.delta, axis=1)
    cum_gain = np.where(trk[None, :, None], np.cumsum(params.trk_gain, axis=0)[:, None, :],
                        np.cumsum(params.det_gain, axis=0)[:, None, :])  # (L, S, 4)
    pull = batch.obs - batch.ref
    visible = (mask == 0) & ~np.eye(S, dtype=bool)
    keys = batch.tie_keys()
    wins_tie = keys[None, :] < keys[:, None]  # [i, j]: j wins an exact tie against i

    boxes = np.empty((L, S, 4))
    jac = np.empty((L, S, 4, 4))
    m = np.zeros((L, S))
    for l in range(L):
        boxes[l], jac[l] = decode_boxes(batch.ref + cum_delta[:, l] + cum_gain[l] * pull)
    logits = batch.logit.T + np.where(
        trk[None, :],
        params.trk_bias[:, None] + params.trk_feat_w[:, None] * batch.feat[None, :],
        params.det_feat_w[:, None] * batch.feat[None, :],
    )
    raw_scores = sigmoid(logits)
    if suppression is None:
        for l in range(L):
            if S < 2:
                continue
            ious = pairwise_iou(boxes[l], boxes[l])
            rs = raw_scores[l]
            higher = (rs[None, :] > rs[:, None]) | ((rs[None, :] == rs[:, None]) & wins_tie)
            m[l] = np.where(visible & higher, ious, 0.0).max(axis=1)
    else:
        m = np.asarray(suppression, dtype=float)
    scores = sigmoid(logits - beta * m)
    return StagePredictions(boxes, jac, logits, raw_scores, m, scores)


def backward(batch: QueryBatch, preds: StagePredictions, params: ModelParams,
             d_boxes: np.ndarray, d_logits: np.ndarray):
    """Chain box/logit gradients ``(L, S, 4)`` / ``(L, S)`` back to parameters.

    Returns ``(d_delta (S, L, 4), d_logit (S, L), head)`` where ``head`` maps
    each shared parameter name to its gradient.
    """
    trk = batch.is_track.astype(float)
    det = 1.0 - trk
    d_raw = np.einsum("lsij,lsi->lsj", preds.jac, d_boxes)
    # residual and gain of stage k feed every stage l >= k
    rc_raw = np.cumsum(d_raw[::-1], axis=0)[::-1]
    d_delta = rc_raw.transpose(1, 0, 2).copy()
    d_logit = d_logits.T.copy()
    pull = batch.obs - batch.ref
    head = {
        "det_gain": np.einsum("lsj,s,sj->lj", rc_raw, det, pull),
        "det_feat_w": d_logits @ (det * batch.feat),
        "trk_gain": np.einsum("lsj,s,sj->lj", rc_raw, trk, pull),
        "trk_bias": d_logits @ trk,
        "trk_feat_w": d_logits @ (trk * batch.feat),
    }
    return d_delta, d_logit, head
