"""Training: clip sampling, per-frame matching under RFS/PLD/TGD, clip loss and gradient steps."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .. import rng as rngmod
from ..assignment import Matching, MatchingSpace, QuerySet, cost_matrix_from_arrays, hungarian, match_in_space
from ..config import TrainConfig
from ..lifecycle import TrackerState, partition_gts, propagate_matching, retire_tracks, spawn_tracks
from ..losses import LossWeights, matching_loss
from ..pld import PseudoLabel, PseudoLabelSet, filter_pseudo, pld_match
from ..tgd import GroupLayout, build_attention_mask, noise_reference_boxes
from .model import HEAD_KEYS, ModelParams, QueryBatch, SlotParams, backward, forward, lookup, observe, propose

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSequence:
    name: str
    frames: list  # list[list[GTLabel]], index = frame - 1
    pseudo: PseudoLabelSet | None = None


@dataclass
class FrameMatchings:
    rfs: list[Matching]  # per stage: real block vs labels
    pld: list[Matching]  # per stage: real block vs pseudo labels
    pseudo: list[PseudoLabel]
    tgd: list[list[Matching]]  # per stage, per augmented group: group-local query index vs labels


@dataclass
class FrameGrads:
    d_delta: np.ndarray
    d_logit: np.ndarray
    head: dict


def optimizer_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain gradient descent ``p - lr * g`` over matching dicts of arrays."""
    out = {}
    for key, value in params.items():
        g = grads.get(key)
        if g is None:
            out[key] = value
            continue
        g = np.asarray(g, dtype=float)
        if g.shape != np.shape(value):
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {np.shape(value)} for {key}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {key}")
        out[key] = value - lr * g
    return out


# ---------------------------------------------------------------------------
# frame pieces


def build_batch(cfg: TrainConfig, params: ModelParams, tracks, track_params: dict, obs, rng, groups: int) -> QueryBatch:
    """Assemble detect, original track and augmented track queries for one frame."""
    det_ref, det_obs, det_feat, _ = propose(obs, cfg)
    N = len(tracks)
    layout = GroupLayout(cfg.M, N, groups if N else 1)
    trk_ref = np.array([tuple(t.ref_box) for t in tracks], dtype=float).reshape(-1, 4)
    refs = [det_ref, trk_ref]
    for _ in range(1, layout.G):
        refs.append(np.array(noise_reference_boxes(trk_ref, cfg.scale_range, rng), dtype=float).reshape(-1, 4))
    trk_all = np.concatenate(refs[1:]) if N else np.zeros((0, 4))
    trk_obs, trk_feat = lookup(trk_all, obs, cfg)
    slot_delta = [track_params[t.slot_id].delta for t in tracks]
    slot_logit = [track_params[t.slot_id].logit for t in tracks]
    delta = np.concatenate([params.det_delta] + [np.array(slot_delta).reshape(N, cfg.L, 4)] * layout.G)
    logit = np.concatenate([params.det_logit] + [np.array(slot_logit).reshape(N, cfg.L)] * layout.G)
    return QueryBatch(
        layout=layout,
        ref=np.concatenate([det_ref, trk_all]),
        obs=np.concatenate([det_obs, trk_obs]),
        feat=np.concatenate([det_feat, trk_feat]),
        is_track=np.r_[np.zeros(cfg.M, dtype=bool), np.ones(layout.G * N, dtype=bool)],
        delta=delta.copy(),
        logit=logit.copy(),
        slot_ids=list(range(cfg.M)) + [t.slot_id for t in tracks] * layout.G,
    )


def match_labels(space: MatchingSpace, qs: QuerySet, label_boxes: np.ndarray, weights) -> Matching:
    """``match_in_space`` that tolerates more labels than admissible queries.

    With too few queries every query takes one label and the remaining
    labels stay unmatched for this stage.
    """
    idx = np.flatnonzero(~qs.is_track) if space is MatchingSpace.DETECT_ONLY else np.arange(len(qs))
    if len(idx) >= len(label_boxes):
        return match_in_space(space, qs, label_boxes, weights)
    logger.warning("%d labels for %d admissible queries; some labels stay unmatched", len(label_boxes), len(idx))
    cost = cost_matrix_from_arrays(qs.boxes[idx], qs.scores[idx], label_boxes, weights)
    pairs = [(int(idx[q]), k) for k, q in hungarian(cost.T).pairs]
    return Matching.from_pairs(pairs, len(qs), len(label_boxes))


def compute_matchings(cfg: TrainConfig, preds, layout: GroupLayout, label_boxes: np.ndarray, free: list[int],
                      track_labels: dict[int, int], pseudo: list[PseudoLabel] | None) -> FrameMatchings:
    """Per-stage matchings.

    ``track_labels`` maps real-block track query indices to label indices
    (the propagated association).  Non-final stages use the all-query space
    when RFS is on; the final stage always keeps detect-only + association.
    """
    L = preds.scores.shape[0]
    R, M, N = layout.real, layout.M, layout.N
    K = len(label_boxes)
    is_track = np.r_[np.zeros(M, dtype=bool), np.ones(N, dtype=bool)]
    rfs, pld, tgd = [], [], []
    pseudo_used: list[PseudoLabel] = []
    n_aug = (layout.G - 1) * N
    for l in range(L):
        qs = QuerySet(preds.boxes[l, :R], preds.scores[l, :R], is_track)
        if cfg.enable_rfs and l < L - 1:
            m = match_labels(MatchingSpace.ALL_QUERIES, qs, label_boxes, cfg.weights)
        else:
            dm = match_labels(MatchingSpace.DETECT_ONLY, qs, label_boxes[free], cfg.weights)
            pairs = [(q, free[k]) for q, k in dm.pairs] + list(track_labels.items())
            m = Matching.from_pairs(pairs, R, K)
        rfs.append(m)
        if pseudo is not None:
            pm, pseudo_used = pld_match(qs, pseudo, cfg.weights)
            pld.append(pm)
        if n_aug:
            own = m.label_of()
            pairs = [(n, own[M + n]) for n in range(N) if M + n in own]
            tgd.append([Matching.from_pairs(pairs, N, K) for _ in range(1, layout.G)])
    return FrameMatchings(rfs, pld, pseudo_used, tgd)


def frame_objective(cfg: TrainConfig, batch: QueryBatch, params: ModelParams, mask: np.ndarray,
                    suppression: np.ndarray, label_boxes: np.ndarray, fm: FrameMatchings, grad: bool = True):
    """Frame loss ``(rfs + pld + tgd) / objects`` for fixed matchings and fixed suppression.

    Returns ``(parts, FrameGrads | None)`` where ``parts`` holds the unscaled
    per-source totals, the object count and the scaled frame loss.
    """
    preds = forward(batch, params, mask, cfg.beta, suppression=suppression)
    weights = LossWeights(*cfg.weights)
    L, S = preds.scores.shape
    R = batch.layout.real
    d_boxes = np.zeros((L, S, 4))
    d_scores = np.zeros((L, S))
    totals = {"rfs": 0.0, "pld": 0.0, "tgd": 0.0}
    omegas = []
    conf = np.array([p.conf for p in fm.pseudo]) if fm.pseudo else np.zeros(0)
    pseudo_boxes = np.array([tuple(p.box) for p in fm.pseudo]).reshape(-1, 4)
    for l in range(L):
        bd, db, ds = matching_loss(fm.rfs[l], preds.boxes[l, :R], preds.scores[l, :R], label_boxes, weights, grad=grad)
        totals["rfs"] += bd.total
        if grad:
            d_boxes[l, :R] += db
            d_scores[l, :R] += ds
        if fm.pld:
            bd, db, ds = matching_loss(fm.pld[l], preds.boxes[l, :R], preds.scores[l, :R], pseudo_boxes, weights,
                                       pos_weight=conf, neg_weight=cfg.pld_background_weight, grad=grad)
            totals["pld"] += bd.total
            omegas.append(bd.omega)
            if grad:
                d_boxes[l, :R] += db
                d_scores[l, :R] += ds
        for g, gm in enumerate(fm.tgd[l] if fm.tgd else [], start=1):
            rows = batch.layout.group_range(g)
            lo, hi = rows.start, rows.stop
            bd, db, ds = matching_loss(gm, preds.boxes[l, lo:hi], preds.scores[l, lo:hi], label_boxes, weights,
                                       grad=grad)
            totals["tgd"] += bd.total
            if grad:
                d_boxes[l, lo:hi] += db
                d_scores[l, lo:hi] += ds
    n_obj = len(label_boxes)
    scale = 1.0 / n_obj if n_obj else 0.0
    parts = dict(totals, objects=n_obj, loss=scale * sum(totals.values()), omega=omegas)
    if not grad:
        return parts, None
    p = preds.scores
    d_logits = scale * d_scores * p * (1 - p)
    d_delta, d_logit, head = backward(batch, preds, params, scale * d_boxes, d_logits)
    return parts, FrameGrads(d_delta, d_logit, head)


# ---------------------------------------------------------------------------


class Trainer:
    """Owns the model parameters of one run and trains them clip by clip."""

    def __init__(self, cfg: TrainConfig, sequences: list[TrainSequence], params: ModelParams | None = None):
        if cfg.enable_pld and any(s.pseudo is None for s in sequences):
            raise TrainingError("PLD is enabled but a sequence has no detections")
        if not sequences:
            raise TrainingError("no training sequences")
        self.cfg = cfg
        self.sequences = sequences
        self.params = params.copy() if params is not None else ModelParams.init(cfg)
        self.pseudo = [filter_pseudo(s.pseudo, cfg.pseudo_threshold) if s.pseudo is not None else None
                       for s in sequences]
        self.iteration = 0

    @property
    def iters_per_epoch(self) -> int:
        return len(self.sequences) * self.cfg.clips_per_sequence

    def sample_clip(self, seq: TrainSequence, rng: np.random.Generator) -> list[int]:
        cfg = self.cfg
        n = len(seq.frames)
        T = cfg.clip_len
        if T == 1:
            return [int(rng.integers(0, n))]
        hi = min(cfg.interval_max, (n - 1) // (T - 1))
        if hi < cfg.interval_min:
            raise TrainingError(f"sequence {seq.name} ({n} frames) too short for a {T}-frame clip")
        strides = rng.integers(cfg.interval_min, hi + 1, size=T - 1)
        start = int(rng.integers(0, n - int(strides.sum())))
        return [start] + list(start + np.cumsum(strides))

    def train(self, epochs: int | None = None, log: IO[str] | None = None) -> list[dict]:
        records = []
        epochs = self.cfg.epochs if epochs is None else epochs
        for epoch in range(1, epochs + 1):
            order = rngmod.stream(self.cfg.seed, "order", epoch).permutation(len(self.sequences))
            for seq_idx in order:
                for _ in range(self.cfg.clips_per_sequence):
                    rec = self.train_iteration(epoch, int(seq_idx))
                    records.append(rec)
                    if log is not None:
                        log.write(json.dumps(rec, separators=(",", ":")) + "\n")
            logger.info("epoch %d done, last clip loss %.4f", epoch, records[-1]["clip_loss"])
        return records

    def train_iteration(self, epoch: int, seq_idx: int) -> dict:
        cfg = self.cfg
        it = self.iteration
        self.iteration += 1
        rng = rngmod.stream(cfg.seed, "clip", it)
        seq = self.sequences[seq_idx]
        clip = self.sample_clip(seq, rng)
        state = TrackerState()
        track_params: dict[int, SlotParams] = {}
        weights_src = self.params
        g_det_delta = np.zeros_like(weights_src.det_delta)
        g_det_logit = np.zeros_like(weights_src.det_logit)
        g_head = {k: np.zeros_like(getattr(weights_src, k)) for k in HEAD_KEYS}
        g_slots: dict[int, list[np.ndarray]] = {}
        frames_log = []
        clip_loss = 0.0
        for t in clip:
            labels = seq.frames[t]
            pseudo = list(self.pseudo[seq_idx].get(t + 1)) if cfg.enable_pld else None
            out = self.train_frame(t, labels, pseudo, state, track_params, seq_idx, rng)
            parts, grads, batch, flog = out
            clip_loss += parts["loss"]
            M = cfg.M
            g_det_delta += grads.d_delta[:M]
            g_det_logit += grads.d_logit[:M]
            for k in g_head:
                g_head[k] += grads.head[k]
            for row, sid in enumerate(batch.slot_ids[M:], start=M):
                acc = g_slots.setdefault(sid, [np.zeros((cfg.L, 4)), np.zeros(cfg.L)])
                acc[0] += grads.d_delta[row]
                acc[1] += grads.d_logit[row]
            frames_log.append(flog)

        new = optimizer_step(
            {"det_delta": self.params.det_delta, "det_logit": self.params.det_logit},
            {"det_delta": g_det_delta, "det_logit": g_det_logit}, cfg.lr)
        head = optimizer_step({k: getattr(self.params, k) for k in g_head}, g_head, cfg.head_lr)
        for k, v in {**new, **head}.items():
            setattr(self.params, k, v)
        for sid, (gd, gl) in g_slots.items():
            if sid in track_params:
                sp = track_params[sid]
                upd = optimizer_step({"delta": sp.delta, "logit": sp.logit}, {"delta": gd, "logit": gl}, cfg.lr)
                sp.delta, sp.logit = upd["delta"], upd["logit"]
        return {
            "iteration": it,
            "epoch": epoch,
            "iters_per_epoch": self.iters_per_epoch,
            "sequence": seq.name,
            "clip": [int(t) for t in clip],
            "clip_loss": clip_loss,
            "frames": frames_log,
        }

    def train_frame(self, t: int, labels, pseudo, state: TrackerState, track_params: dict, seq_idx: int, rng):
        cfg = self.cfg
        M, L = cfg.M, cfg.L
        part = partition_gts(labels, state)
        sigma_t = propagate_matching(state, labels)
        obs = observe(labels, cfg, rngmod.stream(cfg.seed, "obs", self.sequences[seq_idx].name, t))
        tracks = list(state.live_tracks)
        groups = cfg.G if cfg.enable_tgd else 1
        batch = build_batch(cfg, self.params, tracks, track_params, obs, rng, groups)
        layout = batch.layout
        mask = build_attention_mask(layout, literal=cfg.mask_literal)
        preds = forward(batch, self.params, mask, cfg.beta)
        label_boxes = np.array([tuple(lab.box) for lab in labels], dtype=float).reshape(-1, 4)
        track_labels = {M + n: sigma_t[tr.slot_id] for n, tr in enumerate(tracks) if tr.slot_id in sigma_t}
        fm = compute_matchings(cfg, preds, layout, label_boxes, part.free, track_labels, pseudo)
        parts, grads = frame_objective(cfg, batch, self.params, mask, preds.suppression, label_boxes, fm)

        # lifecycle for the next frame: handoff boxes are detached from the graph
        final = L - 1
        for n, tr in enumerate(tracks):
            tr.ref_box = tuple(map(float, preds.boxes[final, M + n]))
            tr.age += 1
        det_final = Matching.from_pairs([(q, k) for q, k in fm.rfs[final].pairs if q < M], M, len(labels))
        spawned = spawn_tracks(det_final, preds.scores[final, :M], preds.boxes[final, :M], labels, state,
                               cfg.spawn_threshold)
        for slot in spawned:
            track_params[slot.slot_id] = SlotParams.init(cfg)
        retired = retire_tracks(state, cfg.miss_tolerance)

        roles = ["track" if q >= M else "detect" for q, _ in sorted(fm.rfs[final].pairs, key=lambda p: p[1])]
        flog = {
            "t": int(t),
            "ids": [int(lab.identity) for lab in labels],
            "free": [int(i) for i in part.free],
            "M": M,
            "N": layout.N,
            "G": layout.G,
            "tracks": [int(tr.slot_id) for tr in tracks],
            "stages": [[list(p) for p in m.pairs] for m in fm.rfs],
            "label_roles": roles,
            "loss": {"rfs": parts["rfs"], "pld": parts["pld"], "tgd": parts["tgd"],
                     "objects": parts["objects"], "frame": parts["loss"]},
            "pld": [
                {"pairs": [[q, k, fm.pseudo[k].conf, om[q]] for q, k in pm.pairs],
                 "unmatched_omega": sorted({om[q] for q in pm.unmatched_queries})}
                for pm, om in zip(fm.pld, parts["omega"])
            ],
            "spawned": [[int(s.slot_id), int(s.bound_identity)] for s in spawned],
            "retired": [int(s.slot_id) for s in retired],
        }
        return parts, grads, batch, flog
