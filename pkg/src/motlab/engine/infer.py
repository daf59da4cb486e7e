"""Inference: detect queries spawn tracks, tracks follow their targets, no label information."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .. import rng as rngmod
from ..config import TrainConfig
from ..geometry import Box
from ..lifecycle import QuerySlot, Role, TrackerState
from ..tgd import build_attention_mask
from ..world import GTLabel, write_gt
from .model import ModelParams, SlotParams, forward, observe
from .train import build_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackOutput:
    box: Box
    identity: int
    score: float


def run_inference(params: ModelParams, frames, cfg: TrainConfig, sequence: str = "") -> list[list[TrackOutput]]:
    """Track through ``frames`` (per-frame GT lists, used only to render observations).

    Live tracks scoring at least ``emit_threshold`` are emitted; the others
    count a miss and retire after ``miss_tolerance`` consecutive misses.
    Detect queries scoring above ``spawn_threshold`` start new tracks.
    """
    state = TrackerState()
    slot_params: dict[int, SlotParams] = {}
    out: list[list[TrackOutput]] = []
    rng = rngmod.stream(cfg.seed, "infer", sequence)
    final = cfg.L - 1
    for t, labels in enumerate(frames):
        obs = observe(labels, cfg, rngmod.stream(cfg.seed, "infer-obs", sequence, t))
        tracks = list(state.live_tracks)
        batch = build_batch(cfg, params, tracks, slot_params, obs, rng, groups=1)
        mask = build_attention_mask(batch.layout)
        preds = forward(batch, params, mask, cfg.beta)
        boxes, scores = preds.boxes[final], preds.scores[final]
        emitted = []
        for n, tr in enumerate(tracks):
            q = cfg.M + n
            tr.ref_box = Box(*map(float, boxes[q]))
            tr.age += 1
            if scores[q] >= cfg.emit_threshold:
                tr.miss_count = 0
                emitted.append(TrackOutput(tr.ref_box, tr.slot_id, float(scores[q])))
            else:
                tr.miss_count += 1
        for q in np.flatnonzero(scores[: cfg.M] > cfg.spawn_threshold):
            slot = QuerySlot(state.allocate_id(), Role.TRACK, Box(*map(float, boxes[q])))
            state.live_tracks.append(slot)
            slot_params[slot.slot_id] = SlotParams.init(cfg)
            emitted.append(TrackOutput(slot.ref_box, slot.slot_id, float(scores[q])))
        state.live_tracks = [tr for tr in state.live_tracks if tr.miss_count < cfg.miss_tolerance]
        out.append(emitted)
    return out


def write_tracks(path, outputs: list[list[TrackOutput]]) -> None:
    """Write tracker output in the GT file format (identity = slot id)."""
    write_gt(path, [[GTLabel(o.box, o.identity) for o in frame] for frame in outputs])
