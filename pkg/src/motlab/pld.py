"""Pseudo labels from an offline detector: file I/O, confidence filtering and matching."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .assignment import DEFAULT_WEIGHTS, Matching, MatchingSpace, QuerySet, match_in_space
from .geometry import Box, clamp_to_arena

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.05


class DetectionFormatError(ValueError):
    pass


class PseudoLabel(NamedTuple):
    box: Box
    conf: float


@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-frame pseudo labels of one sequence; frame keys follow the file (1-based)."""

    frames: dict[int, tuple[PseudoLabel, ...]] = field(default_factory=dict)
    sequence: str = ""

    def get(self, frame: int) -> tuple[PseudoLabel, ...]:
        return self.frames.get(frame, ())

    def __len__(self) -> int:
        return sum(len(v) for v in self.frames.values())


def load_detections(path, arena: tuple[float, float] = (1.0, 1.0), sequence: str = "") -> PseudoLabelSet:
    """Parse ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`` lines."""
    aw, ah = arena
    frames: dict[int, list[PseudoLabel]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise DetectionFormatError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            left, top, w, h, conf = (float(x) for x in parts[2:7])
        except ValueError as exc:
            raise DetectionFormatError(f"{path}:{lineno}: {exc}") from None
        if not 0.0 <= conf <= 1.0:
            raise DetectionFormatError(f"{path}:{lineno}: confidence {conf} outside [0, 1]")
        if w <= 0 or h <= 0:
            raise DetectionFormatError(f"{path}:{lineno}: non-positive box size")
        box = clamp_to_arena(Box((left + w / 2) / aw, (top + h / 2) / ah, w / aw, h / ah))
        if box.w <= 0 or box.h <= 0:
            raise DetectionFormatError(f"{path}:{lineno}: box lies outside the arena")
        frames.setdefault(frame, []).append(PseudoLabel(box, conf))
    return PseudoLabelSet({k: tuple(v) for k, v in frames.items()}, sequence)


def write_detections(path, dets: PseudoLabelSet) -> None:
    lines = []
    for frame in sorted(dets.frames):
        for box, conf in dets.frames[frame]:
            cx, cy, w, h = box
            lines.append(f"{frame},-1,{cx - w / 2!r},{cy - h / 2!r},{w!r},{h!r},{conf!r},-1,-1,-1\n")
    Path(path).write_text("".join(lines))


def filter_pseudo(dets: PseudoLabelSet, threshold: float = DEFAULT_THRESHOLD) -> PseudoLabelSet:
    """Keep labels with ``conf >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    kept = {k: tuple(p for p in v if p.conf >= threshold) for k, v in dets.frames.items()}
    return PseudoLabelSet({k: v for k, v in kept.items() if v}, dets.sequence)


def cap_pseudo(pseudo: list[PseudoLabel], n_queries: int) -> list[PseudoLabel]:
    """Truncate to the ``n_queries`` most confident labels (stable for equal confidence)."""
    if len(pseudo) <= n_queries:
        return list(pseudo)
    logger.warning("%d pseudo labels for %d queries; keeping the most confident", len(pseudo), n_queries)
    order = sorted(range(len(pseudo)), key=lambda i: -pseudo[i].conf)[:n_queries]
    return [pseudo[i] for i in sorted(order)]


def pld_match(queries: QuerySet, pseudo_frame, weights=DEFAULT_WEIGHTS) -> tuple[Matching, list[PseudoLabel]]:
    """All-query matching against (capped) pseudo boxes.

    Returns the matching together with the pseudo-label list it indexes.
    """
    pseudo = cap_pseudo(list(pseudo_frame), len(queries))
    if not pseudo:
        return Matching.empty(len(queries)), pseudo
    m = match_in_space(MatchingSpace.ALL_QUERIES, queries, [p.box for p in pseudo], weights)
    return m, pseudo
