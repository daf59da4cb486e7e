"""Query lifecycle: free/locked GT partition, frame-to-frame propagation, spawning, retirement."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assignment import Matching
from .geometry import Box

DEFAULT_MISS_TOLERANCE = 5
DEFAULT_SPAWN_THRESHOLD = 0.5


class LifecycleError(ValueError):
    pass


class Role(enum.Enum):
    DETECT = "detect"
    TRACK = "track"


@dataclass
class QuerySlot:
    slot_id: int
    role: Role
    ref_box: Box
    bound_identity: int | None = None
    miss_count: int = 0
    age: int = 0

    def __post_init__(self):
        if self.role is Role.DETECT and self.bound_identity is not None:
            raise LifecycleError("detect slots never carry an identity")


@dataclass
class GTPartition:
    free: list[int]  # indices into the frame's label list
    locked: list[int]


@dataclass
class TrackerState:
    live_tracks: list[QuerySlot] = field(default_factory=list)
    next_slot_id: int = 0
    sigma_t: dict[int, int] = field(default_factory=dict)  # slot_id -> label index

    def bound_identities(self) -> set[int]:
        return {t.bound_identity for t in self.live_tracks}

    def allocate_id(self) -> int:
        sid = self.next_slot_id
        self.next_slot_id += 1
        return sid


def _identities(frame_labels) -> list[int]:
    ids = [lab.identity for lab in frame_labels]
    if len(set(ids)) != len(ids):
        raise LifecycleError(f"duplicate identities in frame: {sorted(ids)}")
    return ids


def partition_gts(frame_labels, state: TrackerState) -> GTPartition:
    bound = state.bound_identities()
    free, locked = [], []
    for i, ident in enumerate(_identities(frame_labels)):
        (locked if ident in bound else free).append(i)
    return GTPartition(free, locked)


def propagate_matching(state: TrackerState, frame_labels) -> dict[int, int]:
    """Carry each live track to its identity's label in this frame.

    Tracks whose identity is absent stay unmatched and accumulate a miss.
    """
    index = {ident: i for i, ident in enumerate(_identities(frame_labels))}
    sigma = {}
    for track in state.live_tracks:
        k = index.get(track.bound_identity)
        if k is None:
            track.miss_count += 1
        else:
            track.miss_count = 0
            sigma[track.slot_id] = k
    state.sigma_t = sigma
    return sigma


def spawn_tracks(
    final_matching: Matching,
    final_scores: Sequence[float],
    final_boxes,
    frame_labels,
    state: TrackerState,
    threshold: float = DEFAULT_SPAWN_THRESHOLD,
) -> list[QuerySlot]:
    """Create a track for every matched detect query scoring strictly above ``threshold``.

    ``final_matching`` indexes detect queries (rows) and ``frame_labels``.
    The new track's reference box is the detect query's own final box.
    """
    bound = state.bound_identities()
    spawned = []
    for q, k in final_matching.pairs:
        if not final_scores[q] > threshold:
            continue
        ident = frame_labels[k].identity
        if ident in bound:
            raise LifecycleError(f"identity {ident} is already bound to a live track")
        slot = QuerySlot(state.allocate_id(), Role.TRACK, Box(*map(float, np.asarray(final_boxes[q]))), ident)
        state.live_tracks.append(slot)
        bound.add(ident)
        spawned.append(slot)
    return spawned


def retire_tracks(state: TrackerState, miss_tolerance: int = DEFAULT_MISS_TOLERANCE) -> list[QuerySlot]:
    retired = [t for t in state.live_tracks if t.miss_count >= miss_tolerance]
    if retired:
        state.live_tracks = [t for t in state.live_tracks if t.miss_count < miss_tolerance]
        for t in retired:
            state.sigma_t.pop(t.slot_id, None)
    return retired
