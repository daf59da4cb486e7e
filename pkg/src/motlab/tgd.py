"""Track-group denoising: group expansion, reference-box scaling noise, leakage mask.

Query order is ``[detect (M), original tracks (N), augmented group 1 (N), ...]``.
``G`` counts the original group, so ``S = M + G * N``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box

DEFAULT_GROUPS = 4
DEFAULT_SCALE_RANGE = (0.7, 1.3)
MIN_SIZE = 1e-3


@dataclass(frozen=True)
class GroupLayout:
    M: int
    N: int
    G: int = 1

    def __post_init__(self):
        if self.G < 1 or self.M < 0 or self.N < 0:
            raise ValueError(f"invalid layout {self}")

    @property
    def S(self) -> int:
        return self.M + self.G * self.N

    @property
    def real(self) -> int:
        return self.M + self.N

    def group_range(self, g: int) -> range:
        start = self.M + g * self.N
        return range(start, start + self.N)

    def group_of(self, i: int) -> int:
        """-1 for detect queries, else the track group index."""
        if i < self.M:
            return -1
        return (i - self.M) // self.N

    def original_of(self, i: int) -> int:
        """Map any query index back to its real-block index."""
        if i < self.M:
            return i
        return self.M + (i - self.M) % self.N


def expand_groups(detect_slots: Sequence, track_slots: Sequence, G: int = DEFAULT_GROUPS):
    """Return ``(queries, layout)`` with ``G - 1`` copies of the track slots appended.

    Copies share bound identity with their original and therefore reuse its
    label assignment.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    layout = GroupLayout(len(detect_slots), len(track_slots), G)
    out = list(detect_slots) + list(track_slots)
    for _ in range(1, G):
        out.extend(copy.copy(t) for t in track_slots)
    return out, layout


def noise_reference_boxes(boxes: Sequence[Box], scale_range=DEFAULT_SCALE_RANGE, rng=None) -> list[Box]:
    """Scale width and height by independent uniform factors; centers are untouched.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError("scale range must satisfy 0 < lo <= hi")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    arr = np.asarray([tuple(b) for b in boxes], dtype=float).reshape(-1, 4)
    factors = rng.uniform(lo, hi, size=(len(arr), 2))
    out = arr.copy()
    out[:, 2:] = np.clip(arr[:, 2:] * factors, MIN_SIZE, 1.0)
    return [Box(*map(float, row)) for row in out]


def build_attention_mask(layout: GroupLayout, literal: bool = False) -> np.ndarray:
    """``S x S`` uint8 mask; ``1`` blocks attention from query ``i`` to query ``j``.

    Default rule: the real block (detect + original tracks) never sees
    augmented queries; augmented queries see the real block and their own
    group only.  ``literal=True`` evaluates the alternative variant
    (strict ``j > M+N`` and a group test that also blocks the real block).
    """
    S, R, N = layout.S, layout.real, layout.N
    mask = np.zeros((S, S), dtype=np.uint8)
    if layout.G == 1 or N == 0:
        return mask
    idx = np.arange(S)
    i, j = idx[:, None], idx[None, :]
    # floor division keeps negative group indices for the real block
    gi, gj = (i - R) // N, (j - R) // N
    if literal:
        blocked = ((i < R) & (j > R)) | ((i >= R) & (gi != gj))
    else:
        blocked = ((i < R) & (j >= R)) | ((i >= R) & (j >= R) & (gi != gj))
    mask[blocked] = 1
    return mask


def mask_to_text(mask: np.ndarray) -> str:
    return "\n".join("".join(str(int(v)) for v in row) for row in mask) + "\n"
