"""Cost matrices, optimal one-to-one matching and the two matching spaces.

Rows of a cost matrix are queries, columns are labels.  Every label must be
matched, so a matrix with more columns than rows is rejected.

Among equal-cost optima the returned matching is the one whose pair list,
sorted by query index, is lexicographically smallest; a query that is left
unmatched ranks after every label it could have taken.  :func:`hungarian`
and :func:`brute_force_assignment` share this rule.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, pairwise_giou, pairwise_l1

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
DEFAULT_WEIGHTS = (2.0, 5.0, 2.0)
BRUTE_FORCE_MAX_DIM = 8
BRUTE_FORCE_MAX_ENUM = 5_000_000


class AssignmentError(ValueError):
    pass


class MatchingSpace(enum.Enum):
    DETECT_ONLY = "detect_only"
    ALL_QUERIES = "all_queries"


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...] = ()
    unmatched_labels: tuple[int, ...] = ()

    @classmethod
    def from_pairs(cls, pairs, n_queries: int, n_labels: int) -> "Matching":
        pairs = tuple(sorted((int(q), int(k)) for q, k in pairs))
        used_q = {q for q, _ in pairs}
        used_k = {k for _, k in pairs}
        if len(used_q) != len(pairs) or len(used_k) != len(pairs):
            raise AssignmentError("matching is not one-to-one")
        return cls(
            pairs,
            tuple(q for q in range(n_queries) if q not in used_q),
            tuple(k for k in range(n_labels) if k not in used_k),
        )

    @classmethod
    def empty(cls, n_queries: int, n_labels: int = 0) -> "Matching":
        return cls((), tuple(range(n_queries)), tuple(range(n_labels)))

    def label_of(self) -> dict[int, int]:
        return dict(self.pairs)

    def query_of(self) -> dict[int, int]:
        return {k: q for q, k in self.pairs}

    def total(self, cost: np.ndarray) -> float:
        return math.fsum(float(cost[q, k]) for q, k in self.pairs)


def positive_focal(p: np.ndarray | float, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA, eps: float = 1e-7):
    p = np.clip(p, eps, 1 - eps)
    return -alpha * (1 - p) ** gamma * np.log(p)


def build_cost_matrix(predictions: Sequence[tuple[Box, float]], labels: Sequence[Box], weights=DEFAULT_WEIGHTS) -> np.ndarray:
    """Pairwise matching cost ``λ_cls·FL⁺(score) + λ_l1·L1 + λ_giou·(1 − GIoU)``."""
    if len(predictions) == 0 or len(labels) == 0:
        raise AssignmentError("cost matrix needs at least one prediction and one label")
    boxes = np.array([tuple(b) for b, _ in predictions], dtype=float)
    scores = np.array([s for _, s in predictions], dtype=float)
    return cost_matrix_from_arrays(boxes, scores, np.array([tuple(b) for b in labels], dtype=float), weights)


def cost_matrix_from_arrays(boxes: np.ndarray, scores: np.ndarray, label_boxes: np.ndarray, weights=DEFAULT_WEIGHTS) -> np.ndarray:
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise AssignmentError("scores must lie in [0, 1]")
    w_cls, w_l1, w_giou = weights
    cls = w_cls * positive_focal(scores)[:, None]
    return cls + w_l1 * pairwise_l1(boxes, label_boxes) + w_giou * (1.0 - pairwise_giou(boxes, label_boxes))


# ---------------------------------------------------------------------------
# solvers


def _potentials(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian on the label-major matrix.

    ``cost`` is ``(n_labels, n_queries)`` with ``n_labels <= n_queries``.
    Returns (label potentials, query potentials, query assigned to each label).
    Query potentials are <= 0 and exactly 0 for queries left unmatched, so
    together they form an optimal dual of the rectangular problem.
    """
    n, m = cost.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: label (1-based) owning query j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    owner = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            owner[p[j] - 1] = j - 1
    return u[1:], v[1:], owner


def _lex_canonical(tight: list[list[int]], col_of: list[int], n_real: int) -> list[int]:
    """Rotate a perfect matching within the tight graph to the lexicographic optimum.

    ``tight[q]`` lists the columns tight for query ``q``; columns ``>= n_real``
    are interchangeable dummies standing for "unmatched".
    """
    m = len(col_of)
    owner = [0] * m
    for q, c in enumerate(col_of):
        owner[c] = q
    fixed = [False] * m

    def find_path(q: int, target: int, skip: int, seen: set[int]) -> bool:
        # q has lost its column; look for an alternating path ending at `target`
        for c in tight[q]:
            if c == target:
                col_of[q] = c
                owner[c] = q
                return True
        for c in tight[q]:
            o = owner[c]
            if o == q or o == skip or fixed[o] or o in seen:
                continue
            seen.add(o)
            if find_path(o, target, skip, seen):
                col_of[q] = c
                owner[c] = q
                return True
        return False

    def take(j: int, c: int) -> bool:
        if col_of[j] == c:
            return True
        o = owner[c]
        if fixed[o]:
            return False
        freed = col_of[j]
        snapshot = (list(col_of), list(owner))
        col_of[j] = c
        owner[c] = j
        if find_path(o, freed, j, {o}):
            return True
        col_of[:], owner[:] = snapshot
        return False

    for j in range(m):
        real = sorted(c for c in tight[j] if c < n_real)
        done = False
        for c in real:
            if take(j, c):
                done = True
                break
        if not done:
            for c in (c for c in tight[j] if c >= n_real):
                if take(j, c):
                    break
        fixed[j] = True
    return col_of


def hungarian(cost: np.ndarray) -> Matching:
    """Minimum-total-cost matching covering every label (column)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise AssignmentError("cost must be a 2-D matrix")
    n_q, n_l = cost.shape
    if n_l == 0:
        return Matching.empty(n_q)
    if n_l > n_q:
        raise AssignmentError(f"insufficient queries: {n_q} queries for {n_l} labels")
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost entries must be finite")

    u, v, owner = _potentials(cost.T)
    reduced = cost - u[None, :] - v[:, None]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = []
    dummy_cols = list(range(n_l, n_q))
    for q in range(n_q):
        cols = [int(k) for k in np.flatnonzero(reduced[q] <= tol)]
        if v[q] >= -tol:
            cols.extend(dummy_cols)
        tight.append(cols)
    col_of = [-1] * n_q
    for k, q in enumerate(owner):
        col_of[q] = k
    spare = iter(dummy_cols)
    for q in range(n_q):
        if col_of[q] < 0:
            col_of[q] = next(spare)
            if col_of[q] not in tight[q]:  # numerical safety; unmatched queries have v == 0
                tight[q].append(col_of[q])
    col_of = _lex_canonical(tight, col_of, n_l)
    pairs = [(q, c) for q, c in enumerate(col_of) if c < n_l]
    return Matching.from_pairs(pairs, n_q, n_l)


def brute_force_assignment(cost: np.ndarray) -> Matching:
    """Exhaustive oracle: enumerate every label->query injection."""
    cost = np.asarray(cost, dtype=float)
    n_q, n_l = cost.shape
    if n_l == 0:
        return Matching.empty(n_q)
    if n_l > n_q:
        raise AssignmentError(f"insufficient queries: {n_q} queries for {n_l} labels")
    if min(n_q, n_l) > BRUTE_FORCE_MAX_DIM or math.perm(n_q, n_l) > BRUTE_FORCE_MAX_ENUM:
        raise AssignmentError("matrix too large for brute-force enumeration")
    perms = np.array(list(itertools.permutations(range(n_q), n_l)), dtype=int)
    totals = cost[perms, np.arange(n_l)].sum(axis=1)
    best = totals.min()
    # re-check candidates with an order-independent sum
    cands = perms[totals <= best + 1e-9 * max(1.0, abs(best))]
    exact = [math.fsum(cost[perm, np.arange(n_l)]) for perm in cands]
    lo = min(exact)
    keys = []
    for perm, t in zip(cands, exact):
        if t == lo:
            keys.append(_lex_key(perm, n_q, n_l))
    key = min(keys)
    pairs = [(q, k) for q, k in key if k < n_l]
    return Matching.from_pairs(pairs, n_q, n_l)


def _lex_key(perm, n_q: int, n_l: int) -> tuple:
    # unmatched queries encoded with label n_l so they sort after real labels
    label_of = {int(q): k for k, q in enumerate(perm)}
    return tuple((q, label_of.get(q, n_l)) for q in range(n_q))


# ---------------------------------------------------------------------------


@dataclass
class QuerySet:
    """Predictions of a query set: boxes ``(n, 4)``, scores ``(n,)`` and a track flag per query."""

    boxes: np.ndarray
    scores: np.ndarray
    is_track: np.ndarray = field(default=None)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.is_track is None:
            self.is_track = np.zeros(len(self.scores), dtype=bool)
        self.is_track = np.asarray(self.is_track, dtype=bool)

    def __len__(self) -> int:
        return len(self.scores)


def match_in_space(space: MatchingSpace, queries: QuerySet, labels, weights=DEFAULT_WEIGHTS) -> Matching:
    """Match ``labels`` against the query subset admitted by ``space``.

    For ``DETECT_ONLY`` the caller passes the free-GT boxes; for
    ``ALL_QUERIES`` every label of the frame.  Indices in the result are global
    query indices and positions in ``labels``.
    """
    label_boxes = np.asarray([tuple(b) for b in labels], dtype=float).reshape(-1, 4)
    n = len(queries)
    if len(label_boxes) == 0:
        return Matching.empty(n)
    if space is MatchingSpace.DETECT_ONLY:
        idx = np.flatnonzero(~queries.is_track)
    else:
        idx = np.arange(n)
    if len(idx) < len(label_boxes):
        raise AssignmentError(f"insufficient queries: {len(idx)} queries for {len(label_boxes)} labels")
    cost = cost_matrix_from_arrays(queries.boxes[idx], queries.scores[idx], label_boxes, weights)
    local = hungarian(cost)
    return Matching.from_pairs([(int(idx[q]), k) for q, k in local.pairs], n, len(label_boxes))
