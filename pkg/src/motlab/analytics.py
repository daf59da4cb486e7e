"""Training-log diagnostics (label routing, stage misalignment) and lite tracking metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assignment import hungarian
from .geometry import pairwise_iou

logger = logging.getLogger(__name__)

STAGE_MODES = ("all", "final")


class LogError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# logs


def read_log(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise LogError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
    return records


def _by_epoch(records: list[dict]) -> dict[int, list[dict]]:
    """Group records by epoch and reject logs with a missing or partial epoch."""
    if not records:
        raise LogError("empty training log")
    groups: dict[int, list[dict]] = defaultdict(list)
    for rec in records:
        try:
            groups[int(rec["epoch"])].append(rec)
        except (KeyError, TypeError) as exc:
            raise LogError(f"record without epoch: {exc}") from None
    epochs = sorted(groups)
    if epochs != list(range(1, epochs[-1] + 1)):
        raise LogError(f"log epochs are not contiguous from 1: {epochs}")
    for ep in epochs:
        want = groups[ep][0].get("iters_per_epoch")
        if want is None or len(groups[ep]) != want:
            raise LogError(f"epoch {ep} has {len(groups[ep])} records, expected {want} (truncated log)")
    return dict(groups)


# ---------------------------------------------------------------------------
# label routing


@dataclass
class EpochAssignment:
    labels_to_detect: int = 0
    labels_to_track: int = 0
    activation: Counter = field(default_factory=Counter)

    @property
    def pct_detect(self) -> float:
        n = self.labels_to_detect + self.labels_to_track
        return self.labels_to_detect / n if n else 0.0

    @property
    def pct_track(self) -> float:
        n = self.labels_to_detect + self.labels_to_track
        return self.labels_to_track / n if n else 0.0


@dataclass
class AssignmentStats:
    epochs: dict[int, EpochAssignment]
    stages: str = "all"

    def activation_totals(self) -> Counter:
        total = Counter()
        for e in self.epochs.values():
            total.update(e.activation)
        return total


def assignment_stats(records: list[dict], stages: str = "all") -> AssignmentStats:
    """Count, per epoch, how many label assignments went to detect vs track queries.

    With ``stages="all"`` every stage's matching contributes one assignment
    per matched label (this is where supervision released to detect queries
    in early stages shows up).  With ``stages="final"`` only the final stage
    counts, which follows the propagated association.  A detect slot's
    activation count is the number of assignments it received.
    """
    if stages not in STAGE_MODES:
        raise ValueError(f"stages must be one of {STAGE_MODES}")
    out = {}
    for ep, recs in sorted(_by_epoch(records).items()):
        acc = EpochAssignment()
        for rec in recs:
            for fr in rec["frames"]:
                M = fr["M"]
                chosen = fr["stages"] if stages == "all" else fr["stages"][-1:]
                for pairs in chosen:
                    for q, _k in pairs:
                        if q < M:
                            acc.labels_to_detect += 1
                            acc.activation[q] += 1
                        else:
                            acc.labels_to_track += 1
        out[ep] = acc
    return AssignmentStats(out, stages)


@dataclass
class MisalignmentStats:
    misaligned: dict[int, int]
    labels: dict[int, int]

    def fraction(self, epoch: int) -> float:
        n = self.labels[epoch]
        return self.misaligned[epoch] / n if n else 0.0

    @property
    def fractions(self) -> dict[int, float]:
        return {ep: self.fraction(ep) for ep in sorted(self.labels)}


def frame_misaligned(frame: dict) -> tuple[int, int]:
    """(misaligned labels, labels) for one logged frame."""
    per_stage = [{k: q for q, k in pairs} for pairs in frame["stages"]]
    final = per_stage[-1]
    n = len(frame["ids"])
    bad = sum(1 for k in range(n) if any(st.get(k) != final.get(k) for st in per_stage[:-1]))
    return bad, n


def misalignment_stats(records: list[dict]) -> MisalignmentStats:
    """A label is misaligned when some non-final stage matched it to a different query than the final stage."""
    mis, tot = {}, {}
    for ep, recs in sorted(_by_epoch(records).items()):
        mis[ep] = tot[ep] = 0
        for rec in recs:
            for fr in rec["frames"]:
                b, n = frame_misaligned(fr)
                mis[ep] += b
                tot[ep] += n
    return MisalignmentStats(mis, tot)


def write_epoch_csv(path, astats: AssignmentStats, mstats: MisalignmentStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "pct_detect", "pct_track", "misaligned_fraction"])
        for ep, e in sorted(astats.epochs.items()):
            w.writerow([ep, repr(e.pct_detect), repr(e.pct_track), repr(mstats.fraction(ep))])


def write_activation_csv(path, astats: AssignmentStats) -> None:
    totals = astats.activation_totals()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot_id", "activation_count"])
        for slot in sorted(totals):
            w.writerow([slot, totals[slot]])


# ---------------------------------------------------------------------------
# tracking metrics


@dataclass(frozen=True)
class TrackingMetrics:
    MOTA: float
    IDS: int
    IDF1_lite: float
    FP: int
    FN: int
    num_gt: int
    num_pred: int

    def to_dict(self) -> dict:
        return asdict(self)


def match_frame(gt_boxes: np.ndarray, pred_boxes: np.ndarray, iou_threshold: float) -> list[tuple[int, int]]:
    """Maximum-IoU one-to-one matching restricted to pairs with IoU >= threshold."""
    if len(gt_boxes) == 0 or len(pred_boxes) == 0:
        return []
    ious = pairwise_iou(gt_boxes, pred_boxes)
    ok = ious >= iou_threshold
    if not ok.any():
        return []
    # an unusable pair costs more than any set of usable ones, so the number
    # of usable matches is maximized first and total IoU second
    cost = np.where(ok, 1.0 - ious, float(min(ious.shape)) + 1.0)
    if cost.shape[0] <= cost.shape[1]:
        pairs = [(k, q) for q, k in hungarian(cost.T).pairs]
    else:
        pairs = list(hungarian(cost).pairs)
    return sorted((g, p) for g, p in pairs if ok[g, p])


def evaluate(pred_frames, gt_frames, iou_threshold: float = 0.5) -> TrackingMetrics:
    """MOTA, identity switches and a greedy-mapping IDF1 over aligned frame lists.

    Both inputs are per-frame lists of items with ``box`` and ``identity``.
    """
    if len(pred_frames) != len(gt_frames):
        raise EvaluationError(f"frame count mismatch: {len(pred_frames)} predicted vs {len(gt_frames)} GT")
    fp = fn = ids = 0
    n_gt = n_pred = 0
    last: dict[int, int] = {}
    co = Counter()
    for preds, gts in zip(pred_frames, gt_frames):
        gb = np.array([tuple(g.box) for g in gts], dtype=float).reshape(-1, 4)
        pb = np.array([tuple(p.box) for p in preds], dtype=float).reshape(-1, 4)
        pairs = match_frame(gb, pb, iou_threshold)
        n_gt += len(gts)
        n_pred += len(preds)
        fn += len(gts) - len(pairs)
        fp += len(preds) - len(pairs)
        for g, p in pairs:
            gid, pid = gts[g].identity, preds[p].identity
            if gid in last and last[gid] != pid:
                ids += 1
            last[gid] = pid
            co[(gid, pid)] += 1
    mota = 1.0 - (fn + fp + ids) / n_gt if n_gt else math.nan
    used_g, used_p = set(), set()
    idtp = 0
    for (gid, pid), n in sorted(co.items(), key=lambda item: (-item[1], item[0])):
        if gid in used_g or pid in used_p:
            continue
        used_g.add(gid)
        used_p.add(pid)
        idtp += n
    denom = n_gt + n_pred
    idf1 = 2 * idtp / denom if denom else 1.0
    return TrackingMetrics(mota, ids, idf1, fp, fn, n_gt, n_pred)


def write_report(path, metrics: TrackingMetrics, extra: dict | None = None) -> None:
    doc = dict(metrics.to_dict())
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
