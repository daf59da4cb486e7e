import csv
import json
import math
import random

import pytest

from motlab.analytics import (
    EvaluationError,
    LogError,
    assignment_stats,
    evaluate,
    misalignment_stats,
    read_log,
    write_activation_csv,
    write_epoch_csv,
    write_report,
)
from motlab.geometry import Box
from motlab.world import GTLabel


def frame(ids, stages, M=4, free=None):
    return {"ids": list(ids), "M": M, "stages": stages, "free": list(range(len(ids))) if free is None else free}


def record(frames, epoch=1, iters=1, iteration=0):
    return {"iteration": iteration, "epoch": epoch, "iters_per_epoch": iters, "frames": frames}


def test_all_free_labels_go_to_detect():
    log = [record([frame([1, 2, 3], [[[0, 0], [1, 1], [2, 2]]] * 2)])]
    for mode in ("all", "final"):
        st = assignment_stats(log, mode).epochs[1]
        assert st.pct_detect == 1.0 and st.pct_track == 0.0


def test_scripted_clip_one_birth_then_locked():
    # identity 7 is picked up by detect slot 2 in frame 1 and carried by the track (query index 4) afterwards
    frames = [frame([7], [[[2, 0]], [[2, 0]]])] + [frame([7], [[[4, 0]], [[4, 0]]], free=[]) for _ in range(4)]
    st = assignment_stats([record(frames)])
    assert st.epochs[1].pct_detect == pytest.approx(0.2)
    assert st.activation_totals() == {2: 2}
    assert assignment_stats([record(frames)], "final").activation_totals() == {2: 1}


def test_release_in_early_stages_counts_only_with_all_stages():
    frames = [frame([7], [[[1, 0]], [[4, 0]]], free=[])]
    assert assignment_stats([record(frames)], "all").epochs[1].pct_detect == 0.5
    assert assignment_stats([record(frames)], "final").epochs[1].pct_detect == 0.0


def test_conservation_and_permutation_invariance():
    rng = random.Random(0)
    recs = []
    for it in range(6):
        frames = []
        for _ in range(3):
            k = rng.randint(1, 4)
            stages = [[[rng.choice([q, q + 4]), q] for q in range(k)] for _ in range(3)]
            frames.append(frame(list(range(k)), stages))
        recs.append(record(frames, iters=6, iteration=it))
    st = assignment_stats(recs)
    e = st.epochs[1]
    total = sum(len(p) for r in recs for f in r["frames"] for p in f["stages"])
    assert e.labels_to_detect + e.labels_to_track == total
    shuffled = recs[:]
    rng.shuffle(shuffled)
    assert assignment_stats(shuffled).epochs[1] == e
    assert misalignment_stats(shuffled).fractions == misalignment_stats(recs).fractions


def test_misalignment_examples():
    same = [[[0, 0], [1, 1], [5, 2], [2, 3]]] * 3
    assert misalignment_stats([record([frame([1, 2, 3, 4], same)])]).fraction(1) == 0.0
    first = [[0, 0], [3, 1], [5, 2], [2, 3]]
    ms = misalignment_stats([record([frame([1, 2, 3, 4], [first, same[0], same[0]])])])
    assert ms.fraction(1) == 0.25


def test_unmatched_in_one_stage_counts_as_misaligned():
    stages = [[[0, 0]], [[0, 0], [1, 1]]]
    assert misalignment_stats([record([frame([1, 2], stages)])]).fraction(1) == 0.5


def test_truncated_log_rejected():
    recs = [record([frame([1], [[[0, 0]]] * 2)], iters=3, iteration=i) for i in range(2)]
    with pytest.raises(LogError):
        assignment_stats(recs)
    with pytest.raises(LogError):
        misalignment_stats([record([], epoch=2)])
    with pytest.raises(LogError):
        assignment_stats([])


def test_read_log_rejects_garbage(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text('{"epoch": 1}\nnot json\n')
    with pytest.raises(LogError):
        read_log(p)


def test_csv_outputs(tmp_path):
    frames = [frame([7], [[[2, 0]], [[2, 0]]])] + [frame([7], [[[4, 0]], [[4, 0]]], free=[]) for _ in range(4)]
    recs = [record(frames, epoch=e) for e in (1, 2)]
    st, ms = assignment_stats(recs), misalignment_stats(recs)
    write_epoch_csv(tmp_path / "e.csv", st, ms)
    write_activation_csv(tmp_path / "a.csv", st)
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["epoch", "pct_detect", "pct_track", "misaligned_fraction"]
    assert [float(x) for x in rows[1][1:]] == [0.2, 0.8, 0.0]
    assert (tmp_path / "a.csv").read_text() == "slot_id,activation_count\n2,4\n"


# ---------------------------------------------------------------------------


def boxes_frame(ids, shift=0.0):
    return [GTLabel(Box(0.1 + 0.15 * i + shift, 0.5, 0.1, 0.1), ident) for i, ident in enumerate(ids)]


def test_perfect_output():
    gt = [boxes_frame([1, 2]) for _ in range(5)]
    m = evaluate(gt, gt)
    assert m.MOTA == 1.0 and m.IDS == 0 and m.IDF1_lite == 1.0


def test_one_false_positive_over_ten_boxes():
    gt = [boxes_frame([1, 2]) for _ in range(5)]
    pred = [list(f) for f in gt]
    pred[3] = pred[3] + [GTLabel(Box(0.8, 0.8, 0.1, 0.1), 9)]
    m = evaluate(pred, gt)
    assert m.MOTA == pytest.approx(0.9) and m.FP == 1 and m.num_gt == 10


def test_identity_swap_counts_two():
    gt = [boxes_frame([1, 2]), boxes_frame([1, 2])]
    pred = [boxes_frame([1, 2]), boxes_frame([2, 1])]
    m = evaluate(pred, gt)
    assert m.IDS == 2


def test_relabeling_invariance():
    gt = [boxes_frame([1, 2, 3]), boxes_frame([1, 2, 3], 0.01), boxes_frame([1, 3, 2], 0.02)]
    pred = [boxes_frame([5, 6, 7]), boxes_frame([5, 7, 6], 0.01), boxes_frame([5, 7, 6], 0.02)]
    relabel = {5: 42, 6: -1, 7: 3}
    pred2 = [[GTLabel(p.box, relabel[p.identity]) for p in f] for f in pred]
    assert evaluate(pred, gt) == evaluate(pred2, gt)


def test_below_threshold_is_miss_and_false_positive():
    gt = [boxes_frame([1])]
    pred = [boxes_frame([1], shift=0.08)]
    m = evaluate(pred, gt)
    assert (m.FN, m.FP) == (1, 1)


def test_no_ground_truth_gives_nan_mota():
    assert math.isnan(evaluate([[]], [[]]).MOTA)


def test_frame_count_mismatch():
    with pytest.raises(EvaluationError):
        evaluate([[]], [[], []])


def test_report(tmp_path):
    gt = [boxes_frame([1, 2])]
    write_report(tmp_path / "r.json", evaluate(gt, gt), {"iou_threshold": 0.5})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["MOTA"] == 1.0 and doc["iou_threshold"] == 0.5
