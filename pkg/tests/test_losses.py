import itertools
import math

import numpy as np
import pytest

from motlab.assignment import Matching
from motlab.geometry import Box
from motlab.losses import (
    EPS,
    LossBreakdown,
    LossError,
    LossWeights,
    clip_loss,
    focal_loss,
    frame_loss,
    loss_gradients,
    matching_loss,
    pld_weighted_loss,
)

FL_POS = 0.25 * 0.25 * math.log(2)
FL_NEG = 0.75 * 0.25 * math.log(2)


def test_focal_examples():
    assert focal_loss(1 - 1e-12, 1) == pytest.approx(0.0, abs=1e-12)
    assert focal_loss(0.5, 1) == pytest.approx(0.04332, abs=1e-5)
    assert focal_loss(0.5, 0) == pytest.approx(0.12997, abs=1e-5)


def test_frame_loss_examples():
    b = Box(0.5, 0.5, 0.2, 0.2)
    perfect = frame_loss(Matching.from_pairs([(0, 0)], 1, 1), [(b, 1.0)], [b])
    assert perfect.total == pytest.approx(0.0, abs=1e-9)
    unmatched = frame_loss(Matching.empty(1), [(b, 0.5)], [])
    assert unmatched.total == pytest.approx(2 * FL_NEG)
    assert unmatched.total == pytest.approx(0.2599, abs=1e-4)
    matched = frame_loss(Matching.from_pairs([(0, 0)], 1, 1), [(b, 0.5)], [b])
    assert matched.total == pytest.approx(2 * FL_POS)


def test_frame_loss_zero_only_at_clamps():
    b = Box(0.5, 0.5, 0.2, 0.2)
    far = Box(0.2, 0.2, 0.1, 0.1)
    preds = [(b, 1.0), (far, 0.0)]
    m = Matching.from_pairs([(0, 0)], 2, 1)
    assert frame_loss(m, preds, [b]).total == pytest.approx(0.0, abs=1e-9)
    assert frame_loss(m, [(b, 0.9), (far, 0.0)], [b]).total > 0
    assert frame_loss(m, [(b, 1.0), (far, 0.1)], [b]).total > 0
    assert frame_loss(m, [(Box(0.51, 0.5, 0.2, 0.2), 1.0), (far, 0.0)], [b]).total > 0


def test_pld_weights():
    b = Box(0.5, 0.5, 0.2, 0.2)
    other = Box(0.2, 0.2, 0.1, 0.1)
    m = Matching.from_pairs([(0, 0)], 2, 1)
    bd = pld_weighted_loss(m, [(b, 0.5), (other, 0.3)], [(b, 0.9)])
    assert bd.omega == (0.9, 0.5)
    assert bd.pld == bd.total


def test_pld_unit_confidence_is_neutral():
    b = Box(0.5, 0.5, 0.2, 0.2)
    m = Matching.from_pairs([(0, 0)], 1, 1)
    assert pld_weighted_loss(m, [(b, 0.5)], [(b, 1.0)]).total == pytest.approx(frame_loss(m, [(b, 0.5)], [b]).total)


def test_pld_degenerates_to_frame_loss():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, k = 5, 3
        preds = [(Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2)), float(rng.uniform(0.05, 0.95)))
                 for _ in range(n)]
        labels = [Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2)) for _ in range(k)]
        m = Matching.from_pairs(list(zip(rng.permutation(n)[:k], range(k))), n, k)
        a = pld_weighted_loss(m, preds, [(lab, 1.0) for lab in labels], background_weight=1.0)
        assert a.total == frame_loss(m, preds, labels).total


def test_confidence_outside_unit_interval_rejected():
    b = Box(0.5, 0.5, 0.2, 0.2)
    with pytest.raises(LossError):
        pld_weighted_loss(Matching.empty(1, 1), [(b, 0.5)], [(b, 1.5)])


def test_degenerate_box_rejected():
    b = Box(0.5, 0.5, 0.2, 0.2)
    with pytest.raises(LossError):
        frame_loss(Matching.from_pairs([(0, 0)], 1, 1), [(Box(0.5, 0.5, 0.0, 0.2), 0.5)], [b])


def test_clip_loss_examples():
    assert clip_loss([(1.0, 0.5, 0.5, 2)]) == 1.0
    assert clip_loss([(0.0, 0.0, 0.0, 3)]) == 0.0
    assert clip_loss([(2.0, 0.0, 0.0, 1), (3.0, 0.0, 0.0, 3)]) == pytest.approx(3.0)
    assert clip_loss([(LossBreakdown(total=2.0), 0.0, 0.0, 1)]) == 2.0


def test_clip_loss_skips_empty_frames_and_is_order_free():
    frames = [(1.0, 0.2, 0.3, 2), (4.0, 0.0, 1.0, 0), (0.7, 0.1, 0.0, 3), (2.0, 2.0, 2.0, 1)]
    ref = clip_loss(frames)
    for perm in itertools.permutations(frames):
        assert clip_loss(perm) == pytest.approx(ref, rel=1e-15)


def test_gradient_vanishes_at_perfect_prediction():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    g = loss_gradients(Matching.from_pairs([(0, 0)], 1, 1), b, [40.0], b)
    assert np.allclose(g, 0.0, atol=1e-12)


def test_l1_gradient_sign_rule():
    pred = np.array([[0.6, 0.5, 0.2, 0.2]])
    label = np.array([[0.5, 0.5, 0.2, 0.2]])
    g = loss_gradients(Matching.from_pairs([(0, 0)], 1, 1), pred, [0.0], label, LossWeights(0.0, 5.0, 0.0))
    assert g[0, 0] == 5.0
    assert g[0, 1] == 0.0  # tie: subgradient 0


def test_gradient_clamp_region_is_zero():
    b = np.array([[0.5, 0.5, 0.2, 0.2]])
    g = loss_gradients(Matching.empty(1), b, [-40.0], np.zeros((0, 4)))
    assert g[0, 4] == 0.0
    assert 1 / (1 + math.exp(40)) < EPS


def _loss(matching, boxes, logits, labels, weights, pos_weight=None, neg_weight=1.0):
    p = 1 / (1 + np.exp(-np.asarray(logits)))
    bd, _, _ = matching_loss(matching, boxes, p, labels, weights, pos_weight, neg_weight)
    return bd.total


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 6)), int(rng.integers(1, 3))
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    labels = np.column_stack([rng.uniform(0.3, 0.7, (k, 2)), rng.uniform(0.05, 0.3, (k, 2))])
    logits = rng.normal(0, 1.5, n)
    weights = LossWeights(*rng.uniform(0.5, 5.0, 3))
    pos = rng.uniform(0.1, 1.0, k)
    neg = float(rng.uniform(0.2, 1.0))
    m = Matching.from_pairs(list(zip(rng.permutation(n)[:k], range(k))), n, k)
    g = loss_gradients(m, boxes, logits, labels, weights, pos, neg)
    h = 1e-5
    for q in range(n):
        for c in range(5):
            bu, bd_, lu, ld = boxes.copy(), boxes.copy(), logits.copy(), logits.copy()
            if c < 4:
                bu[q, c] += h
                bd_[q, c] -= h
            else:
                lu[q] += h
                ld[q] -= h
            num = (_loss(m, bu, lu, labels, weights, pos, neg) - _loss(m, bd_, ld, labels, weights, pos, neg)) / (2 * h)
            err = abs(num - g[q, c]) / max(abs(num), abs(g[q, c]), 1e-5)
            assert err < 1e-4, (q, c, num, g[q, c])
