import numpy as np
import pytest

from motlab.geometry import Box
from motlab.lifecycle import QuerySlot, Role
from motlab.tgd import GroupLayout, build_attention_mask, expand_groups, mask_to_text, noise_reference_boxes


def slots(n, role=Role.TRACK):
    return [QuerySlot(i, role, Box(0.1 * (i + 1), 0.5, 0.05, 0.05), i if role is Role.TRACK else None) for i in range(n)]


def test_single_group_is_identity():
    det, trk = slots(2, Role.DETECT), slots(3)
    out, layout = expand_groups(det, trk, 1)
    assert out == det + trk
    assert layout.S == 5


def test_expansion_layout():
    det, trk = slots(1, Role.DETECT), slots(2)
    out, layout = expand_groups(det, trk, 3)
    assert layout.S == 1 + 3 * 2 and len(out) == 7
    assert list(layout.group_range(1)) == [3, 4] and list(layout.group_range(2)) == [5, 6]
    assert [layout.original_of(i) for i in range(7)] == [0, 1, 2, 1, 2, 1, 2]
    assert [layout.group_of(i) for i in range(7)] == [-1, 0, 0, 1, 1, 2, 2]
    for i in range(3, 7):
        assert out[i].bound_identity == out[layout.original_of(i)].bound_identity
        assert out[i] is not out[layout.original_of(i)]


def test_noise_identity_scale_and_centers():
    rng = np.random.default_rng(0)
    boxes = [Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2)) for _ in range(1000)]
    assert noise_reference_boxes(boxes, (1.0, 1.0), 3) == [Box(*map(float, b)) for b in boxes]
    for seed in range(5):
        noisy = noise_reference_boxes(boxes, (0.7, 1.3), seed)
        assert all(n[:2] == b[:2] for n, b in zip(noisy, boxes))
        ratio = np.array([n[2:] for n in noisy]) / np.array([b[2:] for b in boxes])
        assert ratio.min() >= 0.7 - 1e-12 and ratio.max() <= 1.3 + 1e-12


def test_noise_is_seeded():
    boxes = [Box(0.5, 0.5, 0.2, 0.1), Box(0.3, 0.3, 0.1, 0.1)]
    assert noise_reference_boxes(boxes, rng=11) == noise_reference_boxes(boxes, rng=11)


def test_mask_examples():
    grid = build_attention_mask(GroupLayout(1, 1, 2))
    assert grid.tolist() == [[0, 0, 1], [0, 0, 1], [0, 0, 0]]
    assert mask_to_text(grid) == "001\n001\n000\n"
    assert not build_attention_mask(GroupLayout(3, 4, 1)).any()
    m = build_attention_mask(GroupLayout(2, 2, 3))
    assert m.shape == (8, 8) and int(m.sum()) == 24
    expected = np.zeros((8, 8), dtype=int)
    for i in range(8):
        for j in range(8):
            if (i < 4 and j >= 4) or (i >= 4 and j >= 4 and (i - 4) // 2 != (j - 4) // 2):
                expected[i, j] = 1
    assert (m == expected).all()


def test_literal_reading_differs():
    # the literal variant lets the first augmented query leak and blocks augmented -> real
    lit = build_attention_mask(GroupLayout(1, 1, 2), literal=True)
    assert lit.tolist() == [[0, 0, 0], [0, 0, 0], [1, 1, 0]]


@pytest.mark.parametrize("M,N,G", [(0, 3, 3), (5, 0, 4), (1, 1, 1), (3, 2, 5)])
def test_mask_properties(M, N, G):
    layout = GroupLayout(M, N, G)
    m = build_attention_mask(layout)
    R = layout.real
    assert (np.diag(m) == 0).all()
    assert not m[:R, :R].any()
    assert m[:R, R:].all()
    for i in range(R, layout.S):
        open_aug = {j for j in range(R, layout.S) if m[i, j] == 0}
        assert open_aug == set(layout.group_range(layout.group_of(i)))


def test_invalid_layout():
    with pytest.raises(ValueError):
        GroupLayout(1, 1, 0)
    with pytest.raises(ValueError):
        expand_groups([], [], 0)
