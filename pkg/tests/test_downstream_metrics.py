import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatefeat.downstream import IGNORE_INDEX, KeypointSet, correspond_nn, miou, pck, pck_named
from gatefeat.errors import ValidationError


def test_miou_hand_counted_fixture():
    gt = np.zeros((4, 4), int)
    pred = np.zeros((4, 4), int)
    gt[0, 0:4] = 1  # 4 gt pixels of class 1
    pred[0, 0:3] = 1  # 3 of them predicted ...
    pred[1, 0] = 1  # ... plus one false positive: overlap 3, union 5
    s = miou(pred, gt, 2)
    iou1 = 3 / 5
    iou0 = 11 / 13
    assert s.per_class_iou[1] == iou1 == 0.6
    assert s.per_class_iou[0] == iou0
    assert s.miou == (iou0 + iou1) / 2
    assert s.aacc == 14 / 16
    assert s.macc == (11 / 12 + 3 / 4) / 2


def test_miou_perfect_and_complement(rng):
    gt = rng.integers(0, 3, (6, 6))
    assert miou(gt, gt, 3).as_tuple() == (1.0, 1.0, 1.0)
    g2 = rng.integers(0, 2, (5, 5))
    assert miou(1 - g2, g2, 2).miou == 0.0


def test_miou_ignore_and_absent_classes():
    gt = np.array([[0, 1], [IGNORE_INDEX, 1]])
    pred = np.array([[0, 1], [2, 1]])
    s = miou(pred, gt, 4)
    assert s.as_tuple() == (1.0, 1.0, 1.0)
    assert np.isnan(s.per_class_iou[3]) and np.isnan(s.per_class_iou[2])
    with pytest.raises(ValidationError):
        miou(np.array([[5]]), np.array([[0]]), 2)
    with pytest.raises(ValidationError):
        miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValidationError):
        miou(np.zeros((1, 1), int), np.full((1, 1), IGNORE_INDEX), 2)


def test_miou_aggregates_over_dataset():
    a_gt, a_pr = np.array([[1, 1]]), np.array([[1, 0]])
    b_gt, b_pr = np.array([[0, 0]]), np.array([[0, 0]])
    s = miou([a_pr, b_pr], [a_gt, b_gt], 2)
    # class 1: tp 1, union 2; class 0: tp 2, union 3
    assert s.per_class_iou == [2 / 3, 1 / 2]


def test_pck_fixtures():
    gt = np.array([[0, 0], [10, 10], [20, 20], [30, 30]], float)
    pred = gt + np.array([[1, 0], [0, 5], [6, 0], [-4, -4]])
    # radius 0.1 * 40 = 4: only the first is within, the last is 5.66 away
    assert pck(pred, gt, image_size=(40, 32)) == 0.25
    assert pck(gt, gt, image_size=(40, 32)) == 1.0
    on_circle = gt + np.array([[4, 0], [0, -4], [-4, 0], [0, 4]])
    assert pck(on_circle, gt, image_size=(40, 40)) == 1.0
    assert pck(pred, gt, bbox=(0, 0, 100, 20)) == 1.0
    with pytest.raises(ValidationError):
        pck(np.zeros((0, 2)), np.zeros((0, 2)), image_size=(4, 4))
    with pytest.raises(ValidationError):
        pck(gt, gt)


def test_pck_named_relabel_invariant():
    g = KeypointSet(["a", "b"], [[1, 1], [5, 5]], (10, 10))
    pred = {"a": np.array([1.0, 1.0]), "b": np.array([9.0, 9.0])}
    g2 = KeypointSet(["y", "x"], [[5, 5], [1, 1]], (10, 10))
    pred2 = {"x": pred["a"], "y": pred["b"]}
    assert pck_named(pred, g) == pck_named(pred2, g2) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=3, max_size=3), st.floats(0, 5))
def test_pck_monotone_in_error(errs, extra):
    gt = np.zeros((3, 2))
    p1 = np.stack([np.asarray(errs), np.zeros(3)], 1)
    p2 = p1 + np.array([[extra, 0]])
    assert pck(p2, gt, image_size=(50, 50)) <= pck(p1, gt, image_size=(50, 50))


def test_keypoint_bounds():
    with pytest.raises(ValidationError):
        KeypointSet(["a"], [[10, 0]], (10, 10))
    with pytest.raises(ValidationError):
        KeypointSet(["a", "b"], [[1, 0]], (10, 10))


def test_nn_self_match(rng):
    # cell centres match exactly on any feature
    f = rng.normal(size=(8, 8, 8))
    centres = (rng.integers(0, 8, size=(10, 2)) + 0.5) * 8 - 0.5
    np.testing.assert_allclose(correspond_nn(f, f, centres, (64, 64), (64, 64)), centres)
    # off-centre points land within one cell on a smooth positional feature
    yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    a = np.pi / 8
    smooth = np.stack([np.cos(a * xx), np.sin(a * xx), np.cos(a * yy), np.sin(a * yy)])
    xy = rng.uniform(0, 63, size=(20, 2))
    pred = correspond_nn(smooth, smooth, xy, (64, 64), (64, 64))
    assert np.abs(pred - xy).max() <= 8.0


def test_nn_shift_by_one_cell(rng):
    f = rng.normal(size=(16, 6, 6))
    tgt = np.zeros_like(f)
    tgt[:, :, 1:] = f[:, :, :-1]
    tgt[:, :, 0] = rng.normal(size=(16, 6))
    cells = np.array([[0, 0], [2, 3], [4, 5]], float)  # keypoints at cell centres
    src_xy = (cells + 0.5) * 8 - 0.5
    pred = correspond_nn(f, tgt, src_xy, (48, 48), (48, 48))
    np.testing.assert_allclose(pred, src_xy + [8, 0])


def test_nn_constant_map_tie_rule():
    f = np.ones((3, 4, 4))
    pred = correspond_nn(f, f, [[10.0, 10.0]], (16, 16), (16, 16))
    np.testing.assert_allclose(pred, [[1.5, 1.5]])  # centre of cell (0, 0)
    with pytest.raises(ValidationError):
        correspond_nn(f, f, [[16.0, 0.0]], (16, 16), (16, 16))
