import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latticeseg.errors import InvalidInputError
from latticeseg.metrics import accuracy, confusion_matrix, dice, miou, sbd

labels = st.lists(st.integers(0, 4), min_size=1, max_size=40)


def test_miou_perfect():
    y = np.array([0, 1, 2, 2])
    iou, mean = miou(y, y, 3)
    assert mean == 1.0
    np.testing.assert_array_equal(iou, 1.0)


def test_miou_hand_example():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    iou, mean = miou(pred, gt, 3)
    np.testing.assert_allclose(iou[:2], [1 / 2, 2 / 3])
    assert np.isnan(iou[2])
    assert mean == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_miou_ignores_unlabelled():
    _, mean = miou([0, 1, 1], [0, -1, 1], 2)
    assert mean == 1.0


@given(labels, st.randoms())
def test_miou_invariant_to_relabelling(gt, r):
    gt = np.array(gt)
    pred = np.array([r.randint(0, 4) for _ in gt])
    perm = np.array(r.sample(range(5), 5))
    assert miou(pred, gt, 5)[1] == pytest.approx(miou(perm[pred], perm[gt], 5)[1])


def test_confusion_counts():
    cm = confusion_matrix([0, 1, 1], [1, 1, 0], 2)
    np.testing.assert_array_equal(cm, [[0, 1], [1, 1]])


def test_accuracy_per_class():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0], cls=0) == pytest.approx(2 / 3)
    assert np.isnan(accuracy([0], [0], cls=5))


def test_dice():
    assert dice([1, 1, 0], [1, 0, 0]) == pytest.approx(2 / 3)
    assert dice([0, 0], [0, 0]) == 1.0


def test_sbd_identical_and_relabelled():
    a = np.array([0, 0, 1, 1, 2])
    assert sbd(a, a) == 1.0
    assert sbd(a, np.array([5, 5, 3, 3, 9])) == 1.0


def test_sbd_merge_penalised_by_min():
    gt = np.array([0, 0, 1, 1])
    merged = np.zeros(4, dtype=int)
    # every pairing overlaps 2 of 4 + 2 points: Dice 2/3 in both directions
    assert sbd(merged, gt) == pytest.approx(2 / 3)


@given(labels, labels)
def test_sbd_symmetric(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    assert sbd(a, b) == pytest.approx(sbd(b, a))
    assert 0 < sbd(a, b) <= 1


def test_sbd_errors():
    with pytest.raises(InvalidInputError):
        sbd([0, 1], [0])
    with pytest.raises(InvalidInputError):
        sbd([-1, -1], [-1, -1])
