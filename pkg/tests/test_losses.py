import itertools
import warnings

import numpy as np
import pytest

from latticeseg.errors import InvalidInputError
from latticeseg.losses import (
    DiscriminativeMargins,
    cross_entropy,
    discriminative_loss,
    lovasz_grad,
    lovasz_softmax,
    lovasz_softmax_probs,
    semantic_loss,
)
from latticeseg.tape import grad_check
from oracles import discriminative_terms, jaccard_loss


def log_softmax_np(S):
    z = S - S.max(1, keepdims=True)
    return z - np.log(np.exp(z).sum(1, keepdims=True))


class TestCrossEntropy:
    def test_matches_manual(self, rng):
        S = rng.normal(size=(10, 4))
        y = rng.integers(0, 4, 10)
        assert cross_entropy(S, y).item() == pytest.approx(-log_softmax_np(S)[np.arange(10), y].mean(), rel=1e-14)

    def test_ignore_index(self, rng):
        S = rng.normal(size=(6, 3))
        y = np.array([0, -1, 2, -1, 1, 1])
        keep = y >= 0
        want = -log_softmax_np(S[keep])[np.arange(keep.sum()), y[keep]].mean()
        assert cross_entropy(S, y).item() == pytest.approx(want)

    def test_all_ignored_warns_and_is_zero(self, rng):
        with pytest.warns(RuntimeWarning):
            assert cross_entropy(rng.normal(size=(3, 2)), [-1, -1, -1]).item() == 0.0

    def test_label_range_checked(self, rng):
        with pytest.raises(InvalidInputError):
            cross_entropy(rng.normal(size=(2, 2)), [0, 2])


class TestLovasz:
    def test_grad_known_values(self):
        # prefix Jaccard losses 1/2, 2/3, 1 -> successive differences
        np.testing.assert_allclose(lovasz_grad([1, 0, 1]), [1 / 2, 1 / 6, 1 / 3])

    def test_grad_sums_to_jaccard_of_all_errors(self, rng):
        gt = rng.integers(0, 2, 12).astype(float)
        assert lovasz_grad(gt).sum() == pytest.approx(1.0 if gt.any() else 0.0)

    def test_binary_hard_predictions_exhaustive(self):
        # flat Lovasz extension: errors sorted descending dotted with the gradient
        for n in range(1, 9):
            for gt in itertools.product((0, 1), repeat=n):
                gt = np.array(gt)
                if not gt.any():
                    continue
                for pred in itertools.product((0, 1), repeat=n):
                    pred = np.array(pred)
                    err = (pred != gt).astype(float)
                    order = np.argsort(-err, kind="stable")
                    value = err[order] @ lovasz_grad(gt[order].astype(float))
                    assert abs(value - jaccard_loss(pred, gt)) <= 1e-12

    def test_softmax_form_on_one_hot_probabilities(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(1, 9))
            gt = rng.integers(0, 2, n)
            pred = rng.integers(0, 2, n)
            probs = np.eye(2)[pred]
            want = np.mean([jaccard_loss(pred == c, gt == c) for c in np.unique(gt)])
            assert abs(lovasz_softmax_probs(probs, gt).item() - want) <= 1e-12

    def test_perfect_prediction_is_zero(self):
        y = np.array([0, 1, 2, 1])
        assert lovasz_softmax_probs(np.eye(3)[y], y).item() == 0.0

    def test_gradient_away_from_ties(self, rng):
        S = rng.normal(size=(15, 3)) * 2
        y = rng.integers(0, 3, 15)
        rep = grad_check(lambda s: lovasz_softmax(s, y), [S])
        assert rep.passed, rep.errors


class TestSemanticLoss:
    def test_is_equal_weight_sum(self, rng):
        S = rng.normal(size=(20, 3))
        y = rng.integers(0, 3, 20)
        want = 0.5 * (cross_entropy(S, y).item() + lovasz_softmax(S, y).item())
        assert semantic_loss(S, y).item() == pytest.approx(want, abs=1e-12)

    def test_confident_correct_is_near_zero(self):
        y = np.array([0, 2, 1])
        assert semantic_loss(np.eye(3)[y] * 60, y).item() < 1e-12

    def test_gradient(self, rng):
        y = rng.integers(0, 4, 12)
        rep = grad_check(lambda s: semantic_loss(s, y), [rng.normal(size=(12, 4))])
        assert rep.passed, rep.errors


class TestDiscriminative:
    def test_loop_oracle(self, rng):
        for trial in range(20):
            m, E = 20, int(rng.integers(1, 5))
            emb = rng.normal(size=(m, E)) * 2
            lab = rng.integers(-1, 4, m)
            lab[0] = 0
            margins = DiscriminativeMargins(0.3, 1.0, alpha=1.3, beta=0.7, gamma=0.01)
            L, lv, ld, lr = (t.item() for t in discriminative_loss(emb, lab, margins))
            ov, od, orr = discriminative_terms(emb, lab, 0.3, 1.0)
            for got, want in ((lv, ov), (ld, od), (lr, orr)):
                assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
            assert abs(L - (1.3 * ov + 0.7 * od + 0.01 * orr)) <= 1e-12 * max(1.0, abs(L))

    def test_margins_satisfied(self):
        centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        lab = np.repeat([0, 1, 2], 4)
        emb = centers[lab]
        L, lv, ld, lr = (t.item() for t in discriminative_loss(emb, lab))
        assert lv == 0.0 and ld == 0.0
        assert L == pytest.approx(0.001 * np.linalg.norm(centers, axis=1).mean())

    def test_identical_centres_give_full_hinge(self):
        emb = np.zeros((4, 3))
        lab = np.array([0, 0, 1, 1])
        _, _, ld, _ = discriminative_loss(emb, lab, DiscriminativeMargins(0.5, 1.5))
        assert ld.item() == pytest.approx(9.0)

    def test_single_instance_has_no_push(self, rng):
        _, _, ld, _ = discriminative_loss(rng.normal(size=(5, 2)), np.zeros(5))
        assert ld.item() == 0.0

    def test_no_instances_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            discriminative_loss(rng.normal(size=(3, 2)), [-1, -1, -1])

    def test_overlapping_margins_warn(self):
        with pytest.warns(RuntimeWarning):
            DiscriminativeMargins(1.0, 1.5)

    def test_gradient_away_from_kinks(self, rng):
        margins = DiscriminativeMargins(0.2, 0.8)
        for _ in range(5):
            emb = rng.normal(size=(16, 3))
            lab = rng.integers(0, 3, 16)
            lab[:3] = [0, 1, 2]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = grad_check(lambda e: discriminative_loss(e, lab, margins)[0], [emb])
            assert rep.passed, rep.errors
