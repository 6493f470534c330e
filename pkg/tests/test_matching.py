import math

import numpy as np
import pytest

from boxref import autodiff as ad
from boxref.autodiff import finite_difference_check, parameter, tensor
from boxref.matching import (
    LossWeights,
    brute_force,
    hungarian,
    match_cost_matrix,
    set_loss,
    stage_loss,
)


def total(cost, pairs):
    return math.fsum(float(cost[p, t]) for p, t in pairs)


class TestHungarian:
    def test_single_cell(self):
        assert hungarian(np.array([[3.0]])) == [(0, 0)]

    def test_diagonal_dominance(self):
        cost = np.full((4, 4), 100.0)
        np.fill_diagonal(cost, 0.0)
        assert hungarian(cost) == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_small_hand_case(self):
        pairs = brute_force(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert pairs == [(0, 0), (1, 1)]
        assert total(np.array([[1.0, 2.0], [2.0, 1.0]]), pairs) == 2.0

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(0)
        for k in range(300):
            P = int(rng.integers(2, 8))
            T = int(rng.integers(1, P + 1))
            cost = rng.standard_normal((P, T)) * 10
            h = hungarian(cost)
            b = brute_force(cost)
            assert total(cost, h) == total(cost, b), f"case {k}"

    def test_rectangular_leaves_extra_predictions_unmatched(self):
        cost = np.array([[5.0], [1.0], [3.0]])
        assert hungarian(cost) == [(1, 0)]

    def test_more_targets_than_predictions_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            brute_force(np.zeros((2, 3)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            cost = rng.standard_normal((5, 4))
            assert hungarian(cost) == hungarian(cost + 7.25)

    def test_tie_break_is_lexicographic(self):
        # all-equal costs: every assignment ties; the canonical answer
        # pairs the earliest predictions with the earliest targets
        assert hungarian(np.zeros((4, 2))) == [(0, 0), (1, 1)]
        assert brute_force(np.zeros((4, 2))) == [(0, 0), (1, 1)]
        # anti-diagonal tie
        cost = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert hungarian(cost) == [(0, 0), (1, 1)]

    def test_tie_break_nontrivial(self):
        # two optima: {(0,1),(1,0)} and {(0,0),(1,1)}; both cost 2
        cost = np.array([[1.0, 1.0], [1.0, 1.0], [9.0, 9.0]])
        assert hungarian(cost) == brute_force(cost) == [(0, 0), (1, 1)]

    def test_brute_force_size_guard(self):
        with pytest.raises(ValueError):
            brute_force(np.zeros((9, 9)))

    def test_empty_targets(self):
        assert hungarian(np.zeros((3, 0))) == []


class TestSetLoss:
    def _perfect_stage(self, t_boxes, t_classes, C=3, N=5):
        boxes = np.tile([0.5, 0.5, 0.1, 0.1], (N, 1))
        logits = np.zeros((N, C + 1))
        logits[:, C] = 20.0  # confident no-object
        for i, (tb, tc) in enumerate(zip(t_boxes, t_classes)):
            boxes[i] = tb
            logits[i] = 0.0
            logits[i, tc] = 20.0
        return tensor(boxes), tensor(logits)

    def test_perfect_predictions_zero_box_terms(self):
        t_boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]])
        t_classes = np.array([0, 2])
        boxes, logits = self._perfect_stage(t_boxes, t_classes)
        w = LossWeights(cls=0.0, l1=1.0, giou=1.0)
        loss, pairs = set_loss([(boxes, logits)], t_boxes, t_classes, w)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)
        assert pairs == [[(0, 0), (1, 1)]]

    def test_zero_weights_zero_loss(self):
        t_boxes = np.array([[0.3, 0.3, 0.2, 0.2]])
        t_classes = np.array([0])
        boxes, logits = self._perfect_stage(t_boxes, t_classes)
        w = LossWeights(cls=0.0, l1=0.0, giou=0.0)
        loss, _ = set_loss([(boxes, logits)], t_boxes, t_classes, w)
        assert loss.item() == 0.0

    def test_hand_case(self):
        # one prediction, one target, concentric boxes
        boxes = tensor([[0.5, 0.5, 0.2, 0.2]])
        logits = tensor([[0.0, 0.0]])  # C=1 plus no-object
        t_boxes = np.array([[0.5, 0.5, 0.4, 0.4]])
        t_classes = np.array([0])
        w = LossWeights(cls=0.0, l1=1.0, giou=1.0)
        loss, _ = set_loss([(boxes, logits)], t_boxes, t_classes, w)
        # L1 = 0.4; IoU = 0.04/0.16 = 0.25; hull = union -> GIoU = 0.25
        assert loss.item() == pytest.approx(1.15, abs=1e-12)

    def test_empty_targets_classification_only(self):
        boxes = tensor(np.tile([0.5, 0.5, 0.1, 0.1], (4, 1)))
        logits = parameter(np.zeros((4, 3)))
        loss, pairs = set_loss([(boxes, logits)], np.zeros((0, 4)), np.zeros(0, dtype=int))
        assert pairs == [[]]
        loss.backward()
        assert logits.grad is not None
        # pushing toward no-object lowers the loss
        better = np.zeros((4, 3))
        better[:, 2] = 5.0
        loss2, _ = set_loss([(tensor(boxes.data), tensor(better))],
                            np.zeros((0, 4)), np.zeros(0, dtype=int))
        assert loss2.item() < loss.item()

    def test_multi_stage_sums(self):
        t_boxes = np.array([[0.3, 0.3, 0.2, 0.2]])
        t_classes = np.array([0])
        boxes, logits = self._perfect_stage(t_boxes, t_classes)
        one, _ = set_loss([(boxes, logits)], t_boxes, t_classes)
        two, _ = set_loss([(boxes, logits), (boxes, logits)], t_boxes, t_classes)
        assert two.item() == pytest.approx(2 * one.item(), rel=1e-12)

    def test_gradient_with_fixed_matching(self):
        rng = np.random.default_rng(2)
        N, C, T = 4, 2, 2
        raw = parameter(rng.normal(0, 0.5, size=(N, 4)))
        logits = parameter(rng.normal(0, 0.5, size=(N, C + 1)))
        t_boxes = np.abs(rng.normal(0.5, 0.1, size=(T, 4)))
        t_classes = rng.integers(0, C, size=T)
        fixed = [[(0, 0), (2, 1)]]

        def loss():
            boxes = ad.sigmoid(raw)
            out, _ = set_loss([(boxes, logits)], t_boxes, t_classes, assignments=fixed)
            return out

        assert finite_difference_check(loss, [raw, logits], eps=1e-6) < 1e-4

    def test_cost_matrix_shape_and_effect(self):
        rng = np.random.default_rng(3)
        boxes = np.abs(rng.normal(0.5, 0.1, size=(5, 4)))
        probs = np.full((5, 4), 0.25)
        t_boxes = np.abs(rng.normal(0.5, 0.1, size=(2, 4)))
        t_classes = np.array([0, 1])
        cost = match_cost_matrix(boxes, probs, t_boxes, t_classes, LossWeights())
        assert cost.shape == (5, 2)
        assert np.all(np.isfinite(cost))
        # raising a prediction's class prob lowers its cost for that target
        probs2 = probs.copy()
        probs2[3, 0] = 0.9
        cost2 = match_cost_matrix(boxes, probs2, t_boxes, t_classes, LossWeights())
        assert cost2[3, 0] < cost[3, 0]
