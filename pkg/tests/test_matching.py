import itertools
import math
import time

import numpy as np
import pytest

import promptvision.tensor as T
from promptvision.matching import (
    MatchCostCoeffs,
    cost_matrix,
    cxcywh_to_corners,
    giou,
    giou_matrix,
    hungarian_loss,
    hungarian_match,
    text_nll,
)
from promptvision.tensor import Tape, Tensor, TensorError

from gradcheck import check_gradients


def brute_force_min_cost(cost):
    """Exhaustive minimum assignment cost over all injective col->row maps."""
    n_rows, n_cols = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(n_rows), n_cols):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


class TestGiou:
    def test_identical_boxes(self):
        b = [0.5, 0.5, 0.2, 0.3]
        assert abs(giou(b, b) - 1.0) < 1e-12

    def test_far_separation_approaches_minus_one(self):
        a = [0.0, 0.0, 0.01, 0.01]
        b = [1.0, 0.0, 0.01, 0.01]  # separation 100x box size
        assert giou(a, b) < -0.9

    def test_edge_adjacent_equal_boxes(self):
        a = [0.25, 0.5, 0.5, 0.5]
        b = [0.75, 0.5, 0.5, 0.5]  # share the x=0.5 edge; enclosing == union
        assert abs(giou(a, b)) < 1e-12

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        n = 100_000
        boxes_a = np.column_stack([
            rng.uniform(0, 1, n), rng.uniform(0, 1, n),
            rng.uniform(0.01, 0.9, n), rng.uniform(0.01, 0.9, n),
        ])
        boxes_b = np.column_stack([
            rng.uniform(0, 1, n), rng.uniform(0, 1, n),
            rng.uniform(0.01, 0.9, n), rng.uniform(0.01, 0.9, n),
        ])
        # pairwise matrix on matched rows only: evaluate in chunks
        vals = np.concatenate([
            np.diagonal(giou_matrix(boxes_a[i:i + 500], boxes_b[i:i + 500]))
            for i in range(0, n, 500)
        ])
        vals_t = np.concatenate([
            np.diagonal(giou_matrix(boxes_b[i:i + 500], boxes_a[i:i + 500]))
            for i in range(0, n, 500)
        ])
        assert np.abs(vals - vals_t).max() < 1e-12
        assert vals.min() >= -1.0 - 1e-12 and vals.max() <= 1.0 + 1e-12

    def test_degenerate_box_treated_as_epsilon(self):
        v = giou([0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.2, 0.2])
        assert -1.0 <= v <= 1.0 and np.isfinite(v)

    def test_corner_conversion_ordering(self):
        c = cxcywh_to_corners(np.array([0.5, 0.4, 0.2, 0.1]))
        assert c[0] < c[2] and c[1] < c[3]


class TestCostMatrix:
    def test_perfect_prediction_boundary(self):
        coeffs = MatchCostCoeffs(label_weight=1.0, l1_weight=5.0, giou_weight=2.0)
        target = np.array([[0.5, 0.5, 0.2, 0.2]])
        pred = np.array([[0.5, 0.5, 0.2, 0.2]])
        cost = cost_matrix(pred, np.array([50.0]), target, coeffs)  # p_rel -> 1
        assert abs(cost[0, 0] - (-coeffs.label_weight - coeffs.giou_weight)) < 1e-6

    def test_equal_predictions_equal_columns(self):
        coeffs = MatchCostCoeffs()
        pred = np.tile([0.5, 0.5, 0.2, 0.2], (4, 1))
        logits = np.zeros(4)
        targets = np.array([[0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1]])
        cost = cost_matrix(pred, logits, targets, coeffs)
        assert np.abs(cost - cost[0]).max() < 1e-12

    def test_entries_match_scalar_recomputation(self):
        rng = np.random.default_rng(3)
        coeffs = MatchCostCoeffs(label_weight=1.3, l1_weight=2.7, giou_weight=0.9)
        pred = np.column_stack([rng.uniform(0.2, 0.8, 5), rng.uniform(0.2, 0.8, 5),
                                rng.uniform(0.05, 0.4, 5), rng.uniform(0.05, 0.4, 5)])
        logits = rng.normal(size=5)
        targets = np.column_stack([rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3),
                                   rng.uniform(0.05, 0.4, 3), rng.uniform(0.05, 0.4, 3)])
        cost = cost_matrix(pred, logits, targets, coeffs)
        for i in range(5):
            for j in range(3):
                p = 1 / (1 + math.exp(-logits[i]))
                l1 = float(np.abs(pred[i] - targets[j]).sum())
                expect = -coeffs.label_weight * p + coeffs.l1_weight * l1 \
                    - coeffs.giou_weight * giou(pred[i], targets[j])
                assert abs(cost[i, j] - expect) < 1e-10

    def test_too_many_targets_rejected(self):
        with pytest.raises(ValueError, match="increase R"):
            cost_matrix(np.zeros((2, 4)), np.zeros(2), np.zeros((3, 4)), MatchCostCoeffs())


class TestHungarianMatch:
    def test_diagonal(self):
        pairs = hungarian_match(np.array([[0.0, 9.0], [9.0, 0.0]]))
        assert sorted(pairs) == [(0, 0), (1, 1)]

    def test_antigreedy(self):
        pairs = hungarian_match(np.array([[1.0, 2.0], [2.0, 1000.0]]))
        assert sorted(pairs) == [(0, 1), (1, 0)]
        total = sum(np.array([[1.0, 2.0], [2.0, 1000.0]])[r, c] for r, c in pairs)
        assert total == 4.0

    def test_ties_prefer_low_row_index(self):
        pairs = hungarian_match(np.zeros((4, 2)))
        assert sorted(pairs) == [(0, 0), (1, 1)]

    def test_brute_force_oracle_1000(self):
        rng = np.random.default_rng(11)
        t0 = time.monotonic()
        for _ in range(1000):
            n_cols = int(rng.integers(1, 8))
            n_rows = int(rng.integers(n_cols, 8))
            cost = rng.normal(size=(n_rows, n_cols))
            pairs = hungarian_match(cost)
            assert len(pairs) == n_cols
            rows = [r for r, _ in pairs]
            cols = [c for _, c in pairs]
            assert len(set(rows)) == n_cols and sorted(cols) == list(range(n_cols))
            total = sum(cost[r, c] for r, c in pairs)
            assert abs(total - brute_force_min_cost(cost)) < 1e-9
        assert time.monotonic() - t0 < 10.0

    def test_column_shift_invariance(self):
        rng = np.random.default_rng(12)
        cost = rng.normal(size=(6, 4))
        base = set(hungarian_match(cost))
        shifted = cost.copy()
        shifted[:, 2] += 7.5
        assert set(hungarian_match(shifted)) == base

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            hungarian_match(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestHungarianLoss:
    def test_perfect_predictions_near_zero(self):
        targets = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
        pred = Tensor(np.vstack([targets, [[0.5, 0.5, 0.1, 0.1]]]))
        logits = Tensor(np.array([30.0, 30.0, -30.0]))
        loss = hungarian_loss(pred, logits, targets, MatchCostCoeffs())
        assert float(loss.data) < 1e-8

    def test_zero_targets_closed_form(self):
        r = 5
        coeffs = MatchCostCoeffs(background_weight=0.1)
        pred = Tensor(np.full((r, 4), 0.5))
        logits = Tensor(np.zeros(r))  # p_rel = 0.5 everywhere
        loss = hungarian_loss(pred, logits, np.zeros((0, 4)), coeffs)
        # background-only: bg_w * sum(-log 0.5) / R = bg_w * log 2
        assert abs(float(loss.data) - coeffs.background_weight * math.log(2)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        targets = np.array([[0.3, 0.4, 0.2, 0.15], [0.65, 0.6, 0.25, 0.2]])
        pred = Tensor(np.column_stack([
            rng.uniform(0.3, 0.7, 5), rng.uniform(0.3, 0.7, 5),
            rng.uniform(0.1, 0.3, 5), rng.uniform(0.1, 0.3, 5),
        ]), requires_grad=True)
        logits = Tensor(rng.normal(size=5), requires_grad=True)
        frozen = hungarian_match(
            cost_matrix(pred.data, logits.data, targets, MatchCostCoeffs()))

        def loss_fn(pred, logits):
            # freeze the matching so the loss is differentiable
            p_rel = T.sigmoid(logits)
            rows = np.array([r for r, _ in frozen])
            cols = np.array([c for _, c in frozen])
            from promptvision.matching import giou_tensor
            mb = T.slice_(pred, (rows,))
            nll = T.neg(T.sum_(T.log(T.slice_(p_rel, (rows,)))))
            l1 = T.mul(T.sum_(T.abs_(T.sub(mb, targets[cols]))), 5.0)
            g = T.mul(T.sum_(T.sub(1.0, giou_tensor(mb, targets[cols]))), 2.0)
            un = np.array([i for i in range(5) if i not in set(rows.tolist())])
            bg = T.neg(T.sum_(T.log(T.sub(1.0, T.slice_(p_rel, (un,))))))
            return T.add(T.mul(T.add(T.add(nll, l1), g), 1 / 2), T.mul(bg, 0.1 / 5))

        # library value agrees with the frozen-match reconstruction
        lib = hungarian_loss(pred, logits, targets, MatchCostCoeffs())
        assert abs(float(lib.data) - float(loss_fn(pred, logits).data)) < 1e-9
        check_gradients(loss_fn, [pred, logits], rtol=1e-4)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(14)
        targets = rng.uniform(0.2, 0.5, size=(3, 4)) + np.array([0, 0, 0.1, 0.1])
        boxes = rng.uniform(0.2, 0.6, size=(6, 4)) + np.array([0, 0, 0.1, 0.1])
        logits = rng.normal(size=6)
        base = float(hungarian_loss(Tensor(boxes), Tensor(logits), targets,
                                    MatchCostCoeffs()).data)
        tperm = rng.permutation(3)
        qperm = rng.permutation(6)
        shuffled = float(hungarian_loss(Tensor(boxes[qperm]), Tensor(logits[qperm]),
                                        targets[tperm], MatchCostCoeffs()).data)
        assert abs(base - shuffled) < 1e-10

    def test_matched_giou_term_bounded(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            targets = np.column_stack([rng.uniform(0, 1, 2), rng.uniform(0, 1, 2),
                                       rng.uniform(0.05, 0.5, 2), rng.uniform(0.05, 0.5, 2)])
            g = giou_matrix(targets, targets)
            assert ((1 - g) >= -1e-12).all() and ((1 - g) <= 2 + 1e-12).all()


class TestTextNll:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 100)))
        loss = text_nll(logits, [1, 2, 3], task_weight=1.0)
        assert abs(float(loss.data) - math.log(100)) < 1e-10

    def test_caption_weight_scales_exactly(self):
        rng = np.random.default_rng(16)
        logits = Tensor(rng.normal(size=(4, 50)))
        ids = rng.integers(0, 50, size=4)
        full = float(text_nll(logits, ids, 1.0).data)
        weighted = float(text_nll(logits, ids, 0.05).data)
        assert abs(weighted - 0.05 * full) < 1e-12

    def test_one_hot_correct_approaches_zero(self):
        logits = np.full((2, 10), -100.0)
        logits[0, 3] = 100.0
        logits[1, 7] = 100.0
        loss = text_nll(Tensor(logits), [3, 7], 1.0)
        assert float(loss.data) < 1e-12

    def test_empty_target_rejected(self):
        with pytest.raises(TensorError, match="empty"):
            text_nll(Tensor(np.zeros((0, 5))), [], 1.0)
