"""Bipartite matching between predicted and ground-truth boxes, and the
set-prediction loss composed on top of it (label NLL + L1 + GIoU),
plus the text negative log-likelihood with per-sample task weighting.

Boxes are normalized (cx, cy, w, h). The matcher runs on plain arrays
(it is not differentiated through); the loss re-reads the matched pairs
through tensor ops so gradients flow to boxes and relevance logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError

EPS_BOX = 1e-7


@dataclass
class MatchCostCoeffs:
    label_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    background_weight: float = 0.1

    def __post_init__(self):
        if self.label_weight <= 0 and self.l1_weight <= 0 and self.giou_weight <= 0:
            raise ValueError("at least one matching cost weight must be positive")


def cxcywh_to_corners(boxes):
    """(..., 4) center form -> corner form, w/h clamped to a tiny epsilon."""
    b = np.asarray(boxes, dtype=np.float64)
    w = np.maximum(b[..., 2], EPS_BOX)
    h = np.maximum(b[..., 3], EPS_BOX)
    return np.stack(
        [b[..., 0] - w / 2, b[..., 1] - h / 2, b[..., 0] + w / 2, b[..., 1] + h / 2],
        axis=-1,
    )


def iou_corners(a, b):
    """Pairwise IoU of corner boxes a (N,4) and b (M,4) -> (N,M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-12), union


def giou_matrix(boxes_a, boxes_b):
    """Pairwise generalized IoU of cxcywh boxes a (N,4), b (M,4) -> (N,M)."""
    a = cxcywh_to_corners(boxes_a)
    b = cxcywh_to_corners(boxes_b)
    iou, union = iou_corners(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    enclosing = np.maximum(wh[..., 0] * wh[..., 1], 1e-12)
    return iou - (enclosing - union) / enclosing


def giou(box_a, box_b) -> float:
    """GIoU of two cxcywh boxes, in [-1, 1]."""
    return float(giou_matrix(np.asarray(box_a)[None], np.asarray(box_b)[None])[0, 0])


def cost_matrix(pred_boxes, pred_relevance_logits, target_boxes, coeffs: MatchCostCoeffs):
    """Matching cost (R, M): -label_w * p_relevant + l1_w * L1 - giou_w * GIoU."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    logits = np.asarray(pred_relevance_logits, dtype=np.float64)
    targets = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    r, m = pred_boxes.shape[0], targets.shape[0]
    if m > r:
        raise ValueError(f"cost_matrix: {m} targets exceed {r} queries; increase R")
    p_rel = 1.0 / (1.0 + np.exp(-logits))
    l1 = np.abs(pred_boxes[:, None, :] - targets[None, :, :]).sum(axis=-1)
    cost = (
        -coeffs.label_weight * p_rel[:, None]
        + coeffs.l1_weight * l1
        - coeffs.giou_weight * giou_matrix(pred_boxes, targets)
    )
    if not np.isfinite(cost).all():
        raise ValueError("cost_matrix: non-finite entries")
    return cost


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of columns (targets) to rows.

    Jonker-Volgenant style shortest augmenting path, one path per column,
    O(M * R^2) on the rectangular matrix. Returns (row, col) pairs sorted
    by column; among equal-cost optima the lowest row index wins because
    rows are scanned in order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("hungarian_match: non-finite cost matrix")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return []
    if n_cols > n_rows:
        raise ValueError(f"hungarian_match: more columns ({n_cols}) than rows ({n_rows})")

    INF = np.inf
    u = np.zeros(n_cols + 1)  # column potentials (1-based, 0 is the virtual root)
    v = np.zeros(n_rows + 1)
    way = np.zeros(n_rows + 1, dtype=np.int64)
    match_row = np.zeros(n_rows + 1, dtype=np.int64)  # row -> col (1-based, 0 = free)

    for col in range(1, n_cols + 1):
        match_row[0] = col
        j0 = 0
        minv = np.full(n_rows + 1, INF)
        used = np.zeros(n_rows + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            delta = INF
            j1 = -1
            for j in range(1, n_rows + 1):
                if used[j]:
                    continue
                cur = cost[j - 1, i0 - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n_rows + 1):
                if used[j]:
                    u[match_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1

    pairs = [(row - 1, int(match_row[row]) - 1) for row in range(1, n_rows + 1) if match_row[row]]
    pairs.sort(key=lambda rc: rc[1])
    return pairs


def giou_tensor(pred: Tensor, targets_const: np.ndarray) -> Tensor:
    """Differentiable rowwise GIoU of predicted cxcywh boxes (M,4) against
    constant target boxes (M,4) -> (M,)."""
    t = cxcywh_to_corners(targets_const)
    t_area = (t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1])

    w = T.maximum(pred[:, 2], EPS_BOX)
    h = T.maximum(pred[:, 3], EPS_BOX)
    half_w = T.mul(w, 0.5)
    half_h = T.mul(h, 0.5)
    x1 = T.sub(pred[:, 0], half_w)
    x2 = T.add(pred[:, 0], half_w)
    y1 = T.sub(pred[:, 1], half_h)
    y2 = T.add(pred[:, 1], half_h)
    area = T.mul(w, h)

    ix = T.maximum(T.sub(T.minimum(x2, t[:, 2]), T.maximum(x1, t[:, 0])), 0.0)
    iy = T.maximum(T.sub(T.minimum(y2, t[:, 3]), T.maximum(y1, t[:, 1])), 0.0)
    inter = T.mul(ix, iy)
    union = T.sub(T.add(area, t_area), inter)

    ex = T.sub(T.maximum(x2, t[:, 2]), T.minimum(x1, t[:, 0]))
    ey = T.sub(T.maximum(y2, t[:, 3]), T.minimum(y1, t[:, 1]))
    enclosing = T.maximum(T.mul(ex, ey), 1e-12)

    iou = T.div(inter, T.maximum(union, 1e-12))
    return T.sub(iou, T.div(T.sub(enclosing, union), enclosing))


def hungarian_loss(pred_boxes: Tensor, pred_relevance_logits: Tensor, target_boxes,
                   coeffs: MatchCostCoeffs) -> Tensor:
    """Set loss on one image: matched -log p + L1 + (1 - GIoU) terms plus
    down-weighted background NLL on unmatched queries.

    The assignment is computed on detached values; matched terms are
    normalized by max(1, M) and background terms by R.
    """
    targets = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    r = pred_boxes.shape[0]
    m = targets.shape[0]
    if m > 0:
        cost = cost_matrix(pred_boxes.data, pred_relevance_logits.data, targets, coeffs)
        pairs = hungarian_match(cost)
    else:
        pairs = []

    p_rel = T.sigmoid(pred_relevance_logits)
    if pairs:
        rows = np.asarray([row for row, _ in pairs], dtype=np.int64)
        cols = np.asarray([col for _, col in pairs], dtype=np.int64)
        matched_boxes = T.slice_(pred_boxes, (rows,))
        matched_targets = targets[cols]
        nll = T.neg(T.sum_(T.log(T.maximum(T.slice_(p_rel, (rows,)), 1e-12))))
        l1 = T.mul(T.sum_(T.abs_(T.sub(matched_boxes, matched_targets))), coeffs.l1_weight)
        g = T.mul(
            T.sum_(T.sub(1.0, giou_tensor(matched_boxes, matched_targets))),
            coeffs.giou_weight,
        )
        matched = T.mul(T.add(T.add(nll, l1), g), 1.0 / max(1, m))
        matched_rows = set(rows.tolist())
    else:
        matched = Tensor(0.0)
        matched_rows = set()

    unmatched = [i for i in range(r) if i not in matched_rows]
    if unmatched:
        p_bg = T.sub(1.0, T.slice_(p_rel, (np.asarray(unmatched, dtype=np.int64),)))
        bg_nll = T.neg(T.sum_(T.log(T.maximum(p_bg, 1e-12))))
        background = T.mul(bg_nll, coeffs.background_weight / r)
    else:
        background = Tensor(0.0)
    return T.add(matched, background)


def text_nll(step_logits: Tensor, target_ids, task_weight: float = 1.0) -> Tensor:
    """task_weight x mean cross-entropy of teacher-forced `step_logits`
    ((L, V)) against `target_ids` (length L)."""
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.size == 0:
        raise TensorError("text_nll: empty target")
    if step_logits.shape[0] != ids.shape[0]:
        raise TensorError(
            f"text_nll: {step_logits.shape[0]} logit rows vs {ids.shape[0]} targets"
        )
    ce = T.cross_entropy_from_logits(step_logits, ids)
    return T.mul(T.mean(ce), task_weight)
