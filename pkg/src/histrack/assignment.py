"""Bipartite assignment between predictions and ground truth.

``solve_min_cost`` returns a globally optimal assignment and, among all
optimal ones, the lexicographically smallest list of ``(row, col)`` pairs.
The optimum itself comes from :func:`scipy.optimize.linear_sum_assignment`;
the tie-break is a greedy pass that fixes one pair at a time and keeps it
only if the remaining subproblem can still reach the optimum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoundingBox, FrameAnnotations, Prediction


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)

    def validate(self, n_pred: int, n_gt: int) -> None:
        rows = [r for r, _ in self.pairs]
        cols = [c for _, c in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise AssertionError("an index appears in two pairs")
        if sorted(rows + self.unmatched_predictions) != list(range(n_pred)):
            raise AssertionError("prediction cover is not a partition")
        if sorted(cols + self.unmatched_gt) != list(range(n_gt)):
            raise AssertionError("ground-truth cover is not a partition")


def _optimum(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def _tolerance(cost: np.ndarray) -> float:
    scale = float(np.abs(cost).max()) if cost.size else 0.0
    return 1e-9 * max(1.0, scale) * max(1, min(cost.shape))


def _lower_bound(cost, rows, cols, used_col, need) -> float:
    """Cheap bound on the cost of ``need`` more pairs from ``rows`` x ``cols - {used_col}``."""
    if need == 0 or not rows:
        return 0.0
    rest = [x for x in cols if x != used_col]
    sub = cost[np.ix_(rows, rest)]
    if len(rows) >= len(rest):
        return float(sub.min(axis=0).sum())
    return float(sub.min(axis=1).sum())


def solve_min_cost(cost) -> Assignment:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = cost.shape
    k = min(n_rows, n_cols)
    target = _optimum(cost)
    tol = _tolerance(cost)

    pairs: list[tuple[int, int]] = []
    spent = 0.0
    free_rows = list(range(n_rows))
    free_cols = list(range(n_cols))
    while len(pairs) < k:
        placed = False
        for i, r in enumerate(free_rows):
            # rows skipped here stay unmatched, so the rest must still fit
            rest_rows = free_rows[i + 1:]
            if len(rest_rows) < k - len(pairs) - 1:
                break
            for c in free_cols:
                need = k - len(pairs) - 1
                base = spent + cost[r, c]
                if base + _lower_bound(cost, rest_rows, free_cols, c, need) > target + tol:
                    continue
                if need == 0:
                    total = base
                else:
                    rest_cols = [x for x in free_cols if x != c]
                    total = base + _optimum(cost[np.ix_(rest_rows, rest_cols)])
                if total <= target + tol:
                    pairs.append((r, c))
                    spent += cost[r, c]
                    free_rows = rest_rows
                    free_cols = [x for x in free_cols if x != c]
                    placed = True
                    break
            if placed:
                break
        if not placed:  # pragma: no cover - guarded by the optimum above
            raise RuntimeError("tie-break search failed to reach the optimum")
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_predictions=[r for r in range(n_rows) if r not in matched_r],
        unmatched_gt=[c for c in range(n_cols) if c not in matched_c],
    )


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between center-format box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b1, b2 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a2, b2) - np.maximum(a1, b1), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = np.prod(a2 - a1, axis=-1) + np.prod(b2 - b1, axis=-1) - inter
    hull_wh = np.maximum(a2, b2) - np.minimum(a1, b1)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull


def detection_cost_matrix(probs, boxes, gt_boxes, gt_classes, lambda_cls=2.0, lambda_l1=5.0,
                          lambda_giou=2.0) -> np.ndarray:
    """Matching cost ``-λc·p(class) + λ1·|b - g|₁ - λg·GIoU`` per (prediction, gt)."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return np.zeros((len(boxes), len(gt_boxes)))
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    return (-lambda_cls * probs[:, gt_classes] + lambda_l1 * l1
            - lambda_giou * giou_matrix(boxes, gt_boxes))


def detection_cost(preds: Sequence[Prediction], gt_boxes: Sequence[BoundingBox],
                   gt_classes: Sequence[int], lambda_cls=2.0, lambda_l1=5.0,
                   lambda_giou=2.0) -> np.ndarray:
    if not preds or not gt_boxes:
        return np.zeros((len(preds), len(gt_boxes)))
    return detection_cost_matrix(np.stack([p.class_probs for p in preds]),
                                 np.stack([p.box.as_array() for p in preds]),
                                 np.stack([g.as_array() for g in gt_boxes]),
                                 gt_classes, lambda_cls, lambda_l1, lambda_giou)


def build_matching(track_latest: Mapping[int, Prediction], det_preds: Sequence[Prediction],
                   gt: FrameAnnotations, lambda_cls=2.0, lambda_l1=5.0,
                   lambda_giou=2.0) -> Assignment:
    """Identity-first matching over ``[tracks..., detections...]`` prediction rows.

    Rows ``0..len(track_latest)-1`` are the tracks in the mapping's iteration
    order; detection rows follow. A track whose id appears in ``gt`` is bound
    to that entry; the leftover ground truth is matched to detection rows by
    minimum cost.
    """
    probs = np.stack([p.class_probs for p in det_preds]) if det_preds else np.zeros((0, 2))
    boxes = np.stack([p.box.as_array() for p in det_preds]) if det_preds else np.zeros((0, 4))
    return match_identity_first(list(track_latest), probs, boxes, gt,
                                lambda_cls, lambda_l1, lambda_giou)


def match_identity_first(track_ids: Sequence[int], det_probs, det_boxes, gt: FrameAnnotations,
                         lambda_cls=2.0, lambda_l1=5.0, lambda_giou=2.0) -> Assignment:
    """Array form of :func:`build_matching`."""
    gt_index = {e.track_id: j for j, e in enumerate(gt.entries)}
    if len(gt_index) != len(gt.entries):
        raise ValueError("ground-truth ids must be unique")
    pairs, unmatched = [], []
    claimed = set()
    for row, tid in enumerate(track_ids):
        if tid in gt_index:
            pairs.append((row, gt_index[tid]))
            claimed.add(gt_index[tid])
        else:
            unmatched.append(row)
    offset = len(track_ids)
    n_det = len(det_boxes)
    free_gt = [j for j in range(len(gt.entries)) if j not in claimed]
    gt_boxes = gt.boxes()[free_gt] if free_gt else np.zeros((0, 4))
    gt_classes = [gt.entries[j].class_id for j in free_gt]
    cost = detection_cost_matrix(det_probs, det_boxes, gt_boxes, gt_classes,
                                 lambda_cls, lambda_l1, lambda_giou)
    sub = solve_min_cost(cost)
    pairs += [(offset + r, free_gt[c]) for r, c in sub.pairs]
    matched_det = {r for r, _ in sub.pairs}
    unmatched += [offset + r for r in range(n_det) if r not in matched_det]
    matched_gt = {c for _, c in pairs}
    return Assignment(
        pairs=sorted(pairs),
        unmatched_predictions=sorted(unmatched),
        unmatched_gt=[j for j in range(len(gt.entries)) if j not in matched_gt],
    )
