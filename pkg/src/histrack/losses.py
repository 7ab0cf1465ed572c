"""Training objective.

Per frame and decoder layer, the latest-feature row of every track plus all
detection rows get a one-to-one set loss under the frame's assignment. The
remaining historical rows of each track share their track's target: the
assigned object when the track is matched, background otherwise. Their loss
is normalized once per clip by the number of matched historical rows summed
over all frames.

All functions take log-probabilities with background at index 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .assignment import Assignment
from .core import Config


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def paired_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU between corresponding rows of two ``(N, 4)`` center-format tensors."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    hull_wh = torch.maximum(a[:, 2:], b[:, 2:]) - torch.minimum(a[:, :2], b[:, :2])
    hull = hull_wh[:, 0] * hull_wh[:, 1]
    return inter / union - (hull - union) / hull


def class_nll(log_probs: torch.Tensor, targets: torch.Tensor, config: Config) -> torch.Tensor:
    """Per-row ``-log p(target)``, or its focal variant."""
    lp = log_probs.gather(1, targets[:, None])[:, 0]
    if config.class_loss == "focal":
        return -((1 - lp.exp()) ** config.focal_gamma) * lp
    return -lp


@dataclass
class LossBreakdown:
    bip_class: torch.Tensor
    bip_l1: torch.Tensor
    bip_giou: torch.Tensor
    toc: torch.Tensor
    n_his: int
    lambdas: tuple = (2.0, 5.0, 2.0)

    @property
    def bip(self) -> torch.Tensor:
        lc, l1, lg = self.lambdas
        return lc * self.bip_class + l1 * self.bip_l1 + lg * self.bip_giou

    @property
    def total(self) -> torch.Tensor:
        return self.bip + self.toc / max(1, self.n_his)

    def as_floats(self) -> dict:
        return {"bip_class": float(self.bip_class), "bip_l1": float(self.bip_l1),
                "bip_giou": float(self.bip_giou), "toc": float(self.toc),
                "n_his": self.n_his, "total": float(self.total)}


def _gt_tensors(gt_boxes, gt_classes, like: torch.Tensor):
    boxes = torch.as_tensor(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4), dtype=like.dtype)
    classes = torch.as_tensor(np.asarray(gt_classes, dtype=np.int64).reshape(-1))
    return boxes, classes


def bipartite_loss(log_probs: torch.Tensor, boxes: torch.Tensor, gt_boxes, gt_classes,
                   assignment: Assignment, config: Config):
    """Return ``(class, l1, giou)`` terms, unweighted.

    The class term is a weighted mean over all rows; unmatched rows target
    background with weight ``eos_coef``. Box terms average over matched pairs.
    """
    n = log_probs.shape[0]
    if n == 0:
        zero = log_probs.sum() * 0.0
        return zero, zero, zero
    gtb, gtc = _gt_tensors(gt_boxes, gt_classes, boxes)
    targets = torch.zeros(n, dtype=torch.long)
    weights = torch.full((n,), config.eos_coef, dtype=log_probs.dtype)
    rows = [r for r, _ in assignment.pairs]
    cols = [c for _, c in assignment.pairs]
    if rows:
        targets[rows] = gtc[cols]
        weights[rows] = 1.0
    cls = (weights * class_nll(log_probs, targets, config)).sum() / weights.sum()
    if not rows:
        zero = boxes.sum() * 0.0
        return cls, zero, zero
    pb, tb = boxes[rows], gtb[cols]
    l1 = (pb - tb).abs().sum() / len(rows)
    giou = (1.0 - paired_giou(pb, tb)).sum() / len(rows)
    return cls, l1, giou


def toc_loss(log_probs: torch.Tensor, boxes: torch.Tensor, row_targets: Sequence[int],
             gt_boxes, gt_classes, config: Config):
    """Loss of historical (non-latest) rows; returns ``(numerator, matched_count)``.

    ``row_targets[k]`` is the ground-truth index assigned to row ``k``'s track,
    or ``-1`` when the track is unmatched this frame. Matched rows pay class
    plus box loss; unmatched rows pay ``-log p(background)`` and are not
    counted.
    """
    n = log_probs.shape[0]
    if n == 0:
        return log_probs.sum() * 0.0, 0
    gtb, gtc = _gt_tensors(gt_boxes, gt_classes, boxes)
    tgt = torch.as_tensor(np.asarray(row_targets, dtype=np.int64))
    matched = tgt >= 0
    classes = torch.zeros(n, dtype=torch.long)
    classes[matched] = gtc[tgt[matched]]
    total = class_nll(log_probs, classes, config).sum()
    count = int(matched.sum())
    if count:
        pb, tb = boxes[matched], gtb[tgt[matched]]
        total = total + config.lambda_l1 * (pb - tb).abs().sum() \
            + config.lambda_giou * (1.0 - paired_giou(pb, tb)).sum()
    return total, count


def frame_loss(log_probs_bip, boxes_bip, assignment, log_probs_his, boxes_his, his_targets,
               gt_boxes, gt_classes, config: Config) -> LossBreakdown:
    cls, l1, giou = bipartite_loss(log_probs_bip, boxes_bip, gt_boxes, gt_classes, assignment, config)
    toc, n_his = toc_loss(log_probs_his, boxes_his, his_targets, gt_boxes, gt_classes, config)
    return LossBreakdown(cls, l1, giou, toc, n_his,
                         (config.lambda_cls, config.lambda_l1, config.lambda_giou))


def clip_loss(breakdowns: Sequence[Sequence[LossBreakdown]],
              extra_terms: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
    """Sum a clip's losses; ``breakdowns[t][l]`` is frame ``t``, decoder layer ``l``.

    Historical-row losses of each layer are divided by that layer's matched
    historical count summed over the clip (at least 1). ``extra_terms`` (for
    example encoder proposal losses) are added as they are.
    """
    if not breakdowns:
        raise ValueError("clip must contain at least one frame")
    n_layers = len(breakdowns[0])
    total = 0.0
    for l in range(n_layers):
        column = [frame[l] for frame in breakdowns]
        bip = sum(b.bip for b in column)
        count = sum(b.n_his for b in column)
        toc = sum(b.toc for b in column) / max(1, count)
        total = total + bip + toc
    if extra_terms:
        total = total + sum(extra_terms)
    return total
