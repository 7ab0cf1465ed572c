"""Clip-level training.

A clip is ``clip_length`` frames drawn from one video with a random stride,
so stored features reach back over varied time spans. Within a clip, track
bookkeeping is driven by ground truth: a track follows the identity it was
born from, appends a feature whenever that identity is annotated, and is
dropped after ``n_keep`` frames without it. Nothing is detached, so the loss
is differentiable end to end through the whole clip.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .assignment import Assignment, match_identity_first
from .core import Config, FrameAnnotations
from .losses import LossBreakdown, class_nll, clip_loss, frame_loss, paired_giou
from .model import FrameFeatures, TrackerModel, merge_frames
from .synthgen import Dataset, VideoItem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_clips: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    max_stride: int = 10
    lr_drop_fraction: float = 0.25
    seed: int = 0
    max_steps: Optional[int] = None


@dataclass
class _Track:
    bank: list
    anchor: torch.Tensor
    lost_age: int = 0


@dataclass
class ClipResult:
    loss: torch.Tensor
    breakdowns: list
    encoder_terms: list
    rows_per_frame: list = field(default_factory=list)


def _center_cells(gt: FrameAnnotations, g: int) -> dict[int, int]:
    """Grid cell holding each gt center; the first object wins a shared cell."""
    cell_gt = {}
    for j, e in enumerate(gt.entries):
        col = min(g - 1, max(0, int(e.box.cx * g)))
        row = min(g - 1, max(0, int(e.box.cy * g)))
        cell_gt.setdefault(row * g + col, j)
    return cell_gt


def encoder_loss(frame: FrameFeatures, gt: FrameAnnotations, config: Config) -> torch.Tensor:
    """Proposal supervision: objectness on cells holding a gt center, box regression there."""
    target = torch.zeros_like(frame.objectness)
    cell_gt = _center_cells(gt, config.grid)
    for cell in cell_gt:
        target[cell] = 1.0
    loss = F.binary_cross_entropy_with_logits(frame.objectness, target)
    if cell_gt:
        cells = list(cell_gt)
        gt_boxes = torch.as_tensor(gt.boxes()[[cell_gt[c] for c in cells]], dtype=frame.token_boxes.dtype)
        pred = frame.token_boxes[cells]
        loss = loss + (config.lambda_l1 * (pred - gt_boxes).abs().sum(-1).mean()
                       + config.lambda_giou * (1 - paired_giou(pred, gt_boxes)).mean())
    return config.lambda_enc * loss


def clip_forward(model: TrackerModel, frames: Sequence, annotations: Sequence[FrameAnnotations],
                 collect_rows: bool = False, reference: bool = False) -> ClipResult:
    return batch_forward(model, [(frames, annotations)], collect_rows, reference)[0]


class _BatchLoss:
    """Accumulates per-clip losses for a lockstep batch with a fixed number of ops per step.

    Rows of every clip are handled together; per-clip sums come from
    ``index_add``. The result equals :func:`clip_loss` over the per-frame
    reference terms, which :func:`batch_forward` can also return.
    """

    def __init__(self, n_clips: int, n_layers: int, config: Config, like: torch.Tensor):
        self.cfg = config
        self.n = n_clips
        self.bip = like.new_zeros(n_clips)
        self.enc = like.new_zeros(n_clips)
        self.toc = [like.new_zeros(n_clips) for _ in range(n_layers)]
        self.counts = np.zeros((n_layers, n_clips), dtype=np.int64)

    def _sum(self, clip, values):
        return self.bip.new_zeros(self.n).index_add(0, torch.as_tensor(clip, dtype=torch.long), values)

    def add_encoder(self, frames: list[FrameFeatures], gts: Sequence[FrameAnnotations]):
        cfg = self.cfg
        obj = torch.stack([f.objectness for f in frames])
        target = torch.zeros_like(obj)
        clip, rows, gt_boxes, coef = [], [], [], []
        for b, gt in enumerate(gts):
            cell_gt = _center_cells(gt, cfg.grid)
            if not cell_gt:
                continue
            target[b, list(cell_gt)] = 1.0
            boxes = gt.boxes()
            for cell, j in cell_gt.items():
                clip.append(b)
                rows.append(b * obj.shape[1] + cell)
                gt_boxes.append(boxes[j])
                coef.append(1.0 / len(cell_gt))
        loss = F.binary_cross_entropy_with_logits(obj, target, reduction="none").mean(1)
        if rows:
            pred = torch.stack([f.token_boxes for f in frames]).flatten(0, 1)[rows]
            tb = torch.as_tensor(np.array(gt_boxes), dtype=pred.dtype)
            per = cfg.lambda_l1 * (pred - tb).abs().sum(-1) + cfg.lambda_giou * (1 - paired_giou(pred, tb))
            loss = loss + self._sum(clip, per * torch.as_tensor(coef, dtype=pred.dtype))
        self.enc = self.enc + cfg.lambda_enc * loss

    def add_layer(self, layer: int, log_probs, boxes, cls_terms, box_terms, his_cls, his_box):
        """Each ``*_terms`` is a list of ``(clip, row, target, coef)`` tuples.

        Class targets are class ids; box targets are gt box arrays. ``his_*``
        entries go to the historical numerator, the rest to the set loss.
        """
        cfg = self.cfg
        dtype = log_probs.dtype
        n_bip_cls = len(cls_terms)
        c_clip, c_row, c_tgt, c_coef = zip(*(cls_terms + his_cls)) if cls_terms or his_cls else ((),) * 4
        if c_row:
            nll = class_nll(log_probs[list(c_row)], torch.as_tensor(c_tgt, dtype=torch.long), cfg)
            vals = nll * torch.as_tensor(c_coef, dtype=dtype)
            self.bip = self.bip + cfg.lambda_cls * self._sum(c_clip[:n_bip_cls], vals[:n_bip_cls])
            self.toc[layer] = self.toc[layer] + self._sum(c_clip[n_bip_cls:], vals[n_bip_cls:])
        n_bip_box = len(box_terms)
        if box_terms or his_box:
            b_clip, b_row, b_tgt, b_coef = zip(*(box_terms + his_box))
            pb = boxes[list(b_row)]
            tb = torch.as_tensor(np.array(b_tgt), dtype=dtype)
            per = cfg.lambda_l1 * (pb - tb).abs().sum(-1) + cfg.lambda_giou * (1 - paired_giou(pb, tb))
            vals = per * torch.as_tensor(b_coef, dtype=dtype)
            self.bip = self.bip + self._sum(b_clip[:n_bip_box], vals[:n_bip_box])
            self.toc[layer] = self.toc[layer] + self._sum(b_clip[n_bip_box:], vals[n_bip_box:])

    def totals(self) -> torch.Tensor:
        total = self.bip + self.enc
        for layer, num in enumerate(self.toc):
            denom = torch.as_tensor(np.maximum(1, self.counts[layer]), dtype=num.dtype)
            total = total + num / denom
        return total


def batch_forward(model: TrackerModel, clips: Sequence[tuple[Sequence, Sequence[FrameAnnotations]]],
                  collect_rows: bool = False, reference: bool = False) -> list[ClipResult]:
    """Teacher-forced forward pass over several equal-length clips at once.

    The clips advance in lockstep; at each time step their queries share one
    decoder pass, kept independent by segment masks, and the loss is
    accumulated for all clips with a fixed number of tensor ops. With
    ``reference=True`` each result also carries the per-frame
    :class:`LossBreakdown` terms computed one clip at a time.
    """
    cfg = model.config
    n_clips = len(clips)
    length = len(clips[0][0])
    if any(len(f) != length or len(a) != length for f, a in clips):
        raise ValueError("all clips in a batch must have the same length")
    tracks: list[dict[int, _Track]] = [{} for _ in clips]
    breakdowns = [[] for _ in clips]
    enc_terms = [[] for _ in clips]
    rows_log = [[] for _ in clips]
    group_of: dict[tuple[int, int], int] = {}
    acc = None
    for t in range(length):
        frames = model.encode_frames([clips[b][0][t] for b in range(n_clips)])
        gts = [clips[b][1][t] for b in range(n_clips)]
        if acc is None:
            acc = _BatchLoss(n_clips, cfg.num_decoders, cfg, frames[0].tokens)
        acc.add_encoder(frames, gts)
        if reference:
            for b in range(n_clips):
                enc_terms[b].append(encoder_loss(frames[b], gts[b], cfg))
        track_ids = [list(tr) for tr in tracks]
        contents, anchors, groups, segment = [], [], [], []
        latest_rows = [[] for _ in clips]
        his_rows = [[] for _ in clips]
        his_owner = [[] for _ in clips]
        row = 0
        for b in range(n_clips):
            for tid in track_ids[b]:
                tr = tracks[b][tid]
                gid = group_of.setdefault((b, tid), len(group_of))
                for k, (_, feat) in enumerate(tr.bank):
                    contents.append(feat[None])
                    anchors.append(tr.anchor[None])
                    groups.append(gid)
                    segment.append(b)
                    (latest_rows[b] if k == 0 else his_rows[b]).append(row)
                    if k:
                        his_owner[b].append(tid)
                    row += 1
        n_tracking = row
        det_rows = []
        for b in range(n_clips):
            det_rows.append(list(range(row, row + cfg.n_det)))
            row += cfg.n_det
        merged = merge_frames(frames)
        content = torch.cat(contents + [merged.proposal_content])
        anchor = torch.cat(anchors + [merged.proposal_anchors])
        group_id = np.array(groups + [-1 - j for j in range(n_clips * cfg.n_det)])
        segment = np.array(segment + [b for b in range(n_clips) for _ in range(cfg.n_det)])
        outputs = model.forward_frame(content, anchor, group_id, n_tracking, merged, segment)

        last_assignment: list[Optional[Assignment]] = [None] * n_clips
        per_layer = [[] for _ in clips]
        for layer, out in enumerate(outputs):
            log_probs = out.logits.log_softmax(-1)
            probs_np = log_probs.detach().exp().double().numpy()
            boxes_np = out.boxes.detach().double().numpy()
            cls_terms, box_terms, his_cls, his_box = [], [], [], []
            for b in range(n_clips):
                gt = gts[b]
                gt_boxes = gt.boxes()
                gt_classes = [e.class_id for e in gt.entries]
                assignment = match_identity_first(track_ids[b], probs_np[det_rows[b]], boxes_np[det_rows[b]],
                                                  gt, cfg.lambda_cls, cfg.lambda_l1, cfg.lambda_giou)
                last_assignment[b] = assignment
                bip_rows = latest_rows[b] + det_rows[b]
                target = dict(assignment.pairs)
                weight = sum(1.0 if r in target else cfg.eos_coef for r in range(len(bip_rows)))
                for r, q in enumerate(bip_rows):
                    cls_terms.append((b, q, gt_classes[target[r]] if r in target else 0,
                                      (1.0 if r in target else cfg.eos_coef) / weight))
                for r, c in assignment.pairs:
                    box_terms.append((b, bip_rows[r], gt_boxes[c], 1.0 / len(assignment.pairs)))
                track_target = {track_ids[b][r]: c for r, c in assignment.pairs if r < len(track_ids[b])}
                his_targets = [track_target.get(tid, -1) for tid in his_owner[b]]
                for q, c in zip(his_rows[b], his_targets):
                    his_cls.append((b, q, gt_classes[c] if c >= 0 else 0, 1.0))
                    if c >= 0:
                        his_box.append((b, q, gt_boxes[c], 1.0))
                        acc.counts[layer, b] += 1
                if reference:
                    per_layer[b].append(frame_loss(
                        log_probs[bip_rows], out.boxes[bip_rows], assignment,
                        log_probs[his_rows[b]], out.boxes[his_rows[b]], his_targets,
                        gt_boxes, gt_classes, cfg))
            acc.add_layer(layer, log_probs, out.boxes, cls_terms, box_terms, his_cls, his_box)
        final = outputs[-1]
        for b in range(n_clips):
            if reference:
                breakdowns[b].append(per_layer[b])
            if collect_rows:
                rows_log[b].append({tid: len(tracks[b][tid].bank) for tid in track_ids[b]})
            gt = gts[b]
            present = set(gt.track_ids)
            for r, tid in zip(latest_rows[b], track_ids[b]):
                tr = tracks[b][tid]
                if tid in present:
                    tr.bank = ([(t, final.content[r])] + tr.bank)[: cfg.n_max]
                    tr.anchor = final.boxes[r]
                    tr.lost_age = 0
                else:
                    tr.lost_age += 1
                    if tr.lost_age > cfg.n_keep:
                        del tracks[b][tid]
            n_tr = len(track_ids[b])
            for r, c in last_assignment[b].pairs:
                if r >= n_tr:
                    q = det_rows[b][r - n_tr]
                    tracks[b][gt.entries[c].track_id] = _Track([(t, final.content[q])], final.boxes[q])
    totals = acc.totals()
    return [ClipResult(totals[b], breakdowns[b], enc_terms[b], rows_log[b]) for b in range(n_clips)]


def sample_clip(item: VideoItem, length: int, max_stride: int, rng: np.random.Generator):
    """Pick a stride in ``1..max_stride`` (capped by video length) and a start frame."""
    n = len(item)
    cap = max(1, min(max_stride, (n - 1) // max(1, length - 1)))
    stride = int(rng.integers(1, cap + 1))
    span = (length - 1) * stride
    start = int(rng.integers(0, max(1, n - span)))
    idx = [min(n - 1, start + k * stride) for k in range(length)]
    return idx, stride


def train(model: TrackerModel, dataset: Dataset, tc: TrainConfig,
          callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Optimize ``model`` in place; returns one history record per optimizer step.

    Data order is drawn from ``tc.seed`` only, so two models trained with the
    same seed see identical clips regardless of their configs.
    """
    cfg = model.config
    rng = np.random.default_rng(tc.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / tc.batch_clips)
    total = steps_per_epoch * tc.epochs
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    drop_at = int(round(total * (1 - tc.lr_drop_fraction)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[drop_at], gamma=0.1)
    history = []
    model.train()
    step = 0
    start = time.time()
    for epoch in range(tc.epochs):
        order = rng.permutation(len(dataset))
        for b in range(steps_per_epoch):
            if step >= total:
                break
            batch = order[b * tc.batch_clips:(b + 1) * tc.batch_clips]
            opt.zero_grad()
            clips = []
            for vi in batch:
                item = dataset[int(vi)]
                idx, _ = sample_clip(item, cfg.clip_length, tc.max_stride, rng)
                clips.append(([item.frames[i] for i in idx], [item.annotations[i] for i in idx]))
            results = batch_forward(model, clips)
            loss = sum(r.loss for r in results) / len(results)
            loss.backward()
            losses = [float(r.loss.detach()) for r in results]
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            sched.step()
            rec = {"step": step, "epoch": epoch, "loss": float(np.mean(losses)),
                   "grad_norm": float(grad_norm), "lr": opt.param_groups[0]["lr"],
                   "elapsed": time.time() - start}
            history.append(rec)
            if callback:
                callback(rec)
            step += 1
    model.eval()
    return history
