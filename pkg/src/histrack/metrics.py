"""CLEAR-MOT, IDF1 and HOTA.

Every metric is computed from raw per-video statistics that add across
videos, so a dataset-level score is the metric of the summed counts rather
than an average of per-video ratios.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .assignment import solve_min_cost
from .core import FrameAnnotations, iou_matrix
from .synthgen import VideoItem
from .tracker import TrackFile

EPS = np.finfo(float).eps
ALPHAS = np.round(np.arange(0.05, 0.96, 0.05), 2)

GroundTruth = Union[VideoItem, Sequence[FrameAnnotations]]


@dataclass
class _Frame:
    gt_ids: np.ndarray
    gt_boxes: np.ndarray
    pr_ids: np.ndarray
    pr_boxes: np.ndarray

    def iou(self) -> np.ndarray:
        if len(self.gt_ids) == 0 or len(self.pr_ids) == 0:
            return np.zeros((len(self.gt_ids), len(self.pr_ids)))
        return iou_matrix(self.gt_boxes, self.pr_boxes)


def _frames(pred: TrackFile, gt: GroundTruth) -> list[_Frame]:
    anns = gt.annotations if isinstance(gt, VideoItem) else list(gt)
    by_frame = pred.frames()
    n = max(len(anns), max(by_frame, default=-1) + 1)
    out = []
    for t in range(n):
        entries = sorted(anns[t].entries, key=lambda e: e.track_id) if t < len(anns) else []
        rows = sorted(by_frame.get(t, []), key=lambda r: r.track_id)
        out.append(_Frame(
            np.array([e.track_id for e in entries], dtype=np.int64),
            np.array([e.box.as_array() for e in entries]).reshape(-1, 4),
            np.array([r.track_id for r in rows], dtype=np.int64),
            np.array([r.box.as_array() for r in rows]).reshape(-1, 4),
        ))
    return out


def _maximize(score: np.ndarray) -> list[tuple[int, int]]:
    if score.size == 0:
        return []
    return solve_min_cost(-score).pairs


# -- CLEAR -------------------------------------------------------------------

@dataclass
class ClearStats:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    idsw: int = 0

    def __add__(self, other: "ClearStats") -> "ClearStats":
        return ClearStats(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp,
                          self.idsw + other.idsw)

    @property
    def num_gt(self) -> int:
        return self.tp + self.fn

    @property
    def mota(self) -> float:
        return (self.tp - self.fp - self.idsw) / max(1, self.num_gt)


def clear_metrics(pred: TrackFile, gt: GroundTruth, iou_thresh: float = 0.5) -> ClearStats:
    """Per-frame IoU matching that keeps last frame's pairs when still above threshold.

    Identity switches count a gt object matched to a different predicted id
    than the last one it was matched to. Ties go to the lower gt id.
    """
    stats = ClearStats()
    last_match: dict[int, int] = {}
    prev_step: dict[int, int] = {}
    for fr in _frames(pred, gt):
        sim = fr.iou()
        carry = np.array([[prev_step.get(int(g)) == int(p) for p in fr.pr_ids] for g in fr.gt_ids],
                         dtype=float).reshape(sim.shape)
        score = 1000.0 * carry + sim
        score[sim < iou_thresh - EPS] = 0.0
        pairs = [(i, j) for i, j in _maximize(score) if score[i, j] > EPS]
        step = {}
        for i, j in pairs:
            g, p = int(fr.gt_ids[i]), int(fr.pr_ids[j])
            if g in last_match and last_match[g] != p:
                stats.idsw += 1
            last_match[g] = p
            step[g] = p
        prev_step = step
        stats.tp += len(pairs)
        stats.fn += len(fr.gt_ids) - len(pairs)
        stats.fp += len(fr.pr_ids) - len(pairs)
    return stats


# -- IDF1 --------------------------------------------------------------------

@dataclass
class IdentityStats:
    idtp: int = 0
    idfn: int = 0
    idfp: int = 0

    def __add__(self, other: "IdentityStats") -> "IdentityStats":
        return IdentityStats(self.idtp + other.idtp, self.idfn + other.idfn, self.idfp + other.idfp)

    @property
    def idf1(self) -> float:
        return self.idtp / max(1.0, self.idtp + 0.5 * self.idfp + 0.5 * self.idfn)


def identity_stats(pred: TrackFile, gt: GroundTruth, iou_thresh: float = 0.5) -> IdentityStats:
    frames = _frames(pred, gt)
    gt_ids = sorted({int(g) for fr in frames for g in fr.gt_ids})
    pr_ids = sorted({int(p) for fr in frames for p in fr.pr_ids})
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    n_gt = n_pr = 0
    for fr in frames:
        n_gt += len(fr.gt_ids)
        n_pr += len(fr.pr_ids)
        sim = fr.iou()
        for i, j in zip(*np.nonzero(sim >= iou_thresh - EPS)):
            overlap[gi[int(fr.gt_ids[i])], pi[int(fr.pr_ids[j])]] += 1
    idtp = int(sum(overlap[i, j] for i, j in _maximize(overlap)))
    return IdentityStats(idtp, n_gt - idtp, n_pr - idtp)


def idf1(pred: TrackFile, gt: GroundTruth, iou_thresh: float = 0.5) -> float:
    return identity_stats(pred, gt, iou_thresh).idf1


# -- HOTA --------------------------------------------------------------------

@dataclass
class HotaStats:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    ass_sum: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))

    def __add__(self, other: "HotaStats") -> "HotaStats":
        return HotaStats(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp,
                         self.ass_sum + other.ass_sum)

    @property
    def det_a_curve(self) -> np.ndarray:
        return self.tp / np.maximum(1.0, self.tp + self.fn + self.fp)

    @property
    def ass_a_curve(self) -> np.ndarray:
        return self.ass_sum / np.maximum(1.0, self.tp)

    @property
    def hota_curve(self) -> np.ndarray:
        return np.sqrt(self.det_a_curve * self.ass_a_curve)

    @property
    def hota(self) -> float:
        return float(self.hota_curve.mean())

    @property
    def det_a(self) -> float:
        return float(self.det_a_curve.mean())

    @property
    def ass_a(self) -> float:
        return float(self.ass_a_curve.mean())


def hota_stats(pred: TrackFile, gt: GroundTruth) -> HotaStats:
    """Plain HOTA: one matching per frame, then thresholded at every alpha.

    The per-frame matching maximizes IoU weighted by each id pair's global
    alignment, which is the soft co-occurrence of the two ids over the video.
    """
    frames = _frames(pred, gt)
    gt_ids = sorted({int(g) for fr in frames for g in fr.gt_ids})
    pr_ids = sorted({int(p) for fr in frames for p in fr.pr_ids})
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    n_g, n_p = len(gt_ids), len(pr_ids)
    potential = np.zeros((n_g, n_p))
    gt_count = np.zeros(n_g)
    pr_count = np.zeros(n_p)
    sims = []
    for fr in frames:
        sim = fr.iou()
        sims.append(sim)
        g_idx = [gi[int(g)] for g in fr.gt_ids]
        p_idx = [pi[int(p)] for p in fr.pr_ids]
        gt_count[g_idx] += 1
        pr_count[p_idx] += 1
        if sim.size:
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            soft = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > EPS)
            potential[np.ix_(g_idx, p_idx)] += soft
    alignment = potential / np.maximum(EPS, gt_count[:, None] + pr_count[None, :] - potential)

    stats = HotaStats()
    matches = np.zeros((len(ALPHAS), n_g, n_p))
    for fr, sim in zip(frames, sims):
        g_idx = [gi[int(g)] for g in fr.gt_ids]
        p_idx = [pi[int(p)] for p in fr.pr_ids]
        pairs = _maximize(alignment[np.ix_(g_idx, p_idx)] * sim) if sim.size else []
        for a, alpha in enumerate(ALPHAS):
            ok = [(i, j) for i, j in pairs if sim[i, j] >= alpha - EPS]
            stats.tp[a] += len(ok)
            stats.fn[a] += len(g_idx) - len(ok)
            stats.fp[a] += len(p_idx) - len(ok)
            for i, j in ok:
                matches[a, g_idx[i], p_idx[j]] += 1
    for a in range(len(ALPHAS)):
        m = matches[a]
        ass = m / np.maximum(1.0, gt_count[:, None] + pr_count[None, :] - m)
        stats.ass_sum[a] = float((m * ass).sum())
    return stats


@dataclass
class HotaResult:
    hota: float
    det_a: float
    ass_a: float
    curve: list[tuple[float, float, float, float]]


def hota(pred: TrackFile, gt: GroundTruth) -> HotaResult:
    return _hota_result(hota_stats(pred, gt))


def _hota_result(s: HotaStats) -> HotaResult:
    curve = [(float(a), float(h), float(d), float(x))
             for a, h, d, x in zip(ALPHAS, s.hota_curve, s.det_a_curve, s.ass_a_curve)]
    return HotaResult(s.hota, s.det_a, s.ass_a, curve)


# -- reports -----------------------------------------------------------------

def equivalent_fps(fps: float, n: int) -> float:
    """Throughput credited for keeping accuracy at every ``n``-th frame."""
    if n < 1:
        raise ValueError("downsampling interval must be >= 1")
    return fps * n


@dataclass
class MetricReport:
    mota: float
    idf1: float
    hota: float
    det_a: float
    ass_a: float
    fp: int
    fn: int
    idsw: int
    num_gt: int
    hota_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        keys = ("hota", "det_a", "ass_a", "idf1", "mota", "fp", "fn", "idsw", "num_gt")
        return "\n".join(f"{k} = {getattr(self, k)}" for k in keys) + "\n"


def evaluate(pairs: Iterable[tuple[TrackFile, GroundTruth]], iou_thresh: float = 0.5) -> MetricReport:
    """Dataset-level report from ``(prediction, ground truth)`` pairs."""
    clear, ident, hs = ClearStats(), IdentityStats(), HotaStats()
    for pred, gt in pairs:
        clear = clear + clear_metrics(pred, gt, iou_thresh)
        ident = ident + identity_stats(pred, gt, iou_thresh)
        hs = hs + hota_stats(pred, gt)
    h = _hota_result(hs)
    return MetricReport(clear.mota, ident.idf1, h.hota, h.det_a, h.ass_a,
                        clear.fp, clear.fn, clear.idsw, clear.num_gt, h.curve)
