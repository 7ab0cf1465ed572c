"""Independent reference implementations used only by the tests.

Each oracle takes the most direct route to its definition: rasterized
pixel counts, exhaustive enumeration, or explicit loops. None of them share
code with the package beyond plain data types.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch

GRID = 10000


def _cells(lo: float, hi: float, n: int = GRID) -> np.ndarray:
    centers = (np.arange(n) + 0.5) / n
    return (centers >= lo) & (centers < hi)


def raster_iou_giou(a, b, n: int = GRID) -> tuple[float, float]:
    """IoU and GIoU by counting cells of an ``n x n`` grid whose centers fall inside each box.

    Boxes are ``(cx, cy, w, h)``. Axis-aligned boxes are products of
    intervals, so each 2-D count is the product of two 1-D counts.
    """
    def span(box, axis):
        c, s = box[axis], box[axis + 2]
        return c - s / 2, c + s / 2

    xa, ya = _cells(*span(a, 0), n), _cells(*span(a, 1), n)
    xb, yb = _cells(*span(b, 0), n), _cells(*span(b, 1), n)
    area_a = xa.sum() * ya.sum()
    area_b = xb.sum() * yb.sum()
    inter = (xa & xb).sum() * (ya & yb).sum()
    union = area_a + area_b - inter

    def hull(ma, mb):
        idx = np.flatnonzero(ma | mb)
        return idx[-1] - idx[0] + 1

    hull_area = hull(xa, xb) * hull(ya, yb)
    iou = inter / union
    return float(iou), float(iou - (hull_area - union) / hull_area)


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Minimum total cost over all assignments of size ``min(R, C)``."""
    cost = np.asarray(cost, dtype=float)
    r, c = cost.shape
    if min(r, c) == 0:
        return 0.0
    best = math.inf
    if r <= c:
        for cols in itertools.permutations(range(c), r):
            best = min(best, sum(cost[i, cols[i]] for i in range(r)))
    else:
        for rows in itertools.permutations(range(r), c):
            best = min(best, sum(cost[rows[j], j] for j in range(c)))
    return float(best)


def masked_attention(q, k, v, allow):
    """Single-head attention with blocked pairs removed before normalization, written as loops."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    out = np.zeros((len(q), v.shape[1]))
    for i in range(len(q)):
        cols = [j for j in range(len(k)) if allow[i][j]]
        s = np.array([q[i] @ k[j] for j in cols]) / math.sqrt(q.shape[1])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(wj * v[j] for wj, j in zip(w, cols))
    return out


def layer_norm(x: torch.Tensor, ln: torch.nn.LayerNorm) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias


# -- tracking metrics ----------------------------------------------------------

def _iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def idf1_oracle(gt: list[dict], pred: list[dict], thresh: float = 0.5) -> float:
    """``gt[t]`` and ``pred[t]`` map id -> box. Tries every partial bijection of trajectories."""
    g_ids = sorted({i for f in gt for i in f})
    p_ids = sorted({i for f in pred for i in f})
    n_gt = sum(len(f) for f in gt)
    n_pr = sum(len(f) for f in pred)

    def overlap(g, p):
        return sum(1 for fg, fp in zip(gt, pred) if g in fg and p in fp and _iou(fg[g], fp[p]) >= thresh)

    best = 0
    for k in range(min(len(g_ids), len(p_ids)) + 1):
        for gs in itertools.combinations(g_ids, k):
            for ps in itertools.permutations(p_ids, k):
                best = max(best, sum(overlap(g, p) for g, p in zip(gs, ps)))
    return 2 * best / max(1, n_gt + n_pr)


def _frame_matchings(g_list, p_list):
    """Every partial one-to-one matching between two id lists."""
    for k in range(min(len(g_list), len(p_list)) + 1):
        for gs in itertools.combinations(g_list, k):
            for ps in itertools.permutations(p_list, k):
                yield list(zip(gs, ps))


def hota_oracle(gt: list[dict], pred: list[dict]) -> tuple[float, float, float]:
    """HOTA, DetA and AssA straight from the definitions.

    Per frame, the matching maximizes the sum of IoU times the pair's global
    alignment score, found by enumerating all matchings. Association
    accuracy is evaluated per true positive by counting frames.
    """
    alphas = [round(0.05 * k, 2) for k in range(1, 20)]
    g_count, p_count, soft = {}, {}, {}
    for fg, fp in zip(gt, pred):
        for g in fg:
            g_count[g] = g_count.get(g, 0) + 1
        for p in fp:
            p_count[p] = p_count.get(p, 0) + 1
        for g in fg:
            for p in fp:
                s = _iou(fg[g], fp[p])
                row = sum(_iou(fg[g], fp[q]) for q in fp)
                col = sum(_iou(fg[h], fp[p]) for h in fg)
                denom = row + col - s
                soft[g, p] = soft.get((g, p), 0.0) + (s / denom if denom > 0 else 0.0)
    align = {(g, p): v / (g_count[g] + p_count[p] - v) for (g, p), v in soft.items()}

    chosen = []
    for fg, fp in zip(gt, pred):
        best, best_m = -1.0, []
        for m in _frame_matchings(sorted(fg), sorted(fp)):
            score = sum(align[g, p] * _iou(fg[g], fp[p]) for g, p in m)
            if score > best + 1e-12:
                best, best_m = score, m
        chosen.append([(g, p) for g, p in best_m if align[g, p] * _iou(fg[g], fp[p]) > 0])

    hs, ds, as_ = [], [], []
    n_gt = sum(len(f) for f in gt)
    n_pr = sum(len(f) for f in pred)
    for alpha in alphas:
        tps = [(t, g, p) for t, m in enumerate(chosen) for g, p in m
               if _iou(gt[t][g], pred[t][p]) >= alpha - 1e-15]
        n_tp = len(tps)
        det = n_tp / max(1, n_tp + (n_gt - n_tp) + (n_pr - n_tp))
        scores = []
        for _, g, p in tps:
            tpa = sum(1 for _, g2, p2 in tps if g2 == g and p2 == p)
            fna = g_count[g] - tpa
            fpa = p_count[p] - tpa
            scores.append(tpa / (tpa + fna + fpa))
        ass = sum(scores) / max(1, n_tp)
        hs.append(math.sqrt(det * ass))
        ds.append(det)
        as_.append(ass)
    return float(np.mean(hs)), float(np.mean(ds)), float(np.mean(as_))
