import math

import numpy as np
import pytest
import torch

from histrack.assignment import Assignment
from histrack.core import Config
from histrack.losses import LossBreakdown, bipartite_loss, clip_loss, paired_giou, toc_loss

CFG = Config()


def logp(*rows):
    return torch.log(torch.tensor(rows, dtype=torch.float64))


def box(*v):
    return torch.tensor([v], dtype=torch.float64)


def test_unmatched_prediction_half_background():
    cls, l1, giou = bipartite_loss(logp([0.5, 0.5]), box(0.5, 0.5, 0.2, 0.2), np.zeros((0, 4)), [],
                                   Assignment([], [0], []), CFG)
    assert float(cls) == pytest.approx(math.log(2), abs=1e-12)
    assert float(cls) == pytest.approx(0.6931, abs=1e-4)
    assert float(l1) == 0 and float(giou) == 0


def test_matched_offset_l1():
    a = Assignment([(0, 0)])
    _, l1, _ = bipartite_loss(logp([0.0, 1.0]), box(0.6, 0.5, 0.2, 0.2), [[0.5, 0.5, 0.2, 0.2]], [1], a, CFG)
    assert float(l1) == pytest.approx(0.1, abs=1e-12)
    b = LossBreakdown(torch.tensor(0.0), l1, torch.tensor(0.0), torch.tensor(0.0), 0,
                      (CFG.lambda_cls, CFG.lambda_l1, CFG.lambda_giou))
    assert float(b.bip) == pytest.approx(0.1 * CFG.lambda_l1, abs=1e-12)


def test_perfect_predictions_cost_nothing():
    gt = [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]]
    lp = logp([0.0, 1.0], [1.0, 0.0], [0.0, 1.0])
    boxes = torch.tensor([gt[1], [0.1, 0.1, 0.1, 0.1], gt[0]], dtype=torch.float64)
    parts = bipartite_loss(lp, boxes, gt, [1, 1], Assignment([(0, 1), (2, 0)], [1], []), CFG)
    assert all(abs(float(p)) < 1e-12 for p in parts)
    num, count = toc_loss(lp[[0]], boxes[[0]], [1], gt, [1, 1], CFG)
    assert abs(float(num)) < 1e-12 and count == 1


def test_empty_everything_is_zero():
    parts = bipartite_loss(torch.zeros(0, 2, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64),
                           np.zeros((0, 4)), [], Assignment([]), CFG)
    assert all(float(p) == 0 for p in parts)


def test_toc_without_history():
    num, count = toc_loss(torch.zeros(0, 2, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64),
                          [], np.zeros((0, 4)), [], CFG)
    assert float(num) == 0 and count == 0


def test_toc_unmatched_track_rows():
    p0 = math.exp(-1)
    num, count = toc_loss(logp([p0, 1 - p0], [p0, 1 - p0]), torch.full((2, 4), 0.3, dtype=torch.float64),
                          [-1, -1], [[0.5, 0.5, 0.2, 0.2]], [1], CFG)
    assert float(num) == pytest.approx(2.0, abs=1e-12) and count == 0


def test_toc_matched_row_pays_class_and_box():
    num, count = toc_loss(logp([0.5, 0.5]), box(0.6, 0.5, 0.2, 0.2), [0], [[0.5, 0.5, 0.2, 0.2]], [1], CFG)
    giou = float(paired_giou(box(0.6, 0.5, 0.2, 0.2), box(0.5, 0.5, 0.2, 0.2))[0])
    expected = math.log(2) + CFG.lambda_l1 * 0.1 + CFG.lambda_giou * (1 - giou)
    assert float(num) == pytest.approx(expected, abs=1e-12) and count == 1


def breakdown(bip, toc, n_his):
    z = torch.tensor(0.0, dtype=torch.float64)
    return LossBreakdown(torch.tensor(bip, dtype=torch.float64), z, z, torch.tensor(toc, dtype=torch.float64),
                         n_his, (1.0, 1.0, 1.0))


def test_clip_toc_uses_shared_denominator():
    clip = [[breakdown(0.0, 1.0, 2)], [breakdown(0.0, 3.0, 1)]]
    assert float(clip_loss(clip)) == pytest.approx(4 / 3, abs=1e-12)
    assert round(float(clip_loss(clip)), 3) == 1.333


def test_clip_single_frame_and_no_history():
    assert float(clip_loss([[breakdown(2.0, 1.5, 3)]])) == pytest.approx(2.5)
    assert float(clip_loss([[breakdown(2.0, 0.0, 0)], [breakdown(1.0, 0.0, 0)]])) == 3.0


def test_clip_sums_layers_separately():
    clip = [[breakdown(0.0, 2.0, 2), breakdown(0.0, 1.0, 0)], [breakdown(0.0, 0.0, 0), breakdown(0.0, 3.0, 3)]]
    assert float(clip_loss(clip)) == pytest.approx(2 / 2 + 4 / 3)


def test_clip_rejects_empty():
    with pytest.raises(ValueError):
        clip_loss([])


def test_focal_variant_downweights_easy_rows():
    focal = CFG.replace(class_loss="focal")
    easy = logp([0.9, 0.1])
    ce, _, _ = bipartite_loss(easy, box(0.5, 0.5, 0.1, 0.1), np.zeros((0, 4)), [], Assignment([], [0]), CFG)
    fl, _, _ = bipartite_loss(easy, box(0.5, 0.5, 0.1, 0.1), np.zeros((0, 4)), [], Assignment([], [0]), focal)
    assert float(fl) == pytest.approx(0.1 ** focal.focal_gamma * float(ce), abs=1e-12)
