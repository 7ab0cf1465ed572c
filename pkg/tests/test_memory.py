import numpy as np
import pytest
from hypothesis import given, strategies as st

from histrack.core import BoundingBox, Config, Prediction
from histrack.memory import (ACTIVE, LOST, TrackMemory, TrackRecord, append_feature, build_query_batch, new_track,
                             update_tracks)

BOX = BoundingBox(0.5, 0.5, 0.2, 0.2)
CFG = Config(sigma=0.6, n_keep=5, n_max=3)


def pred(score, box=BOX):
    return Prediction(np.array([1 - score, score]), box)


def feat(v, d=4):
    return np.full(d, float(v))


def bank_frames(rec):
    return [f for f, _ in rec.feature_bank]


def test_append_to_empty_bank():
    rec = append_feature(TrackRecord(1, [], BOX), feat(7), 7, 3)
    assert bank_frames(rec) == [7]


def test_full_bank_evicts_oldest():
    rec = new_track(1, feat(1), 1, BOX)
    for t in (2, 3):
        rec = append_feature(rec, feat(t), t, 3)
    rec = append_feature(rec, feat(4), 4, 3)
    assert bank_frames(rec) == [4, 3, 2]


def test_eviction_with_two_slots():
    rec = new_track(1, feat(1), 1, BOX)
    for t in (2, 3, 4):
        rec = append_feature(rec, feat(t), t, 2)
    assert bank_frames(rec) == [4, 3]
    assert rec.feature_bank[0][1][0] == 4.0


def test_append_rejects_bad_dimension_and_order():
    rec = new_track(1, feat(1), 5, BOX)
    with pytest.raises(ValueError):
        append_feature(rec, feat(2, d=5), 6, 3)
    with pytest.raises(ValueError):
        append_feature(rec, feat(2), 5, 3)


def test_query_batch_single_track():
    rec = new_track(1, feat(1), 1, BOX)
    for t in (2, 3):
        rec = append_feature(rec, feat(t), t, 3)
    det_anchors = np.array([[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1]])
    qb = build_query_batch([rec], np.zeros((2, 4)), det_anchors, frame_index=4)
    assert len(qb) == 5 and qb.n_tracking == 3
    assert np.all(qb.anchors[:3] == BOX.as_array())
    assert qb.is_latest.tolist() == [True, False, False, True, True]
    assert qb.content[0, 0] == 3.0 and qb.content[2, 0] == 1.0
    assert qb.age[:3].tolist() == [1, 2, 3]


def test_query_batch_without_tracks():
    qb = build_query_batch([], np.zeros((4, 4)), np.full((4, 4), 0.3))
    assert len(qb) == 4 and qb.n_tracking == 0
    assert qb.is_latest.all()


def test_query_batch_two_tracks_group_layout():
    a = append_feature(new_track(10, feat(1), 1, BOX), feat(2), 2, 3)
    b = new_track(20, feat(5), 2, BOX)
    qb = build_query_batch([a, b], np.zeros((3, 4)), np.full((3, 4), 0.3))
    assert qb.group_id[:3].tolist() == [10, 10, 20]
    det_groups = qb.group_id[3:].tolist()
    assert len(set(det_groups)) == 3 and all(g < 0 for g in det_groups)
    assert qb.is_latest[:3].sum() == 2
    assert qb.rows_per_track() == {10: 2, 20: 1}


def test_query_batch_permutation_equivariance():
    tracks = [append_feature(new_track(i, feat(i), 1, BoundingBox(0.1 * i, 0.5, 0.1, 0.1)), feat(i + 0.5), 2, 3)
              for i in (1, 2, 3)]
    det = np.zeros((2, 4)), np.full((2, 4), 0.3)
    qb = build_query_batch(tracks, *det)
    perm = [2, 0, 1]
    qp = build_query_batch([tracks[i] for i in perm], *det)
    rows = np.concatenate([qb.rows_of(tracks[i].track_id) for i in perm] + [np.arange(6, 8)])
    assert np.array_equal(qp.content, qb.content[rows])
    assert np.array_equal(qp.anchors, qb.anchors[rows])
    assert np.array_equal(qp.group_id, qb.group_id[rows])


def test_confirmed_track_grows_bank():
    rec = new_track(1, feat(0), 0, BOX)
    res, _ = update_tracks([rec], {1: (pred(0.7), feat(1))}, [], 1, CFG, 2)
    assert res.tracks[0].state == ACTIVE and bank_frames(res.tracks[0]) == [1, 0]
    assert res.confirmed == [1]


def test_lost_track_removed_after_patience():
    rec = new_track(1, feat(0), 0, BOX)
    rec = TrackRecord(1, rec.feature_bank, BOX, LOST, CFG.n_keep)
    res, _ = update_tracks([rec], {1: (pred(0.3), feat(1))}, [], 9, CFG, 2)
    assert res.tracks == [] and res.died == [1]


def test_gap_then_reactivation():
    mem = TrackMemory(CFG)
    mem.update({}, [(pred(0.9), feat(0))], 0)
    tid = mem.tracks[0].track_id
    anchors = []
    for t, score in enumerate([0.7, 0.3, 0.3, 0.7], start=1):
        box = BoundingBox(0.5 + 0.01 * t, 0.5, 0.2, 0.2)
        mem.update({tid: (pred(score, box), feat(t))}, [], t)
        rec = mem.tracks[0]
        anchors.append(rec.latest_anchor.cx)
        rec.check(CFG)
    rec = mem.tracks[0]
    assert rec.state == ACTIVE and rec.lost_age == 0
    assert bank_frames(rec) == [4, 1, 0]
    # anchor frozen while lost
    assert anchors[1] == anchors[2] == anchors[0]


def test_births_need_threshold_and_ids_are_fresh():
    mem = TrackMemory(CFG)
    res = mem.update({}, [(pred(0.9), feat(0)), (pred(0.5), feat(0)), (pred(0.61), feat(0))], 0)
    assert res.born == [1, 2]
    mem.update({1: (pred(0.1), feat(1)), 2: (pred(0.9), feat(1))}, [(pred(0.8), feat(1))], 1)
    assert [t.track_id for t in mem.tracks] == [1, 2, 3]


def test_duplicate_ids_rejected():
    rec = new_track(1, feat(0), 0, BOX)
    with pytest.raises(ValueError):
        update_tracks([rec, rec], {1: (pred(0.7), feat(1))}, [], 1, CFG, 2)
    with pytest.raises(ValueError):
        update_tracks([rec], {}, [], 1, CFG, 2)


@given(st.lists(st.lists(st.floats(0, 1), min_size=0, max_size=4), min_size=1, max_size=25),
       st.integers(1, 4), st.integers(0, 3))
def test_lifecycle_invariants(score_rows, n_max, n_keep):
    """Random score streams never break bank bounds, id uniqueness or the lost-bank freeze."""
    cfg = Config(n_max=n_max, n_keep=n_keep)
    mem = TrackMemory(cfg)
    seen_dead = set()
    for t, scores in enumerate(score_rows):
        before = {tr.track_id: len(tr.feature_bank) for tr in mem.tracks}
        outputs = {tr.track_id: (pred(scores[k % len(scores)] if scores else 0.0), feat(t))
                   for k, tr in enumerate(mem.tracks)}
        res = mem.update(outputs, [(pred(s), feat(t)) for s in scores], t)
        ids = [tr.track_id for tr in mem.tracks]
        assert len(ids) == len(set(ids))
        assert not set(res.born) & (set(before) | seen_dead)
        seen_dead |= set(res.died)
        for tr in mem.tracks:
            tr.check(cfg)
            if tr.state == LOST:
                assert len(tr.feature_bank) == before[tr.track_id]
