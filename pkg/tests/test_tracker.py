import numpy as np
import pytest
import torch

from conftest import TINY, tiny_model
from histrack.core import BoundingBox
from histrack.synthgen import SceneSpec, downsample, generate
from histrack.tracker import TrackFile, TrackRow, init_state, run, step

SPEC = SceneSpec(image_size=16, min_size=3.0, max_size=5.0, min_speed=0.5, max_speed=1.5,
                 max_objects=3, length=9)


def video(seed=0):
    return generate(SPEC.replace(seed=seed))


def force_scores(model, p_object):
    """Make every query report the same object probability."""
    with torch.no_grad():
        model.class_head.weight.zero_()
        logit = float(np.log(p_object / (1 - p_object)))
        model.class_head.bias.copy_(torch.tensor([0.0, logit], dtype=model.class_head.bias.dtype))
    return model


def test_cold_start_births_one_id_per_firing_query():
    model = force_scores(tiny_model(), 0.9)
    state, rows = step(init_state(model), video().frames[0], 0)
    assert [r.track_id for r in rows] == list(range(1, TINY.n_det + 1))
    assert state.trace.born == [r.track_id for r in rows]


def test_nothing_fires_below_threshold():
    model = force_scores(tiny_model(), 0.1)
    assert len(run(model, video().frames)) == 0


def test_low_score_track_is_silent_but_retained():
    model = force_scores(tiny_model(n_det=1), 0.9)
    frames = video().frames
    state, rows = step(init_state(model), frames[0], 0)
    assert len(rows) == 1
    force_scores(model, 0.4)
    state, rows = step(state, frames[1], 1)
    assert rows == [] and len(state.memory) == 1
    assert state.trace.died == []


def test_steady_state_rows_per_track():
    model = force_scores(tiny_model(n_det=2, n_max=3), 0.9)
    traces = []
    out = run(model, video().frames[:5], traces=traces)
    out.validate()
    # tracks born at frame 0 feed 3 rows from frame 3 on, and emit one box each
    assert traces[3].input_rows[1] == 3 and traces[4].input_rows[2] == 3
    per_frame = out.frames()
    for t, rows in per_frame.items():
        ids = [r.track_id for r in rows]
        assert len(ids) == len(set(ids))
    assert [r.track_id for r in per_frame[4]].count(1) == 1


def test_bank_size_capped_by_limit():
    for n_max in (1, 2):
        model = force_scores(tiny_model(n_det=2, n_max=n_max), 0.9)
        traces = []
        run(model, video().frames, traces=traces)
        assert max(n for tr in traces for n in tr.input_rows.values()) == n_max


def test_single_frame_equals_detection_pass():
    model = tiny_model()
    force_scores(model, 0.7)
    with torch.no_grad():
        model.class_head.weight.normal_(0, 2.0)
    img = video(3).frames[0]
    out = run(model, [img])
    frame = model.encode_frame(img)
    with torch.no_grad():
        n = frame.proposal_content.shape[0]
        final = model.forward_frame(frame.proposal_content, frame.proposal_anchors, -1 - np.arange(n), 0,
                                    frame)[-1]
    preds = [p for p in final.predictions(list(range(n))) if p.score >= TINY.sigma]
    assert len(out) == len(preds) > 0
    for row, p in zip(out.rows, preds):
        assert np.allclose(row.box.as_array(), p.box.as_array(), atol=1e-12)
        assert row.score == pytest.approx(p.score)


def test_runs_are_deterministic():
    model = force_scores(tiny_model(), 0.8)
    v = video(1)
    assert run(model, v.frames).to_text() == run(model, v.frames).to_text()


def test_downsampled_frame_indices():
    model = force_scores(tiny_model(n_det=1), 0.9)
    v = downsample(video(2), 2)
    out = run(model, v.frames)
    assert sorted(out.frames()) == list(range(int(np.ceil(9 / 2))))


def test_ids_live_between_birth_and_death():
    model = tiny_model()
    force_scores(model, 0.6)
    with torch.no_grad():
        model.class_head.weight.normal_(0, 1.0)
    traces = []
    out = run(model, video(4).frames, traces=traces)
    born = {tid: t for t, tr in enumerate(traces) for tid in tr.born}
    died = {tid: t for t, tr in enumerate(traces) for tid in tr.died}
    for r in out.rows:
        assert born[r.track_id] <= r.frame
        assert r.track_id not in died or r.frame < died[r.track_id]
    assert sorted(born) == list(range(1, len(born) + 1))


def test_empty_video_and_bad_image_rejected():
    model = tiny_model()
    with pytest.raises(ValueError):
        run(model, [])
    with pytest.raises(ValueError):
        run(model, [np.zeros((8, 8, 3), np.uint8)])


def test_track_file_round_trip_within_half_pixel():
    rng = np.random.default_rng(0)
    rows = [TrackRow(t, k, BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2)), 0.9)
            for t in range(3) for k in (1, 2)]
    tf = TrackFile(rows, 64, 48)
    back = TrackFile.from_text(tf.to_text(), 64, 48)
    assert [(r.frame, r.track_id) for r in back.rows] == [(r.frame, r.track_id) for r in rows]
    for a, b in zip(rows, back.rows):
        assert np.abs(np.subtract(a.box.to_pixels(64, 48), b.box.to_pixels(64, 48))).max() <= 0.5


def test_duplicate_rows_detected():
    box = BoundingBox(0.5, 0.5, 0.1, 0.1)
    with pytest.raises(AssertionError):
        TrackFile([TrackRow(0, 1, box, 1.0), TrackRow(0, 1, box, 1.0)]).validate()
