"""Per-track feature banks and collaborative query construction.

Each live track keeps its last ``n_max`` output features (newest first) and
the box predicted in the most recent confirmed frame. Every frame, all of a
track's stored features are submitted as separate queries that share that
latest box as anchor; detection queries are appended after them.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import BoundingBox, Config, Prediction, stack_boxes

ACTIVE = "active"
LOST = "lost"


@dataclass
class TrackRecord:
    track_id: int
    feature_bank: list[tuple[int, np.ndarray]]
    latest_anchor: BoundingBox
    state: str = ACTIVE
    lost_age: int = 0
    class_id: int = 1

    @property
    def bank_size(self) -> int:
        return len(self.feature_bank)

    def check(self, config: Config) -> None:
        """Raise if the record violates its structural invariants."""
        if not 1 <= len(self.feature_bank) <= config.n_max:
            raise AssertionError(f"track {self.track_id}: bank size {len(self.feature_bank)}")
        frames = [f for f, _ in self.feature_bank]
        if any(a <= b for a, b in zip(frames, frames[1:])):
            raise AssertionError(f"track {self.track_id}: bank frames not decreasing {frames}")
        if self.lost_age > config.n_keep:
            raise AssertionError(f"track {self.track_id}: lost_age beyond patience")
        if (self.lost_age == 0) != (self.state == ACTIVE):
            raise AssertionError(f"track {self.track_id}: state {self.state} with lost_age {self.lost_age}")


def _as_feature(feature):
    # torch tensors pass through untouched so training keeps the graph
    return feature if isinstance(feature, torch.Tensor) else np.asarray(feature)


def _concat(parts):
    if any(isinstance(p, torch.Tensor) for p in parts):
        return torch.cat([torch.as_tensor(p) for p in parts])
    return np.concatenate(parts)


def new_track(track_id: int, feature, frame_index: int, box: BoundingBox,
              class_id: int = 1) -> TrackRecord:
    return TrackRecord(track_id, [(frame_index, _as_feature(feature))], box, ACTIVE, 0, class_id)


def append_feature(record: TrackRecord, feature, frame_index: int, n_max: int) -> TrackRecord:
    """Push ``feature`` to the front of the bank, evicting the oldest past ``n_max``."""
    feature = _as_feature(feature)
    if record.feature_bank:
        dim = record.feature_bank[0][1].shape
        if feature.shape != dim:
            raise ValueError(f"feature shape {feature.shape} != bank feature shape {dim}")
        if frame_index <= record.feature_bank[0][0]:
            raise ValueError("feature frames must strictly increase")
    bank = [(frame_index, feature)] + list(record.feature_bank)
    return dataclasses.replace(record, feature_bank=bank[:n_max])


DETECTION_GROUP_BASE = -1


@dataclass
class QueryBatch:
    """Tracking rows (grouped per track) followed by detection rows.

    Detection rows get distinct negative group ids so no two of them ever
    share a group with each other or with a track.
    """

    content: np.ndarray
    anchors: np.ndarray
    group_id: np.ndarray
    is_latest: np.ndarray
    age: np.ndarray
    n_tracking: int
    track_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.group_id)

    @property
    def is_tracking(self) -> np.ndarray:
        out = np.zeros(len(self), dtype=bool)
        out[: self.n_tracking] = True
        return out

    def latest_row(self, track_id: int) -> int:
        rows = np.flatnonzero((self.group_id == track_id) & self.is_latest & self.is_tracking)
        return int(rows[0])

    def rows_of(self, track_id: int) -> np.ndarray:
        return np.flatnonzero((self.group_id == track_id) & self.is_tracking)

    def rows_per_track(self) -> dict[int, int]:
        return {tid: int(((self.group_id == tid) & self.is_tracking).sum()) for tid in self.track_ids}


def build_query_batch(tracks: Sequence[TrackRecord], detection_content, detection_anchors,
                      frame_index: int | None = None) -> QueryBatch:
    """Expand each track into one row per stored feature, then append detections.

    Features may be numpy arrays or torch tensors; with tensors the content
    matrix is built with ``torch.cat`` so gradients flow into stored features.
    """
    rows, anchors, groups, latest, ages = [], [], [], [], []
    for tr in tracks:
        if not tr.feature_bank:
            raise ValueError(f"track {tr.track_id} has an empty feature bank")
        for k, (f_idx, feat) in enumerate(tr.feature_bank):
            rows.append(_as_feature(feat)[None])
            anchors.append(tr.latest_anchor.as_array())
            groups.append(tr.track_id)
            latest.append(k == 0)
            ages.append(0 if frame_index is None else frame_index - f_idx)
    n_tracking = len(rows)
    det_content = _as_feature(detection_content)
    det_anchors = np.asarray(detection_anchors, dtype=np.float64).reshape(-1, 4)
    n_det = len(det_anchors)
    content = _concat(rows + [det_content])
    return QueryBatch(
        content=content,
        anchors=np.concatenate([np.stack(anchors), det_anchors]) if anchors else det_anchors.copy(),
        group_id=np.array(groups + [DETECTION_GROUP_BASE - j for j in range(n_det)], dtype=np.int64),
        is_latest=np.array(latest + [True] * n_det, dtype=bool),
        age=np.array(ages + [0] * n_det, dtype=np.int64),
        n_tracking=n_tracking,
        track_ids=[tr.track_id for tr in tracks],
    )


@dataclass
class UpdateResult:
    tracks: list[TrackRecord]
    born: list[int]
    died: list[int]
    confirmed: list[int]


def update_tracks(tracks: Sequence[TrackRecord],
                  frame_outputs: Mapping[int, tuple[Prediction, np.ndarray]],
                  new_detections: Sequence[tuple[Prediction, np.ndarray]],
                  frame_index: int, config: Config, next_id: int) -> tuple[UpdateResult, int]:
    """Apply one frame of lifecycle decisions.

    ``frame_outputs`` maps every live track id to the prediction of its
    latest-feature row and that row's final content feature. Returns the
    update and the next unused track id.
    """
    ids = [t.track_id for t in tracks]
    if len(ids) != len(set(ids)):
        raise ValueError(f"duplicate track ids {ids}")
    missing = set(ids) - set(frame_outputs)
    if missing:
        raise ValueError(f"no output for tracks {sorted(missing)}")

    out, died, confirmed = [], [], []
    for tr in tracks:
        pred, feat = frame_outputs[tr.track_id]
        if pred.score >= config.sigma:
            tr = append_feature(tr, feat, frame_index, config.n_max)
            tr = dataclasses.replace(tr, latest_anchor=pred.box, state=ACTIVE, lost_age=0)
            confirmed.append(tr.track_id)
            out.append(tr)
            continue
        age = tr.lost_age + 1
        if age > config.n_keep:
            died.append(tr.track_id)
            continue
        out.append(dataclasses.replace(tr, state=LOST, lost_age=age))

    born = []
    for pred, feat in new_detections:
        if pred.score < config.sigma:
            continue
        out.append(new_track(next_id, feat, frame_index, pred.box, pred.label))
        born.append(next_id)
        next_id += 1
    return UpdateResult(out, born, died, confirmed), next_id


class TrackMemory:
    """Owns the live tracks of one video stream and the id counter."""

    def __init__(self, config: Config):
        self.config = config
        self.tracks: list[TrackRecord] = []
        self.next_id = 1

    def __len__(self):
        return len(self.tracks)

    def query_batch(self, detection_content, detection_anchors, frame_index=None) -> QueryBatch:
        return build_query_batch(self.tracks, detection_content, detection_anchors, frame_index)

    def update(self, frame_outputs, new_detections, frame_index) -> UpdateResult:
        result, self.next_id = update_tracks(self.tracks, frame_outputs, new_detections,
                                             frame_index, self.config, self.next_id)
        self.tracks = result.tracks
        return result

    def anchors(self) -> np.ndarray:
        return stack_boxes([t.latest_anchor for t in self.tracks])
