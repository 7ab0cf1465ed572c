"""Frame-by-frame inference and the MOTChallenge-style track file.

Only the latest-feature row of each track reports the track's box and score;
the other rows of the track only feed information to it through the
refinement modules and are discarded afterwards. No NMS is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .core import BoundingBox, Config
from .memory import TrackMemory
from .model import TrackerModel
from .synthgen import parse_mot_rows


@dataclass(frozen=True)
class TrackRow:
    frame: int
    track_id: int
    box: BoundingBox
    score: float
    class_id: int = 1


@dataclass
class TrackFile:
    rows: list[TrackRow] = field(default_factory=list)
    width: int = 64
    height: int = 64

    def __len__(self):
        return len(self.rows)

    def frames(self) -> dict[int, list[TrackRow]]:
        out: dict[int, list[TrackRow]] = {}
        for r in self.rows:
            out.setdefault(r.frame, []).append(r)
        return out

    def ids(self) -> list[int]:
        return sorted({r.track_id for r in self.rows})

    def validate(self) -> None:
        seen = set()
        last = -1
        for r in self.rows:
            if (r.frame, r.track_id) in seen:
                raise AssertionError(f"duplicate row for track {r.track_id} in frame {r.frame}")
            if r.frame < last:
                raise AssertionError("frame indices must be non-decreasing")
            seen.add((r.frame, r.track_id))
            last = r.frame

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            x, y, w, h = r.box.to_pixels(self.width, self.height)
            lines.append(f"{r.frame + 1},{r.track_id},{x:.2f},{y:.2f},{w:.2f},{h:.2f},"
                         f"{r.score:.2f},{r.class_id},-1")
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, width: int, height: int, source="<text>") -> "TrackFile":
        rows = [TrackRow(f - 1, tid, BoundingBox.from_pixels(x, y, w, h, width, height), conf, cls_)
                for f, tid, x, y, w, h, conf, cls_, _ in parse_mot_rows(text, source)]
        rows.sort(key=lambda r: (r.frame, r.track_id))
        return cls(rows, width, height)

    @classmethod
    def read(cls, path, width: int, height: int) -> "TrackFile":
        return cls.from_text(Path(path).read_text(), width, height, str(path))


@dataclass
class StepTrace:
    """Per-frame bookkeeping exposed for inspection and tests."""

    input_rows: dict[int, int]
    emitted: list[int]
    born: list[int]
    died: list[int]


@dataclass
class TrackerState:
    model: TrackerModel
    memory: TrackMemory
    trace: Optional[StepTrace] = None

    @property
    def config(self) -> Config:
        return self.memory.config


def init_state(model: TrackerModel, config: Optional[Config] = None) -> TrackerState:
    """Fresh per-video state; ``config`` may override inference-only fields."""
    return TrackerState(model, TrackMemory(config or model.config))


@torch.no_grad()
def step(state: TrackerState, image, frame_index: int) -> tuple[TrackerState, list[TrackRow]]:
    model, memory, cfg = state.model, state.memory, state.config
    dtype = model.query_content.dtype
    frame = model.encode_frame(image)
    batch = memory.query_batch(frame.proposal_content.numpy(),
                               frame.proposal_anchors.numpy(), frame_index)
    content = torch.as_tensor(batch.content, dtype=dtype)
    anchors = torch.as_tensor(batch.anchors, dtype=dtype)
    outputs = model.forward_frame(content, anchors, batch.group_id, batch.n_tracking, frame)
    final = outputs[-1]
    feats = final.content.numpy()

    latest = {tid: batch.latest_row(tid) for tid in batch.track_ids}
    det_rows = list(range(batch.n_tracking, len(batch)))
    wanted = list(latest.values()) + det_rows
    preds = dict(zip(wanted, final.predictions(wanted)))
    frame_outputs = {tid: (preds[r], feats[r].copy()) for tid, r in latest.items()}
    new_dets = [(preds[r], feats[r].copy()) for r in det_rows]
    result = memory.update(frame_outputs, new_dets, frame_index)

    by_id = {t.track_id: t for t in memory.tracks}
    scores = {tid: frame_outputs[tid][0].score for tid in result.confirmed}
    # births are issued in detection-row order among rows passing the threshold
    scores.update(zip(result.born, [p.score for p, _ in new_dets if p.score >= cfg.sigma]))
    rows = [TrackRow(frame_index, tid, by_id[tid].latest_anchor, float(scores[tid]), by_id[tid].class_id)
            for tid in sorted(scores)]
    state.trace = StepTrace(batch.rows_per_track(), [r.track_id for r in rows],
                            result.born, result.died)
    return state, rows


def run(model: TrackerModel, frames: Sequence, config: Optional[Config] = None,
        traces: Optional[list] = None) -> TrackFile:
    """Track a whole video; ``traces`` (if given) receives one :class:`StepTrace` per frame."""
    if len(frames) == 0:
        raise ValueError("cannot track an empty video")
    state = init_state(model, config)
    rows: list[TrackRow] = []
    for t, image in enumerate(frames):
        state, out = step(state, image, t)
        rows.extend(out)
        if traces is not None:
            traces.append(state.trace)
    height, width = np.asarray(frames[0]).shape[:2]
    return TrackFile(rows, width, height)
