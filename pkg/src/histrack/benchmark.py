"""Frame-rate benchmark: seeded training, evaluation at several downsampling
intervals, and comparison tables across checkpoints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .core import Config
from .metrics import MetricReport, equivalent_fps, evaluate
from .model import TrackerModel
from .synthgen import Dataset, VideoItem, downsample
from .tracker import TrackFile, run
from .training import TrainConfig, train

# config fields that only change inference, so they may differ from the checkpoint's
INFERENCE_FIELDS = ("sigma", "n_keep", "n_max")


def build_model(config: Config, seed: int) -> TrackerModel:
    """Initialize a model from ``seed`` without disturbing the global torch RNG.

    Parameter shapes do not depend on ``n_max``, so two configs that differ
    only there start from identical weights.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TrackerModel(config)


def train_model(config: Config, train_config: TrainConfig, dataset: Dataset,
                callback: Optional[Callable[[dict], None]] = None) -> tuple[TrackerModel, list[dict]]:
    model = build_model(config, train_config.seed)
    history = train(model, dataset, train_config, callback)
    return model, history


def inference_config(model: TrackerModel, **overrides) -> Config:
    bad = set(overrides) - set(INFERENCE_FIELDS)
    if bad:
        raise ValueError(f"only {INFERENCE_FIELDS} may be overridden at inference, got {sorted(bad)}")
    return model.config.replace(**overrides)


def track_videos(model: TrackerModel, videos: Sequence[VideoItem], n: int = 1,
                 config: Optional[Config] = None) -> tuple[list[tuple[TrackFile, VideoItem]], float]:
    """Track every video downsampled by ``n``; returns ``(pred, gt)`` pairs and frames per second."""
    pairs = []
    frames = 0
    start = time.perf_counter()
    for item in videos:
        d = downsample(item, n)
        pairs.append((run(model, d.frames, config), d))
        frames += len(d)
    elapsed = time.perf_counter() - start
    return pairs, frames / max(elapsed, 1e-9)


@dataclass
class SweepRow:
    label: str
    n: int
    n_max: int
    report: MetricReport
    fps: float

    @property
    def equivalent_fps(self) -> float:
        return equivalent_fps(self.fps, self.n)

    def as_dict(self) -> dict:
        out = {"label": self.label, "n": self.n, "n_max": self.n_max}
        out.update({k: v for k, v in self.report.to_dict().items() if k != "hota_curve"})
        return out


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)

    columns = ("label", "n", "n_max", "hota", "idf1", "mota", "det_a", "ass_a", "fp", "fn", "idsw")

    def lookup(self, label: str, n: int, n_max: Optional[int] = None) -> SweepRow:
        for r in self.rows:
            if r.label == label and r.n == n and (n_max is None or r.n_max == n_max):
                return r
        raise KeyError((label, n, n_max))

    def to_text(self) -> str:
        """Fixed-width table; timing is left out so the text is reproducible."""
        lines = ["  ".join(f"{c:>10}" for c in self.columns)]
        for r in self.rows:
            d = r.as_dict()
            cells = []
            for c in self.columns:
                v = d[c]
                cells.append(f"{v:>10.4f}" if isinstance(v, float) else f"{v!s:>10}")
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        return [r.as_dict() for r in self.rows]


def sweep(models: Mapping[str, TrackerModel], videos: Sequence[VideoItem], n_values: Sequence[int],
          n_max_values: Optional[Sequence[int]] = None) -> SweepTable:
    """Evaluate each model at every interval in ``n_values``.

    ``n_max_values`` overrides the bank size at inference; by default each
    model runs with the ``n_max`` it was trained with.
    """
    table = SweepTable()
    for label, model in models.items():
        for n_max in (n_max_values or [model.config.n_max]):
            cfg = inference_config(model, n_max=int(n_max))
            for n in n_values:
                pairs, fps = track_videos(model, videos, int(n), cfg)
                table.rows.append(SweepRow(label, int(n), int(n_max), evaluate(pairs), fps))
    return table


def trend_margins(table: SweepTable, better: str, worse: str, n_values: Sequence[int],
                  metric: str = "idf1") -> dict[int, float]:
    """``metric(better) - metric(worse)`` at each interval."""
    return {n: getattr(table.lookup(better, n).report, metric) - getattr(table.lookup(worse, n).report, metric)
            for n in n_values}
