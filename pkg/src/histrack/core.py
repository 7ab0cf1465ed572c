"""Shared domain types and box geometry.

Boxes live in normalized center format ``(cx, cy, w, h)``; corner format
``(x1, y1, x2, y2)`` is derived on demand. Class index 0 is background in
every probability vector.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        """Top-left corner plus size in pixel units."""
        x1, y1, _, _ = self.corners()
        return (x1 * width, y1 * height, self.w * width, self.h * height)

    @classmethod
    def from_pixels(cls, x, y, w, h, width: int, height: int) -> "BoundingBox":
        return cls((x + w / 2.0) / width, (y + h / 2.0) / height, w / width, h / height)


def _intersection_union_hull(a: BoundingBox, b: BoundingBox):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from corners so that identical boxes give inter == union exactly
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, _ = _intersection_union_hull(a, b)
    return inter / union


def generalized_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, hull = _intersection_union_hull(a, b)
    return inter / union - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` arrays of center-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1 = a[:, None, :2] - a[:, None, 2:] / 2
    a2 = a[:, None, :2] + a[:, None, 2:] / 2
    b1 = b[None, :, :2] - b[None, :, 2:] / 2
    b2 = b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a2, b2) - np.maximum(a1, b1), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(a2 - a1, axis=-1)
    area_b = np.prod(b2 - b1, axis=-1)
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class Prediction:
    """One query's output: class distribution (index 0 = background) and box."""

    class_probs: np.ndarray
    box: BoundingBox

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError("class_probs must be a vector over background + C classes")
        if abs(probs.sum() - 1.0) > 1e-6 or (probs < 0).any():
            raise ValueError(f"class_probs must be a distribution, sums to {probs.sum()}")
        object.__setattr__(self, "class_probs", probs)

    @property
    def score(self) -> float:
        return float(self.class_probs[1:].max())

    @property
    def label(self) -> int:
        """Most likely non-background class (1-based)."""
        return int(np.argmax(self.class_probs[1:])) + 1


@dataclass(frozen=True)
class AnnotationEntry:
    track_id: int
    class_id: int
    box: BoundingBox
    visible: bool = True


@dataclass
class FrameAnnotations:
    frame_index: int
    entries: list[AnnotationEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        ids = [e.track_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate track ids in frame {self.frame_index}: {ids}")

    @property
    def track_ids(self) -> list[int]:
        return [e.track_id for e in self.entries]

    def boxes(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 4))
        return np.stack([e.box.as_array() for e in self.entries])

    def by_id(self) -> dict[int, AnnotationEntry]:
        return {e.track_id: e for e in self.entries}


@dataclass(frozen=True)
class Config:
    """Model, memory and loss hyperparameters.

    Defaults are desk-scale; the original large-scale setting used
    ``n_det=300, d_head=8, sigma=0.6, n_keep=5, n_max=3`` with six decoders.
    ``num_irms=None`` means one refinement module before every decoder but
    the first.
    """

    feature_dim: int = 64
    n_det: int = 20
    d_head: int = 8
    sigma: float = 0.6
    n_keep: int = 5
    n_max: int = 3
    num_decoders: int = 3
    num_irms: Optional[int] = None
    clip_length: int = 4
    num_classes: int = 1
    image_size: int = 64
    downsample: int = 8
    ffn_dim: int = 128
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    eos_coef: float = 0.1
    class_loss: str = "ce"
    focal_gamma: float = 2.0
    lambda_enc: float = 1.0

    def __post_init__(self):
        if self.feature_dim % self.d_head:
            raise ValueError(f"feature_dim={self.feature_dim} not divisible by d_head={self.d_head}")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0.0 < self.sigma < 1.0:
            raise ValueError("sigma must lie in (0, 1)")
        if self.num_decoders < 1:
            raise ValueError("num_decoders must be >= 1")
        if not 0 <= self.irm_count <= self.num_decoders:
            raise ValueError(f"num_irms must be within [0, num_decoders], got {self.num_irms}")
        if self.n_keep < 0 or self.n_det < 1 or self.num_classes < 1:
            raise ValueError("n_keep >= 0, n_det >= 1 and num_classes >= 1 required")
        if self.image_size % self.downsample:
            raise ValueError("image_size must be a multiple of downsample")
        if self.class_loss not in ("ce", "focal"):
            raise ValueError(f"unknown class_loss {self.class_loss!r}")
        if self.n_det > self.num_tokens:
            raise ValueError("n_det cannot exceed the number of encoder tokens")

    @property
    def irm_count(self) -> int:
        return self.num_decoders - 1 if self.num_irms is None else self.num_irms

    @property
    def irm_positions(self) -> tuple[int, ...]:
        """Decoder indices preceded by a refinement module (shallowest removed first)."""
        return tuple(range(self.num_decoders - self.irm_count, self.num_decoders))

    @property
    def grid(self) -> int:
        return self.image_size // self.downsample

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def boxes_from_array(arr: np.ndarray) -> list[BoundingBox]:
    return [BoundingBox.from_array(row) for row in np.asarray(arr).reshape(-1, 4)]


def stack_boxes(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])
