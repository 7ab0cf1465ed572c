"""Synthetic moving-object videos with ground truth, frame-rate downsampling,
dataset archives and MOTChallenge-layout ingestion.
"""
from __future__ import annotations

import colorsys
import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import AnnotationEntry, BoundingBox, FrameAnnotations


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 6
    min_speed: float = 1.0
    max_speed: float = 5.0
    turn_prob: float = 0.1
    shapes: tuple = ("rect", "ellipse")
    min_size: float = 6.0
    max_size: float = 14.0
    size_jitter: float = 0.05
    hue_jitter: float = 0.02
    late_entry_prob: float = 0.2
    early_exit_prob: float = 0.2
    boundary: str = "reflect"
    num_occluders: int = 0
    occluder_size: float = 14.0
    length: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8 or self.length < 1:
            raise ValueError("image_size >= 8 and length >= 1 required")
        for lo, hi, name in ((self.min_objects, self.max_objects, "objects"),
                             (self.min_speed, self.max_speed, "speed"),
                             (self.min_size, self.max_size, "size")):
            if lo > hi:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")
        if self.min_objects < 0 or self.min_speed < 0 or self.min_size <= 1:
            raise ValueError("object count, speed and size must be non-negative (size > 1 px)")
        if self.max_size * 2 >= self.image_size:
            raise ValueError("objects must fit comfortably inside the image")
        if not set(self.shapes) <= {"rect", "ellipse"} or not self.shapes:
            raise ValueError(f"unsupported shapes {self.shapes}")
        if self.boundary not in ("reflect", "exit"):
            raise ValueError(f"boundary must be 'reflect' or 'exit', got {self.boundary!r}")
        for p in (self.turn_prob, self.late_entry_prob, self.early_exit_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    def replace(self, **changes) -> "SceneSpec":
        return dataclasses.replace(self, **changes)


@dataclass
class VideoItem:
    frames: np.ndarray
    annotations: list[FrameAnnotations]
    source_indices: np.ndarray
    name: str = "video"

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> tuple[int, int]:
        """``(width, height)`` in pixels."""
        return self.frames.shape[2], self.frames.shape[1]


@dataclass
class Dataset:
    items: list[VideoItem]
    split: str = "train"

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


@dataclass
class _Object:
    pos: np.ndarray
    vel: np.ndarray
    size: np.ndarray
    hue: float
    shape: str
    birth: int
    death: int


def _spawn_objects(spec: SceneSpec, rng: np.random.Generator) -> list[_Object]:
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objs = []
    for _ in range(n):
        size = rng.uniform(spec.min_size, spec.max_size, size=2)
        lo, hi = size / 2, spec.image_size - size / 2
        pos = rng.uniform(lo, hi)
        speed = rng.uniform(spec.min_speed, spec.max_speed)
        angle = rng.uniform(0, 2 * np.pi)
        birth = 0
        if rng.random() < spec.late_entry_prob and spec.length > 2:
            birth = int(rng.integers(1, max(2, spec.length // 2)))
        death = spec.length
        if rng.random() < spec.early_exit_prob and spec.length - birth > 4:
            death = int(rng.integers(birth + max(2, (spec.length - birth) // 2), spec.length + 1))
        objs.append(_Object(pos, speed * np.array([np.cos(angle), np.sin(angle)]), size,
                            float(rng.random()), str(rng.choice(list(spec.shapes))), birth, death))
    return objs


def _shape_mask(shape: str, cx, cy, w, h, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "rect":
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0


def generate(spec: SceneSpec, name: Optional[str] = None) -> VideoItem:
    """Render one video; the result depends only on ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    background = np.clip(0.15 + 0.05 * rng.standard_normal((size, size, 1)), 0, 1) * np.ones(3)
    occluders = []
    for _ in range(spec.num_occluders):
        c = rng.uniform(spec.occluder_size / 2, size - spec.occluder_size / 2, size=2)
        occluders.append(_shape_mask("rect", c[0], c[1], spec.occluder_size, spec.occluder_size, size))
    objs = _spawn_objects(spec, rng)

    frames = np.zeros((spec.length, size, size, 3), dtype=np.uint8)
    annotations = []
    for t in range(spec.length):
        canvas = background.copy()
        owner = np.full((size, size), -1)
        states = []
        for k, ob in enumerate(objs):
            if not ob.birth <= t < ob.death:
                states.append(None)
                continue
            scale = 1.0 + spec.size_jitter * rng.standard_normal(2) if spec.size_jitter else np.ones(2)
            w, h = np.clip(ob.size * scale, 2.0, 2 * spec.max_size)
            hue = (ob.hue + spec.hue_jitter * rng.standard_normal()) % 1.0 if spec.hue_jitter else ob.hue
            mask = _shape_mask(ob.shape, ob.pos[0], ob.pos[1], w, h, size)
            canvas[mask] = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
            owner[mask] = k
            states.append((ob.pos.copy(), w, h, int(mask.sum())))
        for occ in occluders:
            canvas[occ] = (0.5, 0.5, 0.5)
            owner[occ] = -2
        entries = []
        for k, st in enumerate(states):
            if st is None or st[3] == 0:
                continue
            visible = int((owner == k).sum()) / st[3]
            if visible == 0:
                continue
            (cx, cy), w, h = st[0], st[1], st[2]
            x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
            x2, y2 = min(size, cx + w / 2), min(size, cy + h / 2)
            box = BoundingBox.from_corners(x1 / size, y1 / size, x2 / size, y2 / size)
            entries.append(AnnotationEntry(k + 1, 1, box, visible >= 0.5))
        frames[t] = np.round(canvas * 255).astype(np.uint8)
        annotations.append(FrameAnnotations(t, entries))
        _advance(objs, spec, rng, t)
    return VideoItem(frames, annotations, np.arange(spec.length), name or f"synth-{spec.seed}")


def _advance(objs: list[_Object], spec: SceneSpec, rng: np.random.Generator, t: int) -> None:
    size = spec.image_size
    for ob in objs:
        if spec.turn_prob and rng.random() < spec.turn_prob:
            speed = np.hypot(*ob.vel)
            angle = rng.uniform(0, 2 * np.pi)
            ob.vel = speed * np.array([np.cos(angle), np.sin(angle)])
        if not ob.birth <= t < ob.death:
            continue
        ob.pos = ob.pos + ob.vel
        half = ob.size / 2
        for a in range(2):
            lo, hi = half[a], size - half[a]
            if spec.boundary == "exit":
                if not -half[a] < ob.pos[a] < size + half[a]:
                    ob.death = min(ob.death, t + 1)
                continue
            if ob.pos[a] < lo:
                ob.pos[a] = 2 * lo - ob.pos[a]
                ob.vel[a] = -ob.vel[a]
            elif ob.pos[a] > hi:
                ob.pos[a] = 2 * hi - ob.pos[a]
                ob.vel[a] = -ob.vel[a]


def item_seed(seed: int, index: int) -> int:
    """Independent per-item seed derived from a dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(spec: SceneSpec, n_videos: int, seed: int, split: str = "train") -> Dataset:
    items = [generate(spec.replace(seed=item_seed(seed, i)), name=f"{split}-{i:04d}")
             for i in range(n_videos)]
    return Dataset(items, split)


def downsample(item: VideoItem, n: int) -> VideoItem:
    """Keep frames ``0, n, 2n, ...`` and renumber them consecutively."""
    if n < 1:
        raise ValueError(f"downsampling interval must be >= 1, got {n}")
    keep = range(0, len(item), n)
    anns = [FrameAnnotations(new, list(item.annotations[old].entries)) for new, old in enumerate(keep)]
    return VideoItem(item.frames[::n], anns, item.source_indices[::n], item.name)


# -- archives ---------------------------------------------------------------

_ANN_COLS = ("frame", "id", "class", "cx", "cy", "w", "h", "visible")


def annotation_table(item: VideoItem) -> np.ndarray:
    rows = [(fa.frame_index, e.track_id, e.class_id, *e.box.as_array(), float(e.visible))
            for fa in item.annotations for e in fa.entries]
    return np.array(rows, dtype=np.float64).reshape(-1, len(_ANN_COLS))


def annotations_from_table(table: np.ndarray, n_frames: int) -> list[FrameAnnotations]:
    per_frame: list[list[AnnotationEntry]] = [[] for _ in range(n_frames)]
    for row in np.asarray(table).reshape(-1, len(_ANN_COLS)):
        f, tid, cls, cx, cy, w, h, vis = row
        per_frame[int(f)].append(AnnotationEntry(int(tid), int(cls), BoundingBox(cx, cy, w, h), bool(vis)))
    return [FrameAnnotations(t, e) for t, e in enumerate(per_frame)]


def save_dataset(path, dataset: Dataset) -> str:
    """Write one ``.npz`` archive; returns its content fingerprint."""
    arrays = {}
    for i, item in enumerate(dataset.items):
        arrays[f"frames_{i}"] = item.frames
        arrays[f"ann_{i}"] = annotation_table(item)
        arrays[f"src_{i}"] = np.asarray(item.source_indices, dtype=np.int64)
    meta = {"split": dataset.split, "names": [it.name for it in dataset.items]}
    arrays["__meta__"] = np.array(json.dumps(meta))
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())
    return dataset_fingerprint(dataset)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        items = []
        for i, name in enumerate(meta["names"]):
            frames = data[f"frames_{i}"]
            items.append(VideoItem(frames, annotations_from_table(data[f"ann_{i}"], len(frames)),
                                   data[f"src_{i}"], name))
    return Dataset(items, meta["split"])


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for item in dataset.items:
        h.update(item.name.encode())
        h.update(np.ascontiguousarray(item.frames).tobytes())
        h.update(annotation_table(item).tobytes())
    return h.hexdigest()


# -- MOTChallenge layout ------------------------------------------------------

class MOTFormatError(ValueError):
    pass


def parse_mot_rows(text: str, source: str = "<text>") -> list[tuple]:
    """Parse ``frame,id,x,y,w,h[,conf[,class[,vis]]]`` lines.

    Returns ``(frame, id, x, y, w, h, conf, class, vis)`` tuples with 1-based
    frames and pixel boxes; missing optional columns default to
    ``conf=1, class=1, vis=-1``.
    """
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 6:
            raise MOTFormatError(f"{source}:{lineno}: expected at least 6 columns, got {len(parts)}")
        try:
            frame, tid = int(float(parts[0])), int(float(parts[1]))
            x, y, w, h = (float(p) for p in parts[2:6])
            conf = float(parts[6]) if len(parts) > 6 else 1.0
            cls = int(float(parts[7])) if len(parts) > 7 else 1
            vis = float(parts[8]) if len(parts) > 8 else -1.0
        except ValueError as exc:
            raise MOTFormatError(f"{source}:{lineno}: unparsable row {line!r}") from exc
        if not np.isfinite([x, y, w, h, conf]).all():
            raise MOTFormatError(f"{source}:{lineno}: non-finite value in {line!r}")
        if w <= 0 or h <= 0:
            raise MOTFormatError(f"{source}:{lineno}: box must have positive size, got w={w} h={h}")
        if frame < 1:
            raise MOTFormatError(f"{source}:{lineno}: frame numbers are 1-based, got {frame}")
        rows.append((frame, tid, x, y, w, h, conf, cls, vis))
    return rows


def _image_files(img_dir: Path) -> list[Path]:
    exts = {".jpg", ".jpeg", ".png", ".bmp"}
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in exts)


def load_motchallenge(directory, load_frames: bool = True) -> VideoItem:
    """Read ``img1/`` and ``gt/gt.txt`` into a :class:`VideoItem` with normalized boxes.

    Rows with ``conf == 0`` (MOTChallenge "ignore") are skipped. When
    ``load_frames`` is false the frame array has zero channels but the right
    length and size.
    """
    from PIL import Image

    directory = Path(directory)
    img_dir, gt_path = directory / "img1", directory / "gt" / "gt.txt"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing frame directory {img_dir}")
    if not gt_path.is_file():
        raise FileNotFoundError(f"missing annotation file {gt_path}")
    files = _image_files(img_dir)
    if not files:
        raise FileNotFoundError(f"no frames in {img_dir}")
    width = height = None
    seqinfo = directory / "seqinfo.ini"
    if seqinfo.is_file():
        cp = configparser.ConfigParser()
        cp.read(seqinfo)
        if cp.has_section("Sequence"):
            width = cp.getint("Sequence", "imWidth", fallback=None)
            height = cp.getint("Sequence", "imHeight", fallback=None)
    if width is None or height is None:
        with Image.open(files[0]) as im:
            width, height = im.size
    if load_frames:
        frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    else:
        frames = np.zeros((len(files), height, width, 0), dtype=np.uint8)

    rows = parse_mot_rows(gt_path.read_text(), str(gt_path))
    n_frames = max(len(files), max((r[0] for r in rows), default=0))
    per_frame: list[dict[int, AnnotationEntry]] = [dict() for _ in range(n_frames)]
    for frame, tid, x, y, w, h, conf, cls, vis in rows:
        if conf == 0:
            continue
        if tid in per_frame[frame - 1]:
            raise MOTFormatError(f"{gt_path}: duplicate id {tid} in frame {frame}")
        box = BoundingBox.from_pixels(x, y, w, h, width, height)
        per_frame[frame - 1][tid] = AnnotationEntry(tid, max(cls, 1), box, vis < 0 or vis >= 0.5)
    anns = [FrameAnnotations(t, list(d.values())) for t, d in enumerate(per_frame)]
    return VideoItem(frames, anns, np.arange(n_frames), directory.name)
