"""Query-based multi-object tracking with per-track feature banks.

Each live track keeps up to ``n_max`` features from past frames. All of them
are decoded as queries every frame. Decoder self-attention is blocked
between queries of the same track, and refinement modules exchange
information only within a track. The package also ships a synthetic-video
benchmark for frame-rate robustness and CLEAR/IDF1/HOTA evaluation.
"""
from .core import AnnotationEntry, BoundingBox, Config, FrameAnnotations, Prediction
from .memory import QueryBatch, TrackMemory, TrackRecord, build_query_batch, update_tracks
from .masks import AttentionMask, decoder_mask, irm_mask
from .assignment import Assignment, build_matching, solve_min_cost
from .model import TrackerModel, load_checkpoint, save_checkpoint
from .losses import bipartite_loss, clip_loss, toc_loss
from .tracker import TrackFile, run, step
from .synthgen import SceneSpec, VideoItem, downsample, generate, generate_dataset
from .metrics import MetricReport, equivalent_fps, evaluate, hota, idf1, clear_metrics
from .training import TrainConfig, train

__version__ = "0.1.0"
