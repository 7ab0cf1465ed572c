import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from histrack.core import AnnotationEntry, BoundingBox, Config, FrameAnnotations  # noqa: E402
from histrack.model import TrackerModel  # noqa: E402

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TINY = Config(feature_dim=16, d_head=4, n_det=4, num_decoders=2, image_size=16, downsample=4,
              ffn_dim=16, n_max=3)


def tiny_model(seed=0, dtype=torch.float64, **changes):
    torch.manual_seed(seed)
    model = TrackerModel(TINY.replace(**changes))
    return model.to(dtype)


def frame(index, *objects):
    """``objects`` are ``(track_id, cx, cy, w, h)`` tuples."""
    return FrameAnnotations(index, [AnnotationEntry(tid, 1, BoundingBox(cx, cy, w, h))
                                    for tid, cx, cy, w, h in objects])


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.fixture
def verdict(request):
    """Per-criterion record; the test fills in ``ok`` and ``detail`` before asserting."""
    k = request.node.get_closest_marker("criterion").args[0]
    rec = {"ok": False, "detail": "did not reach a verdict"}
    yield rec
    ACCEPTANCE[k] = (bool(rec["ok"]), rec["detail"])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")
