"""
What the refinement module computes
===================================

Each track's rows pass through a gated update: a removal gate ``z`` per
attention group scales the input, an addition branch adds new content, and
a layer norm closes the step, ``LN(2 F (1 - z) + F_add)``. Fixing the gate
by hand makes the two extremes visible.
"""

import numpy as np
import torch

from histrack.core import Config
from histrack.model import TrackerModel

torch.manual_seed(0)
model = TrackerModel(Config(feature_dim=16, d_head=4, n_det=4)).double()
irm = model.irms["1"]

# two tracks: rows 0-2 belong to track 7, rows 3-4 to track 9
content = torch.randn(5, 16, dtype=torch.float64)
groups = np.array([7, 7, 7, 9, 9])

with torch.no_grad():
    allow = torch.as_tensor(groups[:, None] == groups[None, :])
    z, f_add = irm.branches(content, allow)
    print("learned gate per row and group:\n", z.numpy().round(3))

    # z = 1 removes the input entirely; only the added content survives
    irm.gate_override = 1.0
    out = irm(content, groups)
    print("z=1 equals LN(F_add):", torch.allclose(out, irm.norm(f_add)))

    # z = 0.5 without the addition leaves the normalized input
    irm.gate_override, irm.zero_add = 0.5, True
    print("z=0.5, no addition equals LN(F):", torch.allclose(irm(content, groups), irm.norm(content)))
    irm.gate_override, irm.zero_add = None, False

    # rows never see other tracks: changing track 9 leaves track 7 untouched
    moved = content.clone()
    moved[3:] += 5.0
    print("track 7 unchanged:", torch.equal(irm(moved, groups)[:3], irm(content, groups)[:3]))
