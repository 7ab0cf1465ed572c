"""
A small frame-rate sweep
========================

Train two tiny trackers that differ only in how many features each track
keeps, then compare them on held-out videos at several downsampling
intervals. The budget here is a few minutes; the full comparison uses
the default configuration (see the README).
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from histrack.benchmark import sweep, train_model
from histrack.core import Config
from histrack.synthgen import SceneSpec, generate_dataset
from histrack.training import TrainConfig

scene = SceneSpec(length=30)
train_set = generate_dataset(scene, 40, 0, "train")
val = generate_dataset(scene, 5, 1, "val")

# same seed, same data order; only the bank size differs
budget = TrainConfig(epochs=30, batch_clips=4, seed=0)
models = {}
for n_max in (1, 3):
    model, history = train_model(Config(n_max=n_max), budget, train_set)
    print(f"n_max={n_max}: final clip loss {history[-1]['loss']:.2f}")
    models[f"n_max={n_max}"] = model

table = sweep(models, val.items, [1, 3, 6])
print(table.to_text())

fig, ax = plt.subplots(figsize=(4, 3))
for label in models:
    rows = [r for r in table.rows if r.label == label]
    ax.plot([r.n for r in rows], [r.report.idf1 for r in rows], marker="o", label=label)
ax.set_xlabel("downsampling interval n")
ax.set_ylabel("IDF1")
ax.legend()
fig.tight_layout()
fig.savefig("frame_rate_sweep.png", dpi=120)
