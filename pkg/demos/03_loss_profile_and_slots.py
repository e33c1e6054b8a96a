"""
Per-timestep loss profile and the equal-loss slots
==================================================

Train an eps-predicting model on eight Gaussians, measure the loss at every
timestep, then cut [1, T] into ten slots carrying equal total loss.
Set DEMO_STEPS=20000 to match the reference experiment (about a minute).
"""

# %%
import os

from difflab.datasets import DatasetSpec
from difflab.profiler import compute_slots
from difflab.trainer import TrainConfig, train

steps = int(os.environ.get("DEMO_STEPS", 3000))
cfg = TrainConfig(mode="a", steps=steps, batch=128, lr=1e-3, dataset=DatasetSpec(noise_std=0.2))
res = train(cfg)
tr = res.trainer

# %%
prof = tr.profile("a", "target", n_per_t=256)
m = prof.mean
print("argmax t", m.argmax() + 1, "ratio max / t=T", m.max() / m[-1])
for t in (1, 2, 5, 10, 50, 100, 300, 1000):
    print(t, m[t - 1])

# %%
# Small t carries most of the loss, so the early slots are narrow.
part = compute_slots(prof, 10)
print(part.bounds)
print(part.widths)

# %%
# The same error measured in x0 space grows with t instead.
px = tr.profile("a", "x0", n_per_t=256)
print(px.mean[[0, 9, 99, 499, 999]])
