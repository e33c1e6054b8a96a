"""
Mixed prediction: three heads, one gradient
===========================================

Each sample backpropagates only through the head whose x0 estimate was
closest to the truth. The selection table shows which head wins where.
"""

# %%
import os

import numpy as np

from difflab.datasets import DatasetSpec
from difflab.predictor import PredictionType
from difflab.trainer import TrainConfig, Trainer

steps = int(os.environ.get("DEMO_STEPS", 2000))
tr = Trainer(TrainConfig(mode="mixed", steps=steps, dataset=DatasetSpec(noise_std=0.2)))
for _ in range(steps):
    r = tr.step()

# %%
# Unselected rows get exactly zero gradient at every head output.
for pt in PredictionType:
    rows = r.selected != int(pt)
    print(pt.letter, "selected share", np.mean(~rows), "max |grad| on others", np.abs(r.head_output_grads[pt][rows]).max(initial=0.0))

# %%
# Per-timestep winners, in bands of 100 timesteps.
counts = tr.selection_counts
for lo in range(0, 1000, 100):
    band = counts[lo:lo + 100].sum(axis=0)
    print(f"t {lo + 1:4d}-{lo + 100:4d}", dict(zip("dva", band.tolist())))
