"""
Fine-tuning one slot hurts the others
=====================================

Continue training only on the last slot and compare profiles before and
after: the slot's own loss falls while x0 error near t=1 rises.
Same workflow from the shell:

    difflab train experiments/baseline_a.json
    difflab profile runs/baseline_a/checkpoint.json --out runs/p.csv
    difflab slots runs/p.csv --out runs/slots.json
    difflab finetune runs/baseline_a/checkpoint.json --slot 10 --partition runs/slots.json --lr 3e-4
"""

# %%
import os

import numpy as np

from difflab.datasets import DatasetSpec
from difflab.profiler import compute_slots, diff_profiles
from difflab.trainer import TrainConfig, Trainer, train

steps = int(os.environ.get("DEMO_STEPS", 3000))
cfg = TrainConfig(mode="a", steps=steps, dataset=DatasetSpec(noise_std=0.2))
base = train(cfg).trainer
doc = base.checkpoint()
before_eps = base.profile("a", "target", 256, seed=123)
before_x0 = base.profile("a", "x0", 256, seed=123)
part = compute_slots(before_eps, 10)
print(part.bounds)

# %%
lo, hi = part.bounds[-1]
ft_cfg = TrainConfig.from_dict({**doc["config"], "steps": 5000 if steps >= 20000 else steps // 4,
                                "lr": 3e-4, "restrict_range": [lo, hi], "seed": 1000})
tr = Trainer.finetune_from(doc, ft_cfg)
train(ft_cfg, trainer=tr)

# %%
d_eps = diff_profiles(before_eps, tr.profile("a", "target", 256, seed=123), part)
d_x0 = diff_profiles(before_x0, tr.profile("a", "x0", 256, seed=123), part)
print("eps delta per slot", np.round(d_eps.slot_mean, 5))
print("x0 delta per slot ", np.round(d_x0.slot_mean, 6))
