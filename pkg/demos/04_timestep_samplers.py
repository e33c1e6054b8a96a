"""
Timestep samplers
=================

Uniform, weighted, loss-adaptive and slot-stratified draws of t.
"""

# %%
import numpy as np

from difflab.tsampler import SamplerSpec, TimestepSampler, late_heavy_weights, refresh_adaptive, tv_distance

T = 100
g = np.random.default_rng(0)
uni = TimestepSampler(SamplerSpec("uniform"), T)
print("uniform TV", tv_distance(uni.sample(1_000_000, g), uni.target_distribution()))

w = TimestepSampler(SamplerSpec("weighted", weights=late_heavy_weights(T)), T)
print("weighted TV", tv_distance(w.sample(1_000_000, g), w.target_distribution()))

# %%
# Loss-adaptive weights follow a profile raised to gamma.
profile = np.exp(-np.arange(T) / 10.0)
spec = refresh_adaptive(SamplerSpec("loss_adaptive"), profile, gamma=0.5)
print(spec.weights[:5], spec.weights[-5:])

# %%
# Slot-stratified: every batch of >= n_slots draws hits every slot; leftover
# draws go round-robin across consecutive calls.
part = [(1, 5), (6, 13), (14, 23), (24, 37), (38, 100)]
s = TimestepSampler(SamplerSpec("slot_stratified", partition=part), T)
for _ in range(3):
    print(np.sort(s.sample(7, g)))
