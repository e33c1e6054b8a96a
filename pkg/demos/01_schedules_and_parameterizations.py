"""
Noise schedules, posterior coefficients and the three parameterizations
=======================================================================

A schedule holds every per-timestep scalar. Timesteps run 1..T; t=1 is the
least noisy step.
"""

# %%
import numpy as np

from difflab.predictor import PredictionType, amplification_factor, make_target, recover_x0
from difflab.schedule import forward_sample, make_cosine, make_linear, posterior_coefficients

lin = make_linear(1000)
cos = make_cosine(1000)
for t in (1, 10, 100, 500, 1000):
    print(t, lin.alpha_bar[t], cos.alpha_bar[t])

# %%
# The reverse step mean is coef_x0 * x0_hat + coef_xt * x_t. At t=1 it is
# x0_hat itself, and the x0 weight stays small over most of the chain.
for t in (1, 2, 10, 100, 500, 1000):
    c = posterior_coefficients(lin, t)
    print(f"t={t:4d}  coef_x0={c.coef_x0:.4f}  coef_xt={c.coef_xt:.4f}  sigma2={lin.sigma2[t]:.2e}")

# %%
# Each head predicts a different target; all of them map back to x0.
rng = np.random.default_rng(0)
x0 = rng.uniform(-1, 1, (5, 2))
eps = rng.standard_normal((5, 2))
t = np.array([1, 10, 100, 500, 1000])
xt = forward_sample(lin, x0, t, eps)
for pt in PredictionType:
    y = make_target(pt, lin, t, x0, eps)
    print(pt.letter, np.abs(recover_x0(pt, lin, t, xt, y) - x0).max())

# %%
# Recovering x0 from an eps prediction multiplies its error by this factor.
print(amplification_factor(lin, np.array([1, 100, 500, 900, 1000])))
