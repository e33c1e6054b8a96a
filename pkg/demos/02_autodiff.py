"""
A small reverse-mode autodiff
=============================

Tensors record the ops that made them; ``backward`` walks the tape in reverse.
"""

# %%
import numpy as np

from difflab import tensorcore as tc

rng = np.random.default_rng(0)
w1 = tc.Tensor(rng.standard_normal((2, 10)), requires_grad=True)
b1 = tc.Tensor(np.zeros(10), requires_grad=True)
w2 = tc.Tensor(rng.standard_normal((10, 2)), requires_grad=True)
x, y = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))


def loss():
    h = tc.silu(tc.add(tc.matmul(x, w1), b1))
    return tc.mse(tc.matmul(h, w2), y)


out = loss()
out.backward()
print("loss", out.item())
print("dL/db1", b1.grad)

# %%
# Compare every analytic gradient with central differences.
print("max relative error", tc.grad_check(loss, [w1, b1, w2]))

# %%
# RNG substreams: drawing more timesteps never shifts the noise stream.
r1, r2 = tc.Rng(5), tc.Rng(5)
r1.stream("timesteps").integers(0, 10, size=1000)
print(np.array_equal(r1.stream("noise").random(3), r2.stream("noise").random(3)))
