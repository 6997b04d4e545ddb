"""
A small reverse-mode autograd engine
====================================

Every op records its parents and a backward closure. Calling ``backward`` on
a scalar replays the tape in reverse creation order.
"""

# %%
import numpy as np

from bdlm import tensor as T

T.set_precision("f64")
rng = np.random.default_rng(0)

x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
loss = T.total(T.silu(T.matmul(x, w)))
T.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# %%
# Check one entry against a central difference.
def f():
    return T.total(T.silu(T.matmul(T.Tensor(x.data), T.Tensor(w.data)))).item()

eps = 1e-6
w.data[1, 0] += eps
up = f()
w.data[1, 0] -= 2 * eps
down = f()
w.data[1, 0] += eps
print("analytic", w.grad[1, 0], "numeric", (up - down) / (2 * eps))

# %%
# Masked attention weights: disallowed keys get exactly zero probability.
scores = T.Tensor(rng.standard_normal((4, 4)))
causal = np.tril(np.ones((4, 4), bool))
print(np.round(T.softmax_masked(scores, causal).data, 3))
