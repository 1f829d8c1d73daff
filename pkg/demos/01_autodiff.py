"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""
# %% [markdown]
# Every tensor operation records a node on the active graph.  `backward`
# walks the graph in reverse and accumulates vector-Jacobian products into
# `.grad`.  `grad_check` compares those against central differences.

# %%
import numpy as np

from insgen import tensor as T
from insgen.nets import build_discriminator
from insgen.losses import r1_penalty
from insgen.tensor import Tensor

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))

# %% [markdown]
# A small scalar function: mean softplus of a linear map.

# %%
def f(weight):
    return T.mean(T.softplus(T.matmul(x, weight)))

with T.Graph():
    loss = f(w)
    T.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)
print("grad_check max relative error", T.grad_check(f, w.data))

# %% [markdown]
# Gradients can themselves be differentiated.  The R1 penalty is the squared
# input gradient of the discriminator, so training on it needs a second
# derivative.  The check below differentiates the penalty with respect to the
# first-layer weights.

# %%
d = build_discriminator(2, [8, 8], 6, 4, seed=1)
real = rng.normal(size=(5, 2))
first = d.backbone.layers[0][0]

with T.Graph():
    value = r1_penalty(d, real, gamma=10.0)
    T.backward(value)
print("R1 penalty", value.item())

# %% [markdown]
# Compare one coordinate of that gradient with a finite difference.  The
# penalty takes a derivative internally, so it is evaluated with recording on,
# inside a throwaway graph, never under `no_grad`.

# %%
def penalty_at(weight):
    saved = first.data
    first.data = weight
    try:
        with T.Graph():
            return r1_penalty(d, real, gamma=10.0).item()
    finally:
        first.data = saved

i, j, h = 0, 0, 1e-5
plus, minus = first.data.copy(), first.data.copy()
plus[i, j] += h
minus[i, j] -= h
fd = (penalty_at(plus) - penalty_at(minus)) / (2 * h)
print(f"analytic {first.grad[i, j]:.8f}  finite difference {fd:.8f}")
