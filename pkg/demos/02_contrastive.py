"""InfoNCE, feature queues and the instance-discrimination terms."""
# %% [markdown]
# The contrastive loss scores each query against its own positive key and a
# bank of negatives.  The positive sits in the denominator too, so a uniform
# softmax over one positive and N negatives costs log(N + 1).

# %%
import math

import numpy as np

from insgen.augment import AugmentConfig
from insgen.contrastive import ContrastiveConfig, FeatureQueue, c_f_d, c_r_d, info_nce
from insgen.nets import build_discriminator, build_generator

q = np.array([[1.0, 0.0]])
neg = np.array([[0.0, 1.0]])
print("aligned positive, orthogonal negative, tau 1:", info_nce(q, q, neg, 1.0).item())
print("same with tau 2:                             ", info_nce(q, q, neg, 2.0).item())
print("uniform over 1 + 3 entries:", info_nce(q, np.array([[0.0, 1.0]]), np.tile(neg, (3, 1)),
                                                1.0).item(), "vs log 4 =", math.log(4))

# %% [markdown]
# Larger temperatures flatten the softmax, so the loss of a fixed
# configuration moves toward log(N + 1) as tau grows.

# %%
rng = np.random.default_rng(0)
def unit(n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)

queries, negatives = unit(8, 16), unit(64, 16)
for tau in (0.1, 0.5, 2.0, 10.0):
    print(f"tau {tau:5.1f}: loss {info_nce(queries, queries, negatives, tau).item():.4f}")
print("log 65 =", round(math.log(65), 4))

# %% [markdown]
# Negatives come from fixed-capacity FIFO queues of momentum-encoder keys.
# Pushing more rows than the capacity keeps only the newest.

# %%
queue = FeatureQueue(capacity=4, dim=2)
for step in range(3):
    angle = np.array([step, step + 0.5])
    queue.push(np.stack([np.cos(angle), np.sin(angle)], axis=1))
    print("fill", queue.fill, "oldest row", np.round(queue.snapshot()[0], 3))

# %% [markdown]
# The real-instance term contrasts two augmented views of each real sample.
# The fake-instance term pairs G(z) with G(z + eps).  Both push their keys
# after computing the loss, and both wait until the queue is a quarter full.

# %%
d = build_discriminator(2, [32, 32], 16, 8, seed=0)
momentum = d.momentum_copy()
g = build_generator(2, [32, 32], 2, seed=1)
cfg, aug = ContrastiveConfig(), AugmentConfig(p=0.5)
real_q, fake_q = FeatureQueue(32, 8), FeatureQueue(32, 8)
draws = np.random.Generator(np.random.Philox(0))
for step in range(6):
    x = rng.normal(size=(4, 2))
    z = rng.normal(size=(4, 2))
    r = c_r_d(d, momentum, x, real_q, cfg, aug, draws)
    f = c_f_d(d, momentum, g, z, fake_q, cfg, aug, draws)
    show = lambda v: "warming" if v is None else f"{v.item():.4f}"
    print(f"step {step}: real queue {real_q.fill:2d}  C_real {show(r)}  C_fake {show(f)}")
