"""Instance discrimination: InfoNCE, feature queues and the three contrastive terms.

Queries come from the online discriminator, keys from the momentum copy
and never carry gradient.  Each term returns ``None`` while its queue is
still warming up; the keys computed on that call are pushed regardless so
the queue fills.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, apply_draws, sample_draws
from .nets import DiscriminatorBundle, NetworkParams, disc_forward, mlp_forward
from .tensor import Tensor

NORM_TOL = 1e-6


class QueueError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 2.0
    sigma_eps: float = 0.1
    queue_real: int | None = None   # None: ~5 % of the dataset
    queue_fake: int | None = None   # None: same as queue_real
    warmup_fraction: float = 0.25
    key_grad: bool = False          # let generator gradient also flow through the key
    view_p: float | None = None     # fixed view strength; None follows the adaptive p

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.sigma_eps < 0:
            raise ValueError(f"sigma_eps must be non-negative, got {self.sigma_eps}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        for name in ("queue_real", "queue_fake"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive, got {v}")


def _check_unit(rows: np.ndarray, what: str):
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    bad = np.abs(norms - 1.0) > NORM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise QueueError(f"{what}: row {i} has norm {norms[i]:.9g}, expected 1")


class FeatureQueue:
    """Fixed-capacity FIFO of unit embeddings, oldest first."""

    def __init__(self, capacity: int, dim: int, strict: bool = False):
        if capacity < 1:
            raise QueueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.strict = strict
        self._rows = np.zeros((0, self.dim))

    @property
    def fill(self) -> int:
        return self._rows.shape[0]

    def __len__(self):
        return self.fill

    def push(self, keys):
        keys = np.array(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise QueueError(f"queue expects rows of width {self.dim}, got {keys.shape}")
        if self.strict:
            _check_unit(keys, "queue_push")
        rows = np.concatenate([self._rows, keys])
        self._rows = rows[-self.capacity:].copy()

    def snapshot(self) -> np.ndarray:
        return self._rows.copy()

    def warm(self, fraction: float) -> bool:
        return self.fill >= max(1, math.ceil(fraction * self.capacity))

    def state(self) -> np.ndarray:
        return self._rows

    def load(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dim)
        if rows.shape[0] > self.capacity:
            raise QueueError(f"{rows.shape[0]} rows exceed capacity {self.capacity}")
        self._rows = rows.copy()


def queue_push(queue: FeatureQueue, keys):
    queue.push(keys)


def info_nce(q, k_pos, negatives, tau: float, strict: bool = False) -> Tensor:
    """Mean over rows of ``-log softmax`` of the positive among [positive, negatives]."""
    q, k_pos, negatives = T.as_tensor(q), T.as_tensor(k_pos), T.as_tensor(negatives)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if negatives.data.ndim != 2 or negatives.shape[0] < 1:
        raise ValueError(f"info_nce needs at least one negative, got shape {negatives.shape}")
    if strict:
        for name, t in (("query", q), ("positive", k_pos), ("negative", negatives)):
            _check_unit(t.data, f"info_nce {name}")
    pos = T.row_dot(q, k_pos)                                  # (B, 1)
    neg = T.matmul(q, T.transpose(negatives))                  # (B, N)
    logits = T.transpose(T.concat_rows([T.transpose(pos), T.transpose(neg)]))
    logits = T.scalar_mul(logits, 1.0 / tau)
    per_row = T.sub(T.logsumexp_rows(logits), T.scalar_mul(pos, 1.0 / tau))
    return T.mean(per_row)


def perturb_latent(z, sigma_eps: float, rng: np.random.Generator) -> Tensor:
    """``z + eps`` with ``eps ~ N(0, sigma_eps^2 I)``; a draw is consumed even at zero."""
    if sigma_eps < 0:
        raise ValueError(f"sigma_eps must be non-negative, got {sigma_eps}")
    z = T.as_tensor(z)
    noise = rng.standard_normal(z.shape)
    if sigma_eps == 0:
        return Tensor(z.data.copy())
    return Tensor(z.data + sigma_eps * noise)


def instance_term(queries, keys, queue: FeatureQueue, cfg: ContrastiveConfig,
                  push: bool = True) -> Tensor | None:
    """InfoNCE of ``queries`` against ``keys`` and a snapshot of ``queue``.

    Returns ``None`` while the queue is below its warmup fill.  ``keys`` are
    pushed afterwards when ``push`` is set, without gradient linkage.
    """
    keys = T.as_tensor(keys)
    loss = None
    if queue.warm(cfg.warmup_fraction):
        loss = info_nce(queries, keys, Tensor(queue.snapshot()), cfg.tau)
    if push:
        queue.push(keys.data)
    return loss


def _views(batch_size, dim, aug, rng):
    return sample_draws(batch_size, dim, aug, rng), sample_draws(batch_size, dim, aug, rng)


def c_r_d(bundle: DiscriminatorBundle, momentum: DiscriminatorBundle, real_batch,
          queue: FeatureQueue, cfg: ContrastiveConfig, aug: AugmentConfig,
          rng: np.random.Generator, push: bool = True) -> Tensor | None:
    """Real-instance discrimination through the real head."""
    x = T.as_tensor(real_batch).detach()
    draws_q, draws_k = _views(*x.shape, aug, rng)
    with T.no_grad():
        keys = disc_forward(momentum, apply_draws(x, draws_k), "real").data
    if not queue.warm(cfg.warmup_fraction):
        if push:
            queue.push(keys)
        return None
    negatives = queue.snapshot()
    queries = disc_forward(bundle, apply_draws(x, draws_q), "real")
    loss = info_nce(queries, Tensor(keys), Tensor(negatives), cfg.tau)
    if push:
        queue.push(keys)
    return loss


def c_f_d(bundle: DiscriminatorBundle, momentum: DiscriminatorBundle, generator: NetworkParams,
          z_batch, queue: FeatureQueue, cfg: ContrastiveConfig, aug: AugmentConfig,
          rng: np.random.Generator, perturb: bool = True, push: bool = True,
          fake=None) -> Tensor | None:
    """Fake-instance discrimination; the positive key is rendered from a perturbed latent.

    ``perturb=False`` gives the vanilla variant whose key is rendered from the
    query latent itself.  ``fake`` may carry a precomputed ``G(z_batch)``.
    The generator receives no gradient.
    """
    z = T.as_tensor(z_batch)
    n, dim = z.shape[0], generator.out_dim
    draws_q, draws_k = _views(n, dim, aug, rng)
    z_key = perturb_latent(z, cfg.sigma_eps, rng) if perturb else z
    with T.no_grad():
        fake_q = Tensor(fake.data) if fake is not None else mlp_forward(generator, z)
        fake_k = mlp_forward(generator, z_key)
        keys = disc_forward(momentum, apply_draws(fake_k, draws_k), "fake").data
    if not queue.warm(cfg.warmup_fraction):
        if push:
            queue.push(keys)
        return None
    negatives = queue.snapshot()
    queries = disc_forward(bundle, apply_draws(fake_q.detach(), draws_q), "fake")
    loss = info_nce(queries, Tensor(keys), Tensor(negatives), cfg.tau)
    if push:
        queue.push(keys)
    return loss


def c_f_g(bundle: DiscriminatorBundle, momentum: DiscriminatorBundle, generator: NetworkParams,
          z_batch, queue: FeatureQueue, cfg: ContrastiveConfig, aug: AugmentConfig,
          rng: np.random.Generator, fake=None) -> Tensor | None:
    """Loop-back term for the generator: no latent perturbation, queue left untouched.

    Gradient reaches the generator through the query (and through the key
    too when ``cfg.key_grad``).  The caller is responsible for not applying
    the discriminator gradient this produces.
    """
    z = T.as_tensor(z_batch)
    n, dim = z.shape[0], generator.out_dim
    draws_q, draws_k = _views(n, dim, aug, rng)
    if not queue.warm(cfg.warmup_fraction):
        return None
    if fake is None:
        fake = mlp_forward(generator, z)
    if cfg.key_grad:
        keys = disc_forward(momentum, apply_draws(fake, draws_k), "fake")
    else:
        with T.no_grad():
            keys = disc_forward(momentum, apply_draws(fake.detach(), draws_k), "fake")
    queries = disc_forward(bundle, apply_draws(fake, draws_q), "fake")
    return info_nce(queries, keys, Tensor(queue.snapshot()), cfg.tau)
