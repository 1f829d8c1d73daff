"""Differentiable augmentations for low-dimensional point data.

Every op is affine in its input (sign flip, rotation, scaling, translation,
additive noise), so a whole pipeline collapses to one per-sample map
``x -> M_i x + t_i``.  The random draws are separated from their
application so a fixed set of draws can be replayed, e.g. for gradient
checks.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

OP_KINDS = ("flip", "rotate", "noise", "scale", "translate")


@dataclass(frozen=True)
class AugmentConfig:
    # (kind, amount): rotate -> max degrees, noise -> sigma,
    # scale -> log range, translate -> range; flip ignores amount
    ops: tuple = (("flip", 0.0), ("rotate", 15.0), ("scale", 0.1),
                  ("translate", 0.1), ("noise", 0.05))
    p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augment p must lie in [0, 1], got {self.p}")
        ops = tuple((str(k), float(a)) for k, a in self.ops)
        for kind, amount in ops:
            if kind not in OP_KINDS:
                raise ValueError(f"unknown augmentation {kind!r}; expected one of {OP_KINDS}")
            if amount < 0:
                raise ValueError(f"augmentation {kind!r} needs a non-negative amount")
        object.__setattr__(self, "ops", ops)

    def with_p(self, p: float) -> "AugmentConfig":
        return replace(self, p=p)


@dataclass
class AugmentDraws:
    mats: np.ndarray        # (B, d, d)
    shift: np.ndarray       # (B, d)
    applied: np.ndarray     # (B, n_ops) bool

    @property
    def identity(self) -> bool:
        return not self.applied.any()

    def __len__(self):
        return self.mats.shape[0]

    def permute(self, order) -> "AugmentDraws":
        return AugmentDraws(self.mats[order], self.shift[order], self.applied[order])

    def split(self, parts: int) -> list["AugmentDraws"]:
        """Cut into ``parts`` equal row blocks, in order."""
        n = len(self) // parts
        return [AugmentDraws(self.mats[i * n:(i + 1) * n], self.shift[i * n:(i + 1) * n],
                             self.applied[i * n:(i + 1) * n]) for i in range(parts)]


def _rotate_rows(v, angles):
    if v.shape[1] < 2:
        return v
    c, s = np.cos(angles), np.sin(angles)
    out = v.copy()
    out[:, 0] = c * v[:, 0] - s * v[:, 1]
    out[:, 1] = s * v[:, 0] + c * v[:, 1]
    return out


def sample_draws(batch_size: int, dim: int, cfg: AugmentConfig,
                 rng: np.random.Generator) -> AugmentDraws:
    """Draw every random quantity a pipeline pass needs.

    The amount of randomness consumed depends only on (batch_size, dim,
    ops), never on ``p``, so streams stay aligned across settings.
    """
    # the linear ops (flip, scale, in-plane rotation) commute, so the
    # composed map is gain * R(angle) applied to x, plus a shift that every
    # later linear op also transforms
    gain = np.ones(batch_size)
    angle = np.zeros(batch_size)
    shift = np.zeros((batch_size, dim))
    applied = np.zeros((batch_size, len(cfg.ops)), dtype=bool)
    for j, (kind, amount) in enumerate(cfg.ops):
        on = rng.random(batch_size) < cfg.p
        applied[:, j] = on
        if kind == "flip":
            factor = np.where(on, -1.0, 1.0)
            gain *= factor
            shift *= factor[:, None]
        elif kind == "rotate":
            phi = np.where(on, np.deg2rad(amount) * rng.uniform(-1.0, 1.0, batch_size), 0.0)
            angle += phi
            shift = _rotate_rows(shift, phi)
        elif kind == "scale":
            factor = np.where(on, np.exp(amount * rng.uniform(-1.0, 1.0, batch_size)), 1.0)
            gain *= factor
            shift *= factor[:, None]
        elif kind == "translate":
            offs = amount * rng.uniform(-1.0, 1.0, (batch_size, dim))
            shift += np.where(on[:, None], offs, 0.0)
        else:  # noise
            offs = amount * rng.standard_normal((batch_size, dim))
            shift += np.where(on[:, None], offs, 0.0)
    mats = np.zeros((batch_size, dim, dim))
    mats[:, np.arange(dim), np.arange(dim)] = gain[:, None]
    if dim >= 2:
        c, s = gain * np.cos(angle), gain * np.sin(angle)
        mats[:, 0, 0] = c
        mats[:, 0, 1] = -s
        mats[:, 1, 0] = s
        mats[:, 1, 1] = c
    return AugmentDraws(mats, shift, applied)


def apply_draws(batch, draws: AugmentDraws) -> Tensor:
    batch = T.as_tensor(batch)
    if draws.identity:
        return batch
    if draws.mats.shape[0] != batch.shape[0]:
        raise T.ShapeError(f"augment: draws for {draws.mats.shape[0]} rows, "
                           f"batch has shape {batch.shape}")
    return T.add(T.batch_matvec(batch, draws.mats), Tensor(draws.shift))


def apply(batch, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Augment each row independently; every op fires with probability ``cfg.p``."""
    batch = T.as_tensor(batch)
    n, dim = batch.shape
    return apply_draws(batch, sample_draws(n, dim, cfg, rng))


@dataclass
class AdaState:
    """Adaptive augmentation strength driven by the sign of real logits."""

    p: float = 0.0
    target: float = 0.6
    step_size: float = 0.01
    p_max: float = 0.8
    window: deque = field(default_factory=lambda: deque(maxlen=4))

    def __post_init__(self):
        if not isinstance(self.window, deque) or self.window.maxlen is None:
            self.window = deque(self.window, maxlen=4)
        self.p = min(max(self.p, 0.0), self.p_max)

    @property
    def signal(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0


def ada_update(state: AdaState, real_logits) -> AdaState:
    """Push mean(sign(logits)) into the window and nudge ``p`` toward the target."""
    logits = real_logits.data if isinstance(real_logits, Tensor) else np.asarray(real_logits)
    window = deque(state.window, maxlen=state.window.maxlen)
    window.append(float(np.mean(np.sign(logits))))
    signal = float(np.mean(window))
    p = state.p + state.step_size * float(np.sign(signal - state.target))
    p = min(max(p, 0.0), state.p_max)
    return AdaState(p, state.target, state.step_size, state.p_max, window)
