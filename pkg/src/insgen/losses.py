"""Adversarial losses, the R1 penalty and the combined objectives."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nets import DiscriminatorBundle, disc_forward
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_r_d: float = 1.0
    lambda_f_d: float = 1.0
    lambda_g: float = 0.1
    r1_gamma: float = 0.1
    r1_interval: int = 16

    def __post_init__(self):
        for name in ("lambda_r_d", "lambda_f_d", "lambda_g", "r1_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.r1_interval < 1:
            raise ValueError("r1_interval must be at least 1")


def d_logistic_loss(real_logits, fake_logits) -> Tensor:
    """mean(softplus(-real)) + mean(softplus(fake))."""
    return T.add(T.mean(T.softplus(T.scalar_mul(real_logits, -1.0))),
                 T.mean(T.softplus(fake_logits)))


def g_nonsat_loss(fake_logits) -> Tensor:
    return T.mean(T.softplus(T.scalar_mul(fake_logits, -1.0)))


def r1_penalty(bundle: DiscriminatorBundle, real_batch, gamma: float) -> Tensor:
    """``gamma / 2`` times the batch mean of the squared input-gradient norm of the domain logit.

    The input gradient is built as a differentiable expression, so the
    penalty back-propagates into the discriminator parameters.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    x = Tensor(T.as_tensor(real_batch).data, requires_grad=True)
    if gamma == 0:
        return Tensor(0.0)
    logits = disc_forward(bundle, x, "domain")
    (gx,) = T.grad(T.tsum(logits), [x], create_graph=True)
    return T.scalar_mul(T.tsum(T.square(gx)), 0.5 * gamma / x.shape[0])


def _scaled(part, weight):
    if part is None or weight == 0:
        return None
    return T.scalar_mul(part, weight)


def _total(terms) -> Tensor:
    terms = [t for t in terms if t is not None]
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def total_d_loss(l_d, w: LossWeights, c_r_d=None, c_f_d=None, r1=None) -> Tensor:
    """l_d + lambda_r_d * c_r_d + lambda_f_d * c_f_d + r1; absent parts count as zero."""
    return _total([l_d, _scaled(c_r_d, w.lambda_r_d), _scaled(c_f_d, w.lambda_f_d), r1])


def total_g_loss(l_g, w: LossWeights, c_f_g=None) -> Tensor:
    return _total([l_g, _scaled(c_f_g, w.lambda_g)])
