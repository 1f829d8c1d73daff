"""MLP generator, discriminator backbone and its three heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

HEADS = ("domain", "real", "fake")


@dataclass
class NetworkParams:
    """Stack of affine layers ``x @ W + b`` with leaky-relu in between.

    ``activate_last`` decides whether the final layer is followed by the
    activation too (the discriminator backbone is; the generator is not).
    """

    name: str
    layers: list[tuple[Tensor, Tensor]]
    slope: float = 0.2
    activate_last: bool = False

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError(f"{self.name}: layer dims do not chain "
                                 f"({w0.shape} then {w1.shape})")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def named_parameters(self):
        for i, (w, b) in enumerate(self.layers):
            yield f"{self.name}.{i}.weight", w
            yield f"{self.name}.{i}.bias", b

    def copy(self, requires_grad: bool | None = None) -> "NetworkParams":
        layers = []
        for w, b in self.layers:
            rg_w = w.requires_grad if requires_grad is None else requires_grad
            rg_b = b.requires_grad if requires_grad is None else requires_grad
            layers.append((Tensor(w.data.copy(), rg_w), Tensor(b.data.copy(), rg_b)))
        return NetworkParams(self.name, layers, self.slope, self.activate_last)

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def _init_layers(dims, rng, requires_grad=True):
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(w, requires_grad), Tensor(np.zeros(fan_out), requires_grad)))
    return layers


def _check_dims(dims):
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {list(dims)}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def mlp_forward(net: NetworkParams, x) -> Tensor:
    h = T.as_tensor(x)
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        h = T.dense(h, w, b, net.slope if (i < last or net.activate_last) else None)
    return h


def build_generator(latent_dim: int, hidden, out_dim: int, seed: int,
                    slope: float = 0.2) -> NetworkParams:
    dims = [latent_dim, *hidden, out_dim]
    _check_dims(dims)
    return NetworkParams("generator", _init_layers(dims, make_rng(seed)), slope)


@dataclass
class DiscriminatorBundle:
    backbone: NetworkParams
    domain_head: NetworkParams
    real_head: NetworkParams
    fake_head: NetworkParams
    frozen: bool = field(default=False, compare=False)

    def nets(self):
        return (self.backbone, self.domain_head, self.real_head, self.fake_head)

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets() for p in net.parameters()]

    def named_parameters(self):
        for net in self.nets():
            yield from net.named_parameters()

    def head(self, name: str) -> NetworkParams:
        if name == "domain":
            return self.domain_head
        if name == "real":
            return self.real_head
        if name == "fake":
            return self.fake_head
        raise ValueError(f"unknown head {name!r}; expected one of {HEADS}")

    def momentum_copy(self) -> "DiscriminatorBundle":
        """Detached copy whose parameters never require grad."""
        return DiscriminatorBundle(*(net.copy(requires_grad=False) for net in self.nets()),
                                   frozen=True)


def build_discriminator(in_dim: int, hidden, feat_dim: int, proj_dim: int, seed: int,
                        slope: float = 0.2) -> DiscriminatorBundle:
    dims = [in_dim, *hidden, feat_dim]
    _check_dims([*dims, proj_dim])
    rng = make_rng(seed)
    backbone = NetworkParams("backbone", _init_layers(dims, rng), slope, activate_last=True)
    domain = NetworkParams("domain_head", _init_layers([feat_dim, 1], rng), slope)
    real = NetworkParams("real_head", _init_layers([feat_dim, proj_dim, proj_dim], rng), slope)
    fake = NetworkParams("fake_head", _init_layers([feat_dim, proj_dim, proj_dim], rng), slope)
    return DiscriminatorBundle(backbone, domain, real, fake)


def apply_head(bundle: DiscriminatorBundle, features, head: str) -> Tensor:
    """Project backbone features through one head; instance heads are l2-normalized."""
    out = mlp_forward(bundle.head(head), features)
    return out if head == "domain" else T.l2_normalize(out)


def disc_forward(bundle: DiscriminatorBundle, batch, head: str) -> Tensor:
    """Domain logits (B, 1) or unit-norm instance embeddings (B, proj_dim)."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    batch = T.as_tensor(batch)
    if batch.data.ndim != 2 or batch.shape[1] != bundle.backbone.in_dim:
        raise T.ShapeError(f"disc_forward: batch shape {batch.shape} does not match "
                           f"in_dim {bundle.backbone.in_dim}")
    return apply_head(bundle, mlp_forward(bundle.backbone, batch), head)


def disc_multi(bundle: DiscriminatorBundle, batch, heads) -> dict[str, Tensor]:
    """Several heads on one shared backbone evaluation."""
    feats = mlp_forward(bundle.backbone, batch)
    return {h: apply_head(bundle, feats, h) for h in heads}


def _same_structure(a: DiscriminatorBundle, b: DiscriminatorBundle):
    pa, pb = list(a.named_parameters()), list(b.named_parameters())
    if len(pa) != len(pb):
        raise ValueError("momentum_update: bundles have different parameter counts")
    for (na, ta), (nb, tb) in zip(pa, pb):
        if na != nb or ta.shape != tb.shape:
            raise ValueError(f"momentum_update: structural mismatch at {na} "
                             f"{ta.shape} vs {nb} {tb.shape}")


def momentum_update(online: DiscriminatorBundle, momentum: DiscriminatorBundle, alpha: float):
    """In place: every momentum parameter becomes ``alpha * p' + (1 - alpha) * p``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _same_structure(online, momentum)
    for p, q in zip(online.parameters(), momentum.parameters()):
        q.data = alpha * q.data + (1.0 - alpha) * p.data
        q.requires_grad = False
        q.grad = None


def ema_update(online: NetworkParams, average: NetworkParams, decay: float):
    for p, q in zip(online.parameters(), average.parameters()):
        q.data = decay * q.data + (1.0 - decay) * p.data
