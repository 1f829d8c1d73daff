"""Ablation presets: each row adds one component on top of the previous one."""
from __future__ import annotations

import dataclasses

from .config import RunConfig

PRESETS = ("baseline", "+cr", "+cf_vanilla", "+cf", "+cfg")


def apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    """Switch terms on or off for one ablation row.

    baseline     no instance discrimination
    +cr          real-instance term on the discriminator
    +cf_vanilla  plus fake-instance term, key rendered without perturbation
    +cf          plus latent perturbation of the fake key
    +cfg         plus the loop-back term on the generator

    Enabled terms keep the weights and noise scale configured in ``cfg``;
    disabled ones are zeroed.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    rank = PRESETS.index(preset)
    w = cfg.loss
    loss = dataclasses.replace(
        w,
        lambda_r_d=w.lambda_r_d if rank >= 1 else 0.0,
        lambda_f_d=w.lambda_f_d if rank >= 2 else 0.0,
        lambda_g=w.lambda_g if rank >= 4 else 0.0,
    )
    sigma = 0.0 if rank == 2 else cfg.contrastive.sigma_eps
    contrastive = dataclasses.replace(cfg.contrastive, sigma_eps=sigma)
    return cfg.replace(loss=loss, contrastive=contrastive)
