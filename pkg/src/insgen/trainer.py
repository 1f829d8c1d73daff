"""Alternating D/G training with instance-discrimination terms.

One iteration runs ``d_steps_per_g`` discriminator steps with a frozen
generator, then one generator step with a frozen discriminator.  Random
streams for data, latents, augmentation and contrastive views are kept
apart so presets that differ only in loss weights see the same batches.
"""
from __future__ import annotations

import csv
import json
from collections import deque
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AdaState, ada_update, apply_draws, sample_draws
from .config import RunConfig
from .contrastive import FeatureQueue, instance_term, perturb_latent
from .datasets import Dataset, DatasetError, load_table, make_grid, make_ring, subsample
from .losses import d_logistic_loss, g_nonsat_loss, r1_penalty, total_d_loss, total_g_loss
from .metrics import frechet_between, mode_coverage
from .nets import (DiscriminatorBundle, NetworkParams, apply_head, build_discriminator,
                   build_generator, disc_forward, ema_update, mlp_forward, momentum_update)
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

STREAMS = ("data", "latent", "augment", "contrastive")
CSV_COLUMNS = ("step", "l_d", "c_r_d", "c_f_d", "r1", "l_g", "c_f_g", "mean_real_logit",
               "mean_fake_logit", "aug_p", "frechet", "mode_coverage", "hq_fraction")
LOSS_COLUMNS = ("l_d", "c_r_d", "c_f_d", "r1", "l_g", "c_f_g")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, parts):
        bad = {k: v for k, v in parts.items() if v is not None and not math.isfinite(v)}
        super().__init__(f"non-finite loss at step {step}: {bad}")
        self.step = step
        self.parts = parts


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


@dataclass
class TrainState:
    step: int
    d: DiscriminatorBundle
    d_momentum: DiscriminatorBundle
    g: NetworkParams
    g_ema: NetworkParams
    opt_d: Adam
    opt_g: Adam
    ada: AdaState
    queue_real: FeatureQueue
    queue_fake: FeatureQueue
    rngs: dict
    d_steps: int = 0
    last: dict = field(default_factory=dict)


def build_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "ring":
        full = make_ring(ds.modes, ds.radius, ds.sigma, ds.count, ds.seed)
    elif ds.kind == "grid":
        full = make_grid(ds.side, ds.spacing, ds.sigma, ds.count, ds.seed)
    else:
        if not ds.path or not Path(ds.path).is_file():
            raise DatasetError(f"dataset.path: file not found: {ds.path}")
        full = load_table(ds.path)
    if ds.subsample is not None:
        full = subsample(full, min(ds.subsample, len(full)), ds.seed, ds.mirror)
    return full


def queue_sizes(cfg: RunConfig, n_train: int) -> tuple[int, int]:
    """Default queue length is about 5 % of the training set; fake follows real."""
    real = cfg.contrastive.queue_real or max(1, round(0.05 * n_train))
    fake = cfg.contrastive.queue_fake or real
    return real, fake


def init_state(cfg: RunConfig, dataset: Dataset) -> TrainState:
    m, tr = cfg.model, cfg.trainer
    g = build_generator(m.latent_dim, list(m.g_hidden), dataset.dim, _sub_seed(tr.seed, 1),
                        m.slope)
    d = build_discriminator(dataset.dim, list(m.d_hidden), m.feat_dim, m.proj_dim,
                            _sub_seed(tr.seed, 2), m.slope)
    q_real, q_fake = queue_sizes(cfg, len(dataset))
    aug = cfg.augment
    return TrainState(
        step=0,
        d=d,
        d_momentum=d.momentum_copy(),
        g=g,
        g_ema=g.copy(requires_grad=False),
        opt_d=Adam(d.parameters(), tr.lr_d, tr.adam_betas),
        opt_g=Adam(g.parameters(), tr.lr_g, tr.adam_betas),
        ada=AdaState(aug.p, aug.target, aug.step_size, aug.p_max, deque(maxlen=aug.window)),
        queue_real=FeatureQueue(q_real, m.proj_dim),
        queue_fake=FeatureQueue(q_fake, m.proj_dim),
        rngs={name: stream(tr.seed, 10 + i) for i, name in enumerate(STREAMS)},
    )


@contextmanager
def frozen(params):
    """Temporarily stop gradient from reaching ``params``."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _finite_or_raise(step, parts):
    for v in parts.values():
        if v is not None and not math.isfinite(v):
            raise TrainingDiverged(step, parts)


def _val(t):
    return None if t is None else t.item()


def _view_aug(cfg: RunConfig, state: TrainState):
    p = cfg.contrastive.view_p
    return cfg.augment.pipeline(state.ada.p if p is None else p)


def _rows(t, lo, hi):
    return T.gather_rows(t, np.arange(lo, hi))


def d_step(state: TrainState, cfg: RunConfig, real_batch, z=None) -> dict:
    """One discriminator update on the complete discriminator objective.

    All online-discriminator inputs of the step (augmented reals and fakes
    for the domain loss, query views for both instance heads) go through a
    single backbone pass; all momentum keys through another.
    """
    w, B = cfg.loss, real_batch.shape[0]
    rngs = state.rngs
    if z is None:
        z = rngs["latent"].standard_normal((B, cfg.model.latent_dim))
    z = np.asarray(z, dtype=np.float64)
    real = Tensor(np.asarray(real_batch, dtype=np.float64))
    dim = real.shape[1]
    aug = cfg.augment.pipeline(state.ada.p)
    views = _view_aug(cfg, state)
    use_real = w.lambda_r_d > 0
    use_fake = w.lambda_f_d > 0 or w.lambda_g > 0   # the loop-back term reads this queue
    perturb = cfg.contrastive.sigma_eps > 0
    crng = rngs["contrastive"]

    draws_real, draws_fake = sample_draws(2 * B, dim, aug, rngs["augment"]).split(2)
    if use_real:
        rq, rk = sample_draws(2 * B, dim, views, crng).split(2)
    if use_fake:
        fq, fk = sample_draws(2 * B, dim, views, crng).split(2)
        z_key = perturb_latent(z, cfg.contrastive.sigma_eps, crng).data if perturb else z

    with T.Graph():
        with T.no_grad():
            if use_fake and perturb:
                both = mlp_forward(state.g, np.concatenate([z, z_key])).data
                fake, fake_key = Tensor(both[:B]), Tensor(both[B:])
            else:
                fake = mlp_forward(state.g, z)
                fake_key = fake
            key_inputs = []
            if use_real:
                key_inputs.append(apply_draws(real, rk))
            if use_fake:
                key_inputs.append(apply_draws(fake_key, fk))
            if key_inputs:
                key_feats = mlp_forward(state.d_momentum.backbone, T.concat_rows(key_inputs))
        real_aug = apply_draws(real, draws_real)
        inputs = [real_aug, apply_draws(fake, draws_fake)]
        if use_real:
            inputs.append(apply_draws(real, rq))
        if use_fake:
            inputs.append(apply_draws(fake, fq))
        feats = mlp_forward(state.d.backbone, T.concat_rows(inputs))
        logits = apply_head(state.d, _rows(feats, 0, 2 * B), "domain")
        real_logits, fake_logits = _rows(logits, 0, B), _rows(logits, B, 2 * B)
        l_d = d_logistic_loss(real_logits, fake_logits)

        cr = cf = None
        at, kat = 2 * B, 0
        if use_real:
            queries = apply_head(state.d, _rows(feats, at, at + B), "real")
            with T.no_grad():
                keys = apply_head(state.d_momentum, Tensor(key_feats.data[kat:kat + B]), "real")
            cr = instance_term(queries, keys, state.queue_real, cfg.contrastive)
            at, kat = at + B, kat + B
        if use_fake:
            queries = apply_head(state.d, _rows(feats, at, at + B), "fake")
            with T.no_grad():
                keys = apply_head(state.d_momentum, Tensor(key_feats.data[kat:kat + B]), "fake")
            cf = instance_term(queries, keys, state.queue_fake, cfg.contrastive)
            if w.lambda_f_d == 0:
                cf = None

        r1 = None
        if w.r1_gamma > 0 and state.d_steps % w.r1_interval == 0:
            r1 = r1_penalty(state.d, real_aug.detach(), w.r1_gamma * w.r1_interval)

        total = total_d_loss(l_d, w, cr, cf, r1)
        parts = {"l_d": l_d.item(), "c_r_d": _val(cr), "c_f_d": _val(cf), "r1": _val(r1)}
        _finite_or_raise(state.step, {**parts, "total": total.item()})
        state.opt_d.zero_grad()
        T.backward(total)
    state.opt_d.step()
    momentum_update(state.d, state.d_momentum, cfg.trainer.momentum_alpha)
    if cfg.augment.adaptive:
        state.ada = ada_update(state.ada, real_logits)
    state.d_steps += 1
    return parts


def g_step(state: TrainState, cfg: RunConfig, z=None) -> dict:
    """One generator update on the complete generator objective; D is frozen."""
    w, B = cfg.loss, cfg.trainer.batch
    rngs = state.rngs
    if z is None:
        z = rngs["latent"].standard_normal((B, cfg.model.latent_dim))
    z = np.asarray(z, dtype=np.float64)
    B = z.shape[0]
    aug = cfg.augment.pipeline(state.ada.p)
    dim = state.g.out_dim
    use_loop = w.lambda_g > 0 and state.queue_fake.warm(cfg.contrastive.warmup_fraction)
    draws = sample_draws(B, dim, aug, rngs["augment"])
    if w.lambda_g > 0:
        views = _view_aug(cfg, state)
        crng = rngs["contrastive"]
        fq, fk = sample_draws(2 * B, dim, views, crng).split(2)
    with T.Graph(), frozen(state.d.parameters()):
        fake = mlp_forward(state.g, z)
        inputs = [apply_draws(fake, draws)]
        if use_loop:
            inputs.append(apply_draws(fake, fq))
        feats = mlp_forward(state.d.backbone, T.concat_rows(inputs))
        logits = apply_head(state.d, _rows(feats, 0, B), "domain")
        l_g = g_nonsat_loss(logits)
        loop = None
        if use_loop:
            queries = apply_head(state.d, _rows(feats, B, 2 * B), "fake")
            key_in = apply_draws(fake if cfg.contrastive.key_grad else fake.detach(), fk)
            keys = disc_forward(state.d_momentum, key_in, "fake")
            loop = instance_term(queries, keys, state.queue_fake, cfg.contrastive, push=False)
        total = total_g_loss(l_g, w, loop)
        parts = {"l_g": l_g.item(), "c_f_g": _val(loop)}
        _finite_or_raise(state.step, {**parts, "total": total.item()})
        state.opt_g.zero_grad()
        T.backward(total)
    state.opt_g.step()
    ema_update(state.g, state.g_ema, cfg.trainer.ema_decay)
    return parts


def train_iteration(state: TrainState, cfg: RunConfig, dataset: Dataset) -> dict:
    B = cfg.trainer.batch
    parts = {}
    for _ in range(cfg.trainer.d_steps_per_g):
        idx = state.rngs["data"].integers(0, len(dataset), B)
        parts.update(d_step(state, cfg, dataset.samples[idx]))
    parts.update(g_step(state, cfg))
    state.step += 1
    if parts.get("r1") is None:
        parts["r1"] = state.last.get("r1")
    state.last = parts
    return parts


def evaluate(state: TrainState, cfg: RunConfig, dataset: Dataset,
             n_samples: int | None = None) -> dict:
    """Metrics of the averaged generator against the training set.

    Uses a fixed latent set derived from the seed, so values depend only on
    the parameters, never on training-stream positions.
    """
    n = n_samples or cfg.eval.samples
    z = stream(cfg.trainer.seed, 99).standard_normal((n, cfg.model.latent_dim))
    with T.no_grad():
        fakes = mlp_forward(state.g_ema, z).data
        online_fakes = mlp_forward(state.g, z)
        real_logit = disc_forward(state.d, Tensor(dataset.samples), "domain").data.mean()
        fake_logit = disc_forward(state.d, online_fakes, "domain").data.mean()
    out = {
        "mean_real_logit": float(real_logit),
        "mean_fake_logit": float(fake_logit),
        "aug_p": float(state.ada.p),
        "frechet": frechet_between(fakes, dataset.samples),
        "mode_coverage": float("nan"),
        "hq_fraction": float("nan"),
    }
    centers = dataset.centers
    if centers is not None:
        cov = mode_coverage(fakes, centers, dataset.meta["sigma"], cfg.eval.hq_radius_mult)
        out["mode_coverage"] = cov["covered"]
        out["hq_fraction"] = cov["hq_fraction"]
    return out


def sample(state: TrainState, cfg: RunConfig, n: int, seed_key: int = 99) -> np.ndarray:
    z = stream(cfg.trainer.seed, seed_key).standard_normal((n, cfg.model.latent_dim))
    with T.no_grad():
        return mlp_forward(state.g_ema, z).data


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


class MetricsLog:
    """Append-only CSV, flushed on every row."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = self.path.exists() and self.path.stat().st_size > 0
        self.fh = self.path.open("a" if append else "w", newline="")
        self.writer = csv.writer(self.fh)
        if not (append and exists):
            self.writer.writerow(CSV_COLUMNS)
            self.fh.flush()

    def write(self, record: dict):
        self.writer.writerow([_fmt(record.get(c)) for c in CSV_COLUMNS])
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {}
        for k, v in row.items():
            if v == "":
                rec[k] = None
            elif k == "step":
                rec[k] = int(v)
            else:
                rec[k] = float(v)
        out.append(rec)
    return out


def iterate(cfg: RunConfig, dataset: Dataset, state: TrainState | None = None,
            out_dir=None):
    """Train until ``cfg.trainer.steps``, yielding one record per evaluation.

    With ``out_dir`` the records go to ``metrics.csv`` and checkpoints to
    ``ckpt_<step>.insgen``.  Passing a restored ``state`` resumes it.
    """
    from .checkpoint import checkpoint_path, checkpoint_save

    resumed = state is not None
    if state is None:
        state = init_state(cfg, dataset)
    tr = cfg.trainer
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out_dir / "metrics.csv", append=resumed)
        if not resumed:
            checkpoint_save(state, cfg, checkpoint_path(out_dir, state.step))
    try:
        while state.step < tr.steps:
            try:
                parts = train_iteration(state, cfg, dataset)
            except TrainingDiverged as exc:
                if out_dir is not None:
                    dump = {"step": exc.step, "parts": exc.parts}
                    (out_dir / "diverged.json").write_text(json.dumps(dump, indent=2))
                raise
            if state.step % tr.eval_every == 0:
                record = {"step": state.step, **{k: parts.get(k) for k in LOSS_COLUMNS}}
                record.update(evaluate(state, cfg, dataset))
                if metrics is not None:
                    metrics.write(record)
                yield record
            if out_dir is not None and (state.step % tr.ckpt_every == 0 or state.step == tr.steps):
                checkpoint_save(state, cfg, checkpoint_path(out_dir, state.step))
    finally:
        if metrics is not None:
            metrics.close()
    return state


def run(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None,
        state: TrainState | None = None) -> tuple[list[dict], TrainState]:
    """Run training to completion; returns the records and the final state."""
    if dataset is None:
        dataset = build_dataset(cfg)
    gen = iterate(cfg, dataset, state, out_dir)
    records = []
    while True:
        try:
            records.append(next(gen))
        except StopIteration as stop:
            return records, stop.value
