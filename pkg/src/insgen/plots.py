"""SVG figures for runs.  Output is byte-stable for identical inputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "insgen", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _column(records, key):
    steps, vals = [], []
    for r in records:
        v = r.get(key)
        if v is None or not np.isfinite(v):
            continue
        steps.append(r["step"])
        vals.append(v)
    return steps, vals


def scatter(samples, dataset, path, title="samples"):
    """Generated points over the training set and the mode centers."""
    fig, ax = plt.subplots(figsize=(5, 5))
    data = np.asarray(dataset.samples)
    ax.scatter(data[:, 0], data[:, 1], s=6, c="tab:blue", alpha=0.5, label="train")
    s = np.asarray(samples)
    ax.scatter(s[:, 0], s[:, 1], s=3, c="tab:orange", alpha=0.4, label="generated")
    if dataset.centers is not None:
        c = dataset.centers
        ax.scatter(c[:, 0], c[:, 1], marker="x", c="k", s=40, label="modes")
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)


def loss_curves(records, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("l_d", "l_g", "c_r_d", "c_f_d", "c_f_g", "r1"):
        steps, vals = _column(records, key)
        if steps:
            ax.plot(steps, vals, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def logit_trace(records, path):
    """Mean discriminator logit on real and generated samples over training."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("mean_real_logit", "real"), ("mean_fake_logit", "fake")):
        steps, vals = _column(records, key)
        ax.plot(steps, vals, label=label, lw=1)
    ax.axhline(0.0, c="grey", lw=0.5)
    ax.set_xlabel("step")
    ax.set_ylabel("mean logit")
    ax.legend(fontsize=7)
    return _save(fig, path)


def frechet_curve(records, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    steps, vals = _column(records, "frechet")
    ax.plot(steps, vals, lw=1)
    if vals and min(vals) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("Fréchet distance")
    return _save(fig, path)


def sweep_plot(lengths, medians, path, spreads=None):
    """Final Fréchet distance against fake-queue capacity."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(lengths, medians, marker="o")
    if spreads is not None:
        lo, hi = zip(*spreads)
        ax.fill_between(lengths, lo, hi, alpha=0.2)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("fake queue capacity")
    ax.set_ylabel("final Fréchet distance")
    return _save(fig, path)


def run_figures(records, samples, dataset, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        scatter(samples, dataset, out_dir / "samples.svg"),
        loss_curves(records, out_dir / "losses.svg"),
        logit_trace(records, out_dir / "logits.svg"),
        frechet_curve(records, out_dir / "frechet.svg"),
    ]
