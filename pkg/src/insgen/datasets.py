"""Synthetic mixture datasets, low-data subsampling and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    mode_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise DatasetError(f"dataset needs at least one row, got shape {samples.shape}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        if self.mode_labels is not None:
            labels = np.array(self.mode_labels, dtype=np.int64)
            if labels.shape != (samples.shape[0],):
                raise DatasetError("mode_labels must have one entry per sample")
            labels.flags.writeable = False
            object.__setattr__(self, "mode_labels", labels)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def centers(self) -> np.ndarray | None:
        c = self.meta.get("centers")
        return None if c is None else np.asarray(c, dtype=np.float64)


def _streams(seed: int):
    # separate label/noise streams keep generators count-monotone
    labels = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
    noise = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    return labels, noise


def _mixture(name, centers, sigma, count, seed, params):
    if sigma < 0:
        raise DatasetError("sigma must be non-negative")
    if count < 1:
        raise DatasetError("count must be positive")
    label_rng, noise_rng = _streams(seed)
    labels = label_rng.integers(0, len(centers), size=count)
    samples = centers[labels] + sigma * noise_rng.standard_normal((count, centers.shape[1]))
    meta = {"name": name, **params, "sigma": sigma, "count": count, "seed": seed,
            "centers": centers}
    return Dataset(samples, labels, meta)


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def grid_centers(side: int, spacing: float) -> np.ndarray:
    ticks = (np.arange(side) - (side - 1) / 2.0) * spacing
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def make_ring(modes: int = 8, radius: float = 2.0, sigma: float = 0.05,
              count: int = 4096, seed: int = 0) -> Dataset:
    """Gaussian blobs equally spaced on a circle, modes picked uniformly."""
    if modes < 1:
        raise DatasetError("modes must be at least 1")
    return _mixture("ring", ring_centers(modes, radius), sigma, count, seed,
                    {"modes": modes, "radius": radius})


def make_grid(side: int = 5, spacing: float = 1.0, sigma: float = 0.05,
              count: int = 4096, seed: int = 0) -> Dataset:
    if side < 1:
        raise DatasetError("side must be at least 1")
    return _mixture("grid", grid_centers(side, spacing), sigma, count, seed,
                    {"side": side, "spacing": spacing})


def _nearest(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def subsample(ds: Dataset, n: int, seed: int, mirror: bool = False) -> Dataset:
    """Keep ``n`` rows drawn without replacement; ``mirror`` appends first-coordinate flips.

    The rows left out are kept in ``meta["holdout"]`` for memorization checks.
    """
    if not 1 <= n <= len(ds):
        raise DatasetError(f"cannot keep {n} of {len(ds)} samples")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    order = rng.permutation(len(ds))
    keep, rest = order[:n], order[n:]
    samples = ds.samples[keep]
    labels = None if ds.mode_labels is None else ds.mode_labels[keep]
    if mirror:
        flipped = samples.copy()
        flipped[:, 0] = -flipped[:, 0]
        if labels is not None:
            centers = ds.centers
            flipped_labels = _nearest(flipped, centers) if centers is not None else labels
            labels = np.concatenate([labels, flipped_labels])
        samples = np.concatenate([samples, flipped])
    meta = {**ds.meta, "subsample": n, "mirror": mirror, "subsample_seed": seed,
            "indices": keep, "holdout": ds.samples[rest]}
    return Dataset(samples, labels, meta)


def save_table(ds_or_array, path):
    rows = ds_or_array.samples if isinstance(ds_or_array, Dataset) else np.asarray(ds_or_array)
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# dim={rows.shape[1]}\n")
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def load_table(path) -> Dataset:
    """Read one sample per CSV row; an optional ``# dim=<d>`` first line fixes the width."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    rows = []
    dim = None
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                if lineno == 0 and text[1:].strip().startswith("dim="):
                    dim = int(text[1:].strip()[4:])
                continue
            cells = next(csv.reader([text]))
            row_index = len(rows)
            if dim is None:
                dim = len(cells)
            if len(cells) != dim:
                raise DatasetError(f"{path}: row {row_index} has {len(cells)} columns, "
                                   f"expected {dim}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                col = next(i for i, c in enumerate(cells) if not _is_float(c))
                raise DatasetError(f"{path}: row {row_index} column {col} is not numeric: "
                                   f"{cells[col]!r}") from None
    if not rows:
        raise DatasetError(f"{path}: no samples")
    return Dataset(np.array(rows), None, {"name": "table", "path": str(path)})


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False
