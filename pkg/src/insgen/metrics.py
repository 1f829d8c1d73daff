"""Evaluation: Fréchet distance of fitted Gaussians, mode coverage, memorization, logit traces.

The Fréchet distance here is computed on raw coordinates, so it is an
analogue of FID for low-dimensional data rather than FID itself.
Covariances use 1/M normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

SYM_TOL = 1e-12
EIG_TOL = 1e-10


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(samples) -> GaussianFit:
    x = np.asarray(getattr(samples, "data", samples), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"fit_gaussian needs at least 2 rows, got shape {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / x.shape[0]
    return GaussianFit(mu, 0.5 * (cov + cov.T), x.shape[0])


def matrix_sqrt_psd(s, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negative eigenvalues clipped."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    scale = max(1.0, np.abs(s).max())
    if np.abs(s - s.T).max() > sym_tol * scale:
        raise ValueError("matrix_sqrt_psd: input is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    # Tr((S_a S_b)^(1/2)) == Tr((R S_b R)^(1/2)) with R = S_a^(1/2), which is symmetric
    root_a = matrix_sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T)))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


def frechet_between(samples_a, samples_b) -> float:
    return frechet_distance(fit_gaussian(samples_a), fit_gaussian(samples_b))


def mode_coverage(samples, centers, sigma: float, hq_radius_mult: float = 3.0) -> dict:
    """Modes with a nearby sample, and the fraction of samples that are near their mode."""
    x = np.asarray(getattr(samples, "data", samples), dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ValueError("mode_coverage needs at least one center")
    if x.shape[0] == 0:
        return {"covered": 0, "hq_fraction": 0.0}
    dist, nearest = cKDTree(centers).query(x)
    near = dist <= hq_radius_mult * sigma
    covered = int(np.unique(nearest[near]).size)
    return {"covered": covered, "hq_fraction": float(near.mean())}


def _mean_nn(points, reference):
    dist, _ = cKDTree(reference).query(points)
    return float(dist.mean())


def memorization_gap(fakes, train, holdout) -> float:
    """Mean nearest-train distance minus mean nearest-holdout distance of the fakes."""
    fakes, train, holdout = (np.asarray(a, dtype=np.float64) for a in (fakes, train, holdout))
    for name, arr in (("fakes", fakes), ("train", train), ("holdout", holdout)):
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError(f"memorization_gap: {name} is empty")
    return _mean_nn(fakes, train) - _mean_nn(fakes, holdout)


def logit_trace(records) -> list[tuple[int, float, float]]:
    """(step, mean_real_logit, mean_fake_logit) for every record in order."""
    return [(int(r["step"]), float(r["mean_real_logit"]), float(r["mean_fake_logit"]))
            for r in records]


def logit_separation(trace) -> dict:
    """Mean real-minus-fake gap and the fraction of points where it is positive."""
    if not trace:
        return {"mean_gap": 0.0, "positive_fraction": 0.0}
    gaps = np.array([real - fake for _, real, fake in trace])
    return {"mean_gap": float(gaps.mean()), "positive_fraction": float((gaps > 0).mean())}
