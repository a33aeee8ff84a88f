"""Evaluation metrics: average NLL, exact EMD between equal-size samples, DEMD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

EMD_MAX_POINTS = 4096
DEFAULT_REG = 1e-6


def as_sample_set(points) -> np.ndarray:
    """Validate a sample set and return it as an ``(n, d)`` float array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or len(pts) < 1:
        raise ValueError(f"a sample set needs shape (n, d) with n >= 1, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample set contains non-finite points")
    return pts


def avg_nll(log_probs) -> float:
    lp = np.asarray(log_probs, dtype=np.float64).reshape(-1)
    if lp.size == 0:
        raise ValueError("avg_nll needs at least one log-probability")
    if not np.all(np.isfinite(lp)):
        raise ValueError("avg_nll got non-finite log-probabilities")
    return float(-lp.mean())


def emd_exact(a, b) -> float:
    """Minimum mean Euclidean cost over perfect matchings (Hungarian solve)."""
    a, b = as_sample_set(a), as_sample_set(b)
    if len(a) != len(b):
        raise ValueError(f"emd_exact needs equal-size sets, got {len(a)} and {len(b)}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) > EMD_MAX_POINTS:
        raise ValueError(f"emd_exact is limited to {EMD_MAX_POINTS} points per set; subsample first")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


@dataclass
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # eigh rather than cholesky: covariance may be only semi-definite when reg=0
        vals, vecs = np.linalg.eigh(self.covariance)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return self.mean + rng.standard_normal((n, len(self.mean))) @ root.T


def gaussian_mle_fit(points, reg: float = DEFAULT_REG) -> GaussianFit:
    x = as_sample_set(points)
    if len(x) < 2:
        raise ValueError("gaussian_mle_fit needs at least 2 points")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / len(x)
    cov = 0.5 * (cov + cov.T) + reg * np.eye(x.shape[1])
    return GaussianFit(mean, cov)


def demd(model_samples, reg: float = DEFAULT_REG, seed: int = 0) -> float:
    """EMD between a sample and an equal-size draw from its Gaussian MLE fit."""
    x = as_sample_set(model_samples)
    fit = gaussian_mle_fit(x, reg)
    gaus = fit.sample(len(x), np.random.default_rng(seed))
    return emd_exact(x, gaus)


def demd_over_seeds(model_samples, seeds=range(10), reg: float = DEFAULT_REG) -> tuple[float, float]:
    vals = np.array([demd(model_samples, reg, s) for s in seeds])
    return float(vals.mean()), float(vals.std())
