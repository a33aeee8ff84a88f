"""Mixture density network baseline with isotropic Gaussian components."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .hypernet import Standardizer, _as_rows
from .mlp import init_mlp, mlp_forward, mlp_size

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureParams:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    scales: np.ndarray  # (k,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        k = self.weights.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(k, -1)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if self.scales.shape[0] != k:
            raise ValueError(f"{k} weights but {self.scales.shape[0]} scales")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(self.scales <= 0):
            raise ValueError("mixture scales must be positive")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def permuted(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.weights[order], self.means[order], self.scales[order])


def _logsumexp(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp of an ``(N, k)`` tensor; shift is a constant."""
    top = a.data.max(axis=-1, keepdims=True)
    shifted = ad.sub(a, Tensor(np.broadcast_to(top, a.shape)))
    return ad.log(ad.sum_(ad.exp(shifted), axis=-1)) + Tensor(top[..., 0])


def mixture_log_prob_tensors(logits: Tensor, means: Tensor, log_scales: Tensor, y: np.ndarray) -> Tensor:
    """Differentiable ``log sum_k pi_k N(y; mu_k, sigma_k^2 I)``.

    Shapes: logits and log_scales ``(N, k)``, means ``(N, k*d)``, y ``(N, d)``.
    """
    n, k = logits.shape
    d = y.shape[1]
    diff = ad.sub(means, Tensor(np.tile(y, (1, k))))
    sq = ad.sum_(ad.reshape(ad.square(diff), (n, k, d)), axis=-1)
    log_norm = ad.scale(sq, -0.5) * ad.exp(ad.scale(log_scales, -2.0))
    log_comp = log_norm - ad.scale(log_scales, float(d)) - 0.5 * d * LOG_2PI
    log_w = ad.sub(logits, _broadcast_col(_logsumexp(logits), k))
    return _logsumexp(log_w + log_comp)


def _broadcast_col(v: Tensor, k: int) -> Tensor:
    # (N,) -> (N, k) by concatenation; keeps the gradient path without general broadcasting
    col = ad.reshape(v, (v.shape[0], 1))
    return ad.concat([col] * k, axis=1)


def mixture_log_prob(params: MixtureParams, y) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1 and y.shape[0] == params.dim
    rows = _as_rows(y, params.dim, "y")
    n = len(rows)
    logits = Tensor(np.tile(np.log(np.maximum(params.weights, 1e-300)), (n, 1)))
    means = Tensor(np.tile(params.means.reshape(-1), (n, 1)))
    log_scales = Tensor(np.tile(np.log(params.scales), (n, 1)))
    with ad.no_tape():
        lp = mixture_log_prob_tensors(logits, means, log_scales, rows).data
    return float(lp[0]) if single else lp


def mdn_sample(params: MixtureParams, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    j = rng.choice(params.k, size=n, p=params.weights / params.weights.sum())
    eps = rng.standard_normal((n, params.dim))
    return params.means[j] + params.scales[j][:, None] * eps


class MdnModel:
    """``x -> (pi, mu, sigma)``; head holds k logits, k*d means, k log-scales."""

    kind = "mdn"

    def __init__(self, cond_dim: int, target_dim: int, k: int, hidden_widths=(64, 64), seed: int = 0,
                 standardizer: Standardizer | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.cond_dim = int(cond_dim)
        self.target_dim = int(target_dim)
        self.k = int(k)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.sizes = (self.cond_dim, *self.hidden_widths, self.k * (self.target_dim + 2))
        self.psi = Parameter(init_mlp(self.sizes, np.random.default_rng(seed)))
        self.standardizer = standardizer or Standardizer.identity(self.cond_dim, self.target_dim)

    @property
    def n_params(self) -> int:
        return mlp_size(self.sizes)

    def head(self, x, psi: Tensor | None = None):
        """Raw (logits, means, log_scales) tensors in standardized units."""
        psi = self.psi if psi is None else psi
        xs = Tensor(self.standardizer.x(_as_rows(x, self.cond_dim, "x")))
        out = mlp_forward(psi, xs, self.sizes)
        k, d = self.k, self.target_dim
        return out[:, :k], out[:, k:k + k * d], out[:, k + k * d:]

    def log_prob(self, x, y, psi: Tensor | None = None) -> Tensor:
        y = _as_rows(y, self.target_dim, "y")
        logits, means, log_scales = self.head(x, psi)
        if logits.shape[0] != len(y):
            raise ad.ShapeError(f"{logits.shape[0]} inputs for {len(y)} targets")
        return mixture_log_prob_tensors(logits, means, log_scales, self.standardizer.y(y)) + self.standardizer.log_det

    def mixture(self, x) -> MixtureParams:
        """Mixture parameters for one input, in target units."""
        with ad.no_tape():
            logits, means, log_scales = (t.data[0] for t in self.head(_as_rows(x, self.cond_dim, "x")[:1]))
        w = np.exp(logits - logits.max())
        st = self.standardizer
        mu = means.reshape(self.k, self.target_dim) * st.y_scale + st.y_shift
        return MixtureParams(w / w.sum(), mu, np.exp(log_scales) * st.y_scale[0])

    def log_prob_grid(self, x, ys) -> np.ndarray:
        return np.atleast_1d(mixture_log_prob(self.mixture(x), _as_rows(ys, self.target_dim, "y")))

    def sample(self, x, n: int, seed: int) -> np.ndarray:
        return mdn_sample(self.mixture(x), n, seed)


def mdn_forward(model: MdnModel, x) -> MixtureParams:
    x = np.asarray(x, dtype=np.float64)
    if x.reshape(-1).shape[0] != model.cond_dim:
        raise ad.ShapeError(f"x has dimension {x.size}, model expects {model.cond_dim}")
    return model.mixture(x.reshape(1, -1))
