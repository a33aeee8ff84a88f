"""Hypernetwork that emits the full weight vector of a CNF for each input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flow
from .autodiff import Parameter, Tensor
from .flow import FlowConfig, FlowParams, layout_for, layout_size
from .mlp import init_mlp, mlp_forward, mlp_size

__all__ = [
    "Standardizer",
    "HyperNetwork",
    "layout_for",
    "generate_weights",
    "conditional_log_prob",
    "conditional_sample",
]


@dataclass
class Standardizer:
    """Fixed affine maps applied to inputs and targets.

    Defaults to the identity. The density correction for the target map is
    ``-sum(log y_scale)``.
    """

    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def identity(cls, c: int, d: int) -> "Standardizer":
        return cls(np.zeros(c), np.ones(c), np.zeros(d), np.ones(d))

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "Standardizer":
        # one common target scale keeps isotropic components isotropic
        xs = x.std(axis=0)
        ys = float(y.std(axis=0).mean()) or 1.0
        return cls(x.mean(axis=0), np.where(xs > 0, xs, 1.0), y.mean(axis=0), np.full(y.shape[1], ys))

    def __post_init__(self):
        for name in ("x_shift", "x_scale", "y_shift", "y_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if np.any(self.x_scale <= 0) or np.any(self.y_scale <= 0):
            raise ValueError("standardizer scales must be positive")

    def x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_shift) / self.x_scale

    def y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_shift) / self.y_scale

    def y_inverse(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_scale + self.y_shift

    @property
    def log_det(self) -> float:
        return -float(np.log(self.y_scale).sum())


def _as_rows(a, width: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1) if a.shape[0] == width else a.reshape(-1, 1)
    if a.shape[-1] != width:
        raise ad.ShapeError(f"{name} has dimension {a.shape[-1]}, model expects {width}")
    return a


class HyperNetwork:
    """``x -> theta``: tanh MLP with a single linear head, scaled by ``output_scale``.

    All weights sit in the flat trainable vector ``psi``.
    """

    kind = "regflow"

    def __init__(
        self,
        cond_dim: int,
        flow_config: FlowConfig,
        hidden_widths=(64, 64),
        output_scale: float = 1e-2,
        seed: int = 0,
        standardizer: Standardizer | None = None,
    ):
        self.cond_dim = int(cond_dim)
        self.flow_config = flow_config
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.output_scale = float(output_scale)
        self.layout = layout_for(flow_config)
        self.n_theta = layout_size(self.layout)
        self.sizes = (self.cond_dim, *self.hidden_widths, self.n_theta)
        rng = np.random.default_rng(seed)
        self.psi = Parameter(init_mlp(self.sizes, rng))
        self.standardizer = standardizer or Standardizer.identity(self.cond_dim, flow_config.target_dim)

    @property
    def target_dim(self) -> int:
        return self.flow_config.target_dim

    @property
    def n_params(self) -> int:
        return mlp_size(self.sizes)

    def theta(self, x, psi: Tensor | None = None) -> Tensor:
        """Per-row flow weights, shape ``(N, P)``."""
        psi = self.psi if psi is None else psi
        xs = Tensor(self.standardizer.x(_as_rows(x, self.cond_dim, "x")))
        return ad.scale(mlp_forward(psi, xs, self.sizes), self.output_scale)

    def log_prob(self, x, y, psi: Tensor | None = None) -> Tensor:
        """``log p(y_i | x_i)`` for paired rows; shape ``(N,)``."""
        x = _as_rows(x, self.cond_dim, "x")
        y = _as_rows(y, self.target_dim, "y")
        if len(x) != len(y):
            raise ad.ShapeError(f"{len(x)} inputs for {len(y)} targets")
        theta = self.theta(x, psi)
        lp = flow.log_prob(FlowParams(theta, self.layout), self.standardizer.y(y), self.flow_config)
        return lp + self.standardizer.log_det

    def log_prob_grid(self, x, ys) -> np.ndarray:
        """Density of many targets under one input; no gradients."""
        with ad.no_tape():
            theta = self.theta(_as_rows(x, self.cond_dim, "x")).data[0]
            ys = _as_rows(ys, self.target_dim, "y")
            lp = flow.log_prob(FlowParams(theta, self.layout), self.standardizer.y(ys), self.flow_config)
        return lp.data + self.standardizer.log_det

    def sample(self, x, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        z = np.random.default_rng(seed).standard_normal((n, self.target_dim))
        with ad.no_tape():
            theta = self.theta(_as_rows(x, self.cond_dim, "x")).data[0]
            y = flow.integrate_forward(FlowParams(theta, self.layout), z, self.flow_config)
        return self.standardizer.y_inverse(y.data)


def generate_weights(model: HyperNetwork, x) -> FlowParams:
    """Flow weights for one input vector (``(P,)``) or a batch (``(N, P)``)."""
    single = np.ndim(x) == 1 and np.shape(x)[0] == model.cond_dim
    theta = model.theta(x)
    if single:
        theta = theta.reshape((model.n_theta,))
    return FlowParams(theta, model.layout)


def conditional_log_prob(model: HyperNetwork, x, y, config: FlowConfig | None = None) -> Tensor:
    if config is not None and config != model.flow_config:
        raise ValueError("flow config does not match the model")
    single = np.ndim(y) == 1 and np.shape(y)[0] == model.target_dim and np.ndim(x) == 1
    lp = model.log_prob(x, y)
    return lp.reshape(()) if single else lp


def conditional_sample(model: HyperNetwork, x, n: int, seed: int) -> np.ndarray:
    return model.sample(x, n, seed)


def standard_normal_nll(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * (y * y).sum(axis=-1) + 0.5 * y.shape[-1] * math.log(2 * math.pi)
