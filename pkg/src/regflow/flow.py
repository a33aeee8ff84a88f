"""Continuous normalizing flow with an MLP velocity field and fixed-step RK4.

The velocity field ``g(z, t)`` is a tanh MLP evaluated on ``[z, t]``. Its
weights come from a flat vector whose layout is fixed by :class:`FlowConfig`.
The vector may be a single ``(P,)`` row shared by all points, or a ``(B, P)``
batch holding one weight vector per point (the hypernetwork case).

Log densities use the exact Jacobian trace, obtained from ``d`` forward-mode
directional derivatives written in tape operations, so the trace itself is
differentiable and RK4 can be unrolled on the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAX_TRACE_DIM = 8
LOG_2PI = math.log(2.0 * math.pi)


class FlowBlowupError(FloatingPointError):
    """Raised when the integrated state stops being finite."""


@dataclass(frozen=True)
class FlowConfig:
    target_dim: int = 2
    hidden_widths: tuple[int, ...] = (128, 128, 128)
    t0: float = 0.0
    t1: float = 1.0
    rk4_steps: int = 20
    prior: str = "standard-normal"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.target_dim < 1:
            raise ValueError("target_dim must be >= 1")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden_widths must be a non-empty list of positive ints, got {self.hidden_widths}")
        if not self.t1 > self.t0:
            raise ValueError(f"need t1 > t0, got t0={self.t0}, t1={self.t1}")
        if self.rk4_steps < 1:
            raise ValueError("rk4_steps must be >= 1")
        if self.prior != "standard-normal":
            raise ValueError(f"unsupported prior {self.prior!r}")


class LayoutEntry(NamedTuple):
    layer: int
    role: str  # "weight" or "bias"
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout_for(config: FlowConfig) -> tuple[LayoutEntry, ...]:
    """Canonical weight layout: per layer, weight (in, out) then bias (out,)."""
    dims = [config.target_dim + 1, *config.hidden_widths, config.target_dim]
    entries = []
    offset = 0
    for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        entries.append(LayoutEntry(layer, "weight", (n_in, n_out), offset))
        offset += n_in * n_out
        entries.append(LayoutEntry(layer, "bias", (n_out,), offset))
        offset += n_out
    return tuple(entries)


def layout_size(layout) -> int:
    return sum(e.size for e in layout)


@dataclass
class FlowParams:
    """Flat dynamics-network weights ``theta`` plus their layout.

    ``theta`` is a ``(P,)`` vector or a ``(B, P)`` batch, numpy or Tensor.
    """

    theta: object
    layout: tuple[LayoutEntry, ...] = field(repr=False)

    def __post_init__(self):
        n = layout_size(self.layout)
        shape = self.theta.shape
        if not shape or shape[-1] != n or len(shape) > 2:
            raise ValueError(f"theta has shape {tuple(shape)}, layout needs trailing length {n}")

    @classmethod
    def zeros(cls, config: FlowConfig) -> "FlowParams":
        layout = layout_for(config)
        return cls(np.zeros(layout_size(layout)), layout)

    @classmethod
    def random(cls, config: FlowConfig, rng: np.random.Generator, scale: float = 0.5) -> "FlowParams":
        """Random weights with fan-in scaling, mostly for tests and demos."""
        layout = layout_for(config)
        theta = np.empty(layout_size(layout))
        for e in layout:
            fan_in = e.shape[0] if e.role == "weight" else 1
            theta[e.offset:e.offset + e.size] = rng.normal(0.0, scale / math.sqrt(fan_in), e.size)
        return cls(theta, layout)

    @property
    def batched(self) -> bool:
        return len(self.theta.shape) == 2


class LinearDynamics:
    """``g(z, t) = a * z``; closed-form reference dynamics."""

    def __init__(self, a: float, target_dim: int):
        self.a = float(a)
        self.target_dim = target_dim

    def __call__(self, z: Tensor, t: float, with_trace: bool = True):
        v = ad.scale(z, self.a)
        if not with_trace:
            return v, None
        return v, Tensor(np.full(z.shape[:-1] + (1,), self.a * self.target_dim))


class MLPDynamics:
    """Velocity field ``g_theta(z, t)``: tanh MLP on ``[z, t]``, linear output.

    With shared weights ``z`` is ``(B, d)``; with per-point weights it is
    ``(B, 1, d)`` and every product is batched.
    """

    def __init__(self, params: FlowParams, config: FlowConfig):
        if layout_size(params.layout) != layout_size(layout_for(config)):
            raise ValueError("theta length does not match the layout of this FlowConfig")
        self.config = config
        self.target_dim = d = config.target_dim
        theta = params.theta if isinstance(params.theta, Tensor) else Tensor(params.theta)
        self.batched = theta.ndim == 2
        self.weights = []
        self.biases = []
        for e in params.layout:
            if self.batched:
                b = theta.shape[0]
                piece = theta[:, e.offset:e.offset + e.size]
                shape = (b,) + e.shape if e.role == "weight" else (b, 1) + e.shape
            else:
                piece = theta[e.offset:e.offset + e.size]
                shape = e.shape
            (self.weights if e.role == "weight" else self.biases).append(piece.reshape(shape))

        # Direction vectors for the trace: row k of the first weight matrix is
        # d(pre-activation)/dz_k; column k of the output matrix reads out dg_k.
        w_in, w_out = self.weights[0], self.weights[-1]
        self._rows = []
        self._cols = []
        self._paired = None
        if d > MAX_TRACE_DIM:
            return
        for k in range(d):
            if self.batched:
                self._rows.append(w_in[:, k:k + 1, :])
                self._cols.append(w_out[:, :, k].reshape((w_out.shape[0], 1, w_out.shape[1])))
            else:
                self._rows.append(w_in[k])
                self._cols.append(w_out[:, k])
        if len(self.weights) == 2:
            # one hidden layer: Tr = sum_j (1 - h_j^2) * sum_k W1[k, j] * W2[j, k]
            paired = self._rows[0] * self._cols[0]
            for k in range(1, d):
                paired = paired + self._rows[k] * self._cols[k]
            self._paired = paired

    def __call__(self, z: Tensor, t: float, with_trace: bool = True):
        tcol = Tensor(np.full(z.shape[:-1] + (1,), float(t)))
        u = ad.concat([z, tcol], axis=-1)
        hidden = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            u = ad.tanh(ad.add(ad.matmul(u, w), b))
            hidden.append(u)
        v = ad.add(ad.matmul(u, self.weights[-1]), self.biases[-1])
        if not with_trace:
            return v, None
        return v, self._trace(hidden)

    def _trace(self, hidden):
        if self.target_dim > MAX_TRACE_DIM:
            raise ValueError(f"exact trace supports target_dim <= {MAX_TRACE_DIM}, got {self.target_dim}")
        slopes = [1.0 - ad.square(h) for h in hidden]
        if self._paired is not None:
            return ad.sum_(slopes[0] * self._paired, axis=-1, keepdims=True)
        total = None
        for k in range(self.target_dim):
            dh = slopes[0] * self._rows[k]
            for w, s in zip(self.weights[1:-1], slopes[1:]):
                dh = s * ad.matmul(dh, w)
            tr_k = ad.sum_(dh * self._cols[k], axis=-1, keepdims=True)
            total = tr_k if total is None else total + tr_k
        return total


def as_dynamics(theta, config: FlowConfig):
    if isinstance(theta, (LinearDynamics, MLPDynamics)):
        return theta
    if not isinstance(theta, FlowParams):
        theta = FlowParams(theta, layout_for(config))
    return MLPDynamics(theta, config)


def _prepare_points(dyn, points, d: int):
    """Return (state tensor, restore-shape fn) for 1-D or 2-D point input."""
    p = points if isinstance(points, Tensor) else Tensor(points)
    single = p.ndim == 1
    if p.shape[-1] != d or p.ndim > 2:
        raise ad.ShapeError(f"expected points of dimension {d}, got shape {p.shape}")
    if single:
        p = p.reshape((1, d))
    n = p.shape[0]
    batched = getattr(dyn, "batched", False)
    if batched:
        if dyn.weights[0].shape[0] != n:
            raise ad.ShapeError(f"{dyn.weights[0].shape[0]} weight vectors for {n} points")
        p = p.reshape((n, 1, d))

    def restore(z, ld=None):
        z = z.reshape((n, d))
        if single:
            z = z.reshape((d,))
        if ld is None:
            return z
        ld = ld.reshape((n,))
        return z, (ld.reshape(()) if single else ld)

    return p, restore


def _rk4(dyn, z: Tensor, t_start: float, t_end: float, steps: int, with_trace: bool):
    h = (t_end - t_start) / steps
    ld = None
    for i in range(steps):
        t = t_start + i * h
        k1, r1 = dyn(z, t, with_trace)
        k2, r2 = dyn(z + k1 * (h / 2), t + h / 2, with_trace)
        k3, r3 = dyn(z + k2 * (h / 2), t + h / 2, with_trace)
        k4, r4 = dyn(z + k3 * h, t + h, with_trace)
        z = z + (k1 + k4 + (k2 + k3) * 2.0) * (h / 6)
        if with_trace:
            inc = (r1 + r4 + (r2 + r3) * 2.0) * (h / 6)
            ld = inc if ld is None else ld + inc
        if not np.all(np.isfinite(z.data)):
            raise FlowBlowupError(
                f"non-finite ODE state at t={t + h:.4g} (step {i + 1}/{steps}); reduce the step size or learning rate"
            )
    return z, ld


def dynamics_eval(theta, z, t: float, config: FlowConfig) -> Tensor:
    """Velocity ``g_theta(z, t)`` for one point ``z`` of shape ``(d,)`` or a batch."""
    dyn = as_dynamics(theta, config)
    state, restore = _prepare_points(dyn, z, config.target_dim)
    v, _ = dyn(state, t, with_trace=False)
    return restore(v)


def exact_trace(theta, z, t: float, config: FlowConfig) -> Tensor:
    """``Tr(dg/dz)`` at ``(z, t)``; differentiable w.r.t. theta."""
    if config.target_dim > MAX_TRACE_DIM:
        raise ValueError(f"exact trace supports target_dim <= {MAX_TRACE_DIM}, got {config.target_dim}")
    dyn = as_dynamics(theta, config)
    state, restore = _prepare_points(dyn, z, config.target_dim)
    _, tr = dyn(state, t, with_trace=True)
    n = state.shape[0]
    tr = tr.reshape((n,))
    return tr.reshape(()) if np.ndim(z.data if isinstance(z, Tensor) else z) == 1 else tr


def integrate_inverse(theta, y, config: FlowConfig):
    """Map ``y`` back to latent ``z`` (t1 -> t0) and accumulate ``-int Tr dt``.

    Returns ``(z, log_det)`` as Tensors.
    """
    dyn = as_dynamics(theta, config)
    state, restore = _prepare_points(dyn, y, config.target_dim)
    z, ld = _rk4(dyn, state, config.t1, config.t0, config.rk4_steps, with_trace=True)
    return restore(z, ld)


def integrate_forward(theta, z, config: FlowConfig) -> Tensor:
    """Push latent points through the flow (t0 -> t1)."""
    dyn = as_dynamics(theta, config)
    state, restore = _prepare_points(dyn, z, config.target_dim)
    y, _ = _rk4(dyn, state, config.t0, config.t1, config.rk4_steps, with_trace=False)
    return restore(y)


def standard_normal_log_prob(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return ad.scale(ad.sum_(ad.square(z), axis=-1), -0.5) - 0.5 * d * LOG_2PI


def log_prob(theta, y, config: FlowConfig) -> Tensor:
    """``log p(y) = log N(f^-1(y); 0, I) + log_det``."""
    z, ld = integrate_inverse(theta, y, config)
    return standard_normal_log_prob(z) + ld
