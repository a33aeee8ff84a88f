"""Fully connected tanh networks whose weights live in one flat vector."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def mlp_shapes(sizes) -> list[tuple[tuple[int, int], int]]:
    return [((a, b), b) for a, b in zip(sizes[:-1], sizes[1:])]


def mlp_size(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_mlp(sizes, rng: np.random.Generator, last_gain: float = 1.0) -> np.ndarray:
    """Glorot-normal weights, zero biases."""
    chunks = []
    n_layers = len(sizes) - 1
    for i, ((a, b), nb) in enumerate(mlp_shapes(sizes)):
        std = math.sqrt(2.0 / (a + b))
        if i == n_layers - 1:
            std *= last_gain
        chunks.append(rng.normal(0.0, std, a * b))
        chunks.append(np.zeros(nb))
    return np.concatenate(chunks)


def mlp_forward(psi: Tensor, x: Tensor, sizes) -> Tensor:
    """Apply the network encoded by ``psi`` to a ``(N, sizes[0])`` batch."""
    if x.shape[-1] != sizes[0]:
        raise ad.ShapeError(f"input has {x.shape[-1]} features, network expects {sizes[0]}")
    off = 0
    h = x
    n_layers = len(sizes) - 1
    for i, ((a, b), nb) in enumerate(mlp_shapes(sizes)):
        w = psi[off:off + a * b].reshape((a, b))
        off += a * b
        bias = psi[off:off + nb]
        off += nb
        h = ad.add(ad.matmul(h, w), bias)
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h
