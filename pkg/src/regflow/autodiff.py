"""Small define-by-run reverse-mode autodiff over dense float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded when at least one input requires a gradient. ``backward`` then
walks the tape in reverse and accumulates vector-Jacobian products.

Broadcasting is limited to the bias-add pattern: the smaller operand's shape
must be a suffix of the larger one's (a scalar is a suffix of everything).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "forward_op",
    "backward",
    "grad_check",
    "no_tape",
    "OP_KINDS",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A leaf tensor; trainable parameters receive gradients."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable


class _Node:
    __slots__ = ("out", "parents", "vjp", "kind")

    def __init__(self, out, parents, vjp, kind):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.kind = kind


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, out: Tensor, parents: tuple, vjp: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, parents, vjp, kind))


class no_tape:
    """Suspend recording inside a tape context (e.g. for evaluation)."""

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(kind, out, parents, vjp)
    return out


def _suffix_ok(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _check_bias(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _suffix_ok(a.shape, b.shape) or _suffix_ok(b.shape, a.shape):
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# --- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """2-D matrix product, or a batched product with identical batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def vjp(g):
        at = np.swapaxes(ad, -1, -2)
        # a single-row a makes a^T g an outer product; broadcasting is faster and bit-identical
        gb = at * g if ad.shape[-2] == 1 else at @ g
        return g @ np.swapaxes(bd, -1, -2), gb

    return _make("matmul", ad @ bd, (a, b), vjp)


# --- unary ------------------------------------------------------------------


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise FloatingPointError("log: non-positive input")
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), vjp)


# --- reductions and structure ----------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", value, ts, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from exc
    return _make("reshape", value, (a,), lambda g: (g.reshape(old),))


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; gradients scatter back into zeros."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make("slice", np.array(a.data[index]), (a,), vjp)


_FORWARD = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sum": sum_,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "scale": scale,
    "neg": neg,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "square": square,
    "reshape": reshape,
    "slice": slice_,
}
OP_KINDS = frozenset(_FORWARD)


def forward_op(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("matmul", [a, b])``.

    Non-tensor arguments (the scalar of ``scale``, the axis of ``sum``) go
    through keyword arguments or trail the tensor inputs.
    """
    try:
        fn = _FORWARD[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OP_KINDS)}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. the leaves recorded on ``tape``.

    Returns a map from leaf tensor to gradient array. Leaves listed in ``wrt``
    that the output does not depend on get zero gradients.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if output._tape is not tape:
        raise ValueError("backward: output was not produced on this tape")

    grads: dict[Tensor, np.ndarray] = {output: np.ones(output.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg

    leaves = {t: np.array(g, dtype=np.float64) for t, g in grads.items() if t._tape is None}
    if wrt is not None:
        leaves = {t: leaves.get(t, np.zeros(t.shape)) for t in wrt}
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Largest relative gap between the tape gradient and central differences.

    The relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    leaf = Parameter(x0)
    with Tape() as tape:
        out = f(leaf)
    if out._tape is tape:
        analytic = backward(tape, out, wrt=[leaf])[leaf].reshape(-1)
    else:  # output does not depend on the point
        analytic = np.zeros(x0.size)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    with no_tape():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += step
            xm = flat.copy()
            xm[i] -= step
            fp = float(f(Tensor(xp.reshape(x0.shape))))
            fm = float(f(Tensor(xm.reshape(x0.shape))))
            numeric[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
