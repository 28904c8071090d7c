"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every differentiable op executed while it is active.
``tape.backward(loss)`` walks the records in exact reverse order and
accumulates gradients into leaf tensors (``requires_grad=True``) and
:class:`Param` objects.

Arrays are float32 unless a float64 array is passed in explicitly, which the
gradient-check tests use to keep finite differences meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if dtype is not None:
        return np.asarray(x, dtype=dtype)
    if isinstance(x, (np.ndarray, np.generic)) and x.dtype in (np.float32, np.float64):
        return np.asarray(x)
    return np.asarray(x, dtype=np.float32)


class Tensor:
    """An immutable numeric array, optionally a differentiation leaf."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None if not isinstance(self, Param) else np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Param(Tensor):
    """Trainable tensor with gradient buffer and Adam moments."""

    __slots__ = ("m", "v", "t")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def assign(self, data) -> None:
        data = as_array(data, self.data.dtype)
        if data.shape != self.data.shape:
            raise DimensionError(f"cannot assign {data.shape} into {self.name} {self.data.shape}")
        self.data = data.copy()


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


_ACTIVE: list["Tape"] = []


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {}
        produced = {id(n.out) for n in self.nodes}
        grads[id(loss)] = np.ones_like(loss.data) if seed is None else as_array(seed, loss.data.dtype)
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.data.dtype, copy=False)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def make(data: np.ndarray, inputs: Sequence, backward, op: str = "") -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    inputs = tuple(t for t in inputs)
    track = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    tape = active_tape()
    if track and tape is not None:
        tensors = tuple(t if isinstance(t, Tensor) else Tensor(t) for t in inputs)
        tape.record(Node(out, tensors, backward, op))
    return out


def _tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is None:
        return Tensor(as_array(x))
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; a bare scalar or list takes the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _tensor(b, a.data) if np.ndim(b) == 0 else _tensor(b)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return (_tensor(a, b.data) if np.ndim(a) == 0 else _tensor(a)), b
    return _tensor(a), _tensor(b)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    a_, b_ = a.data, b.data
    return make(a_ + b_, (a, b), lambda g: (unbroadcast(g, a_.shape), unbroadcast(g, b_.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    a_, b_ = a.data, b.data
    return make(a_ - b_, (a, b), lambda g: (unbroadcast(g, a_.shape), unbroadcast(-g, b_.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    a_, b_ = a.data, b.data
    out = a_ * b_
    return make(
        out, (a, b),
        lambda g: (unbroadcast(g * b_, a_.shape), unbroadcast(g * a_, b_.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    a_, b_ = a.data, b.data
    return make(
        a_ / b_, (a, b),
        lambda g: (unbroadcast(g / b_, a_.shape), unbroadcast(-g * a_ / (b_ * b_), b_.shape)),
        "div",
    )


def _unary(x, fwd, dfdx, op) -> Tensor:
    x = _tensor(x)
    xd = x.data
    y = fwd(xd)
    return make(y, (x,), lambda g: (g * dfdx(xd, y),), op)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda x_, y: y, "exp")


def log(x) -> Tensor:
    return _unary(x, np.log, lambda x_, y: 1.0 / x_, "log")


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda x_, y: 0.5 / y, "sqrt")


def square(x) -> Tensor:
    return _unary(x, np.square, lambda x_, y: 2.0 * x_, "square")


def tabs(x) -> Tensor:
    return _unary(x, np.abs, lambda x_, y: np.sign(x_), "abs")


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda x_, y: np.cos(x_), "sin")


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda x_, y: -np.sin(x_), "cos")


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda x_, y: (x_ > 0).astype(x_.dtype), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so large |v| never overflows exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda x_, y: y * (1.0 - y), "sigmoid")


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def clamp_min(x, lo: float) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, lo), lambda x_, y: (x_ > lo).astype(x_.dtype), "clamp_min")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------- reductions, shapes


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = _tensor(x)
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = _tensor(x)
    old = x.shape
    return make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (unbroadcast(g, old),), "broadcast")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return make(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take_rows(x, idx: np.ndarray) -> Tensor:
    x = _tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make(x.data[idx], (x,), back, "take_rows")


def slice_last(x, stop: int) -> Tensor:
    """Keep the first ``stop`` entries along the last axis."""
    x = _tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., :stop] = g
        return (out,)

    return make(x.data[..., :stop].copy(), (x,), back, "slice_last")


def crop2d(x, h: int, w: int) -> Tensor:
    x = _tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., :h, :w] = g
        return (out,)

    return make(x.data[..., :h, :w].copy(), (x,), back, "crop2d")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    a_, b_ = a.data, b.data
    if a_.shape[-1] != b_.shape[0 if b_.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch: {a_.shape} @ {b_.shape}")

    def back(g):
        if b_.ndim == 1:
            return np.multiply.outer(g, b_), a_.T @ g if a_.ndim == 2 else None
        return g @ b_.T, a_.reshape(-1, a_.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return make(a_ @ b_, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``y = x W + b`` for ``x`` of shape (B, I) or (I,)."""
    x = _tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
