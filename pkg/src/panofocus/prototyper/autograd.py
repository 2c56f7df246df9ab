"""
Minimal reverse-mode differentiation over numpy arrays.

Covers exactly the operations the prototyper uses: matmul, broadcasting
arithmetic, reductions, row/column slicing, concatenation, softmax, GELU,
logistic binary cross-entropy, and elementwise min/max. Not a general
autodiff engine.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# longdouble is kept as is so finite-difference oracles can run in extended precision
_FLOAT_TYPES = (np.dtype(np.float64), np.dtype(np.longdouble))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _prev: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev = tuple(_prev)
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic ------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return _make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return _make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return _make(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return _make(self.data @ other.data, (self, other), bw)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) @ self

    @property
    def T(self) -> "Tensor":
        return _make(self.data.T, (self,), lambda g: self._accumulate(g.T))

    def __getitem__(self, idx) -> "Tensor":
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return _make(self.data[idx], (self,), bw)

    def reshape(self, *shape) -> "Tensor":
        return _make(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(self.shape)))

    # reductions & pointwise ------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: self._accumulate(g * out))

    def log(self) -> "Tensor":
        return _make(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: self._accumulate(g * (1.0 - out**2)))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _prev=parents, _backward=backward)
    return Tensor(data)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    arr = np.array(x)
    return Tensor(arr if arr.dtype in _FLOAT_TYPES else arr.astype(np.float64), requires_grad=True)


def concat(parts: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def gelu(x: ArrayLike) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    u = _SQRT_2_OVER_PI * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x.data**2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du))

    return _make(out, (x,), bw)


def bce_with_logits(logits: ArrayLike, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"target shape {y.shape} does not match logits {z.shape}")
    out = np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))

    def bw(g):
        z._accumulate(g * (sigmoid(z.data) - y))

    return _make(out, (z,), bw)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return -maximum(-as_tensor(a), -as_tensor(b))
