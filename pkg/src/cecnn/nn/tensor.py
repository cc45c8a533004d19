"""Numpy-backed tensors with reverse-mode differentiation.

Every operation records its parents and a closure that pushes the output
gradient back to them.  ``Tensor.backward`` resets every gradient buffer in
the graph before accumulating, so calling it twice on the same graph gives
the same gradients rather than doubling them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from ..errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor detached from any parameter")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -----------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / b.data**2, b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)
        return Tensor._from_op(
            a.data**e, (a,), lambda g: a._accumulate(g * e * a.data ** (e - 1.0))
        )

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._from_op(a.data @ b.data, (a, b), bw)

    # -- shape ops --------------------------------------------------------------
    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._from_op(a.data.T, (a,), lambda g: a._accumulate(g.T))

    def reshape(self, *shape) -> "Tensor":
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._from_op(
            a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape))
        )

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._from_op(a.data[idx], (a,), bw)

    # -- reductions -------------------------------------------------------------
    def sum(self, axis=None) -> "Tensor":
        a = self

        def bw(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

        return Tensor._from_op(a.data.sum(axis=axis), (a,), bw)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # -- elementwise maps -------------------------------------------------------
    def unary(self, value: np.ndarray, local_grad: np.ndarray) -> "Tensor":
        """Wrap an elementwise map whose derivative is already evaluated."""
        a = self
        return Tensor._from_op(value, (a,), lambda g: a._accumulate(g * local_grad))

    def exp(self) -> "Tensor":
        v = np.exp(self.data)
        return self.unary(v, v)

    def log(self) -> "Tensor":
        return self.unary(np.log(self.data), 1.0 / self.data)

    def tanh(self) -> "Tensor":
        v = np.tanh(self.data)
        return self.unary(v, 1.0 - v * v)

    def sigmoid(self) -> "Tensor":
        v = special.expit(self.data)
        return self.unary(v, v * (1.0 - v))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self.unary(np.where(mask, self.data, 0.0), mask.astype(np.float64))

    def clip(self, lo: float, hi: float) -> "Tensor":
        inside = (self.data >= lo) & (self.data <= hi)
        return self.unary(np.clip(self.data, lo, hi), inside.astype(np.float64))

    def normal_cdf(self) -> "Tensor":
        return self.unary(special.ndtr(self.data), _normal_pdf(self.data))

    def normal_quantile(self) -> "Tensor":
        v = special.ndtri(self.data)
        return self.unary(v, 1.0 / _normal_pdf(v))

    def log_normal_cdf(self) -> "Tensor":
        v = special.log_ndtr(self.data)
        # d/dx log Phi(x) = phi(x) / Phi(x), evaluated in log space for the left tail
        return self.unary(v, np.exp(_log_normal_pdf(self.data) - v))


def _normal_pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _log_normal_pdf(x: np.ndarray) -> np.ndarray:
    return -0.5 * x * x - 0.5 * np.log(2.0 * np.pi)


def stack(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._from_op(data, ts, bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
