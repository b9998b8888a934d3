"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar Tensor walks the tape in reverse topological
order. No op mutates its inputs, so replay is deterministic. Custom ops
(the rasterizer, the hash encoder) plug in analytic adjoints through
``custom_op``.
"""
from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-traverse the tape from this scalar tensor."""
        if self.data.size != 1:
            raise ShapeMismatchError("backward() requires a scalar tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = bw if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        def bw(g):
            self._accumulate(-g)
        out._backward = bw if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = bw if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division only by constants")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeMismatchError("matmul expects 2-D tensors")
        out = Tensor(self.data @ other.data, parents=(self, other))
        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        out._backward = bw if out.requires_grad else None
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)
        out._backward = bw if out.requires_grad else None
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))
        def bw(g):
            self._accumulate(g.reshape(self.data.shape))
        out._backward = bw if out.requires_grad else None
        return out

    # ------------------------------------------------------------- reductions
    def sum(self):
        out = Tensor(self.data.sum(), parents=(self,))
        def bw(g):
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())
        out._backward = bw if out.requires_grad else None
        return out

    def mean(self):
        return self.sum() / self.data.size

    # ------------------------------------------------------------- activations
    def relu(self):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), parents=(self,))
        def bw(g):
            self._accumulate(g * mask)
        out._backward = bw if out.requires_grad else None
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))
        def bw(g):
            self._accumulate(g * (1.0 - y * y))
        out._backward = bw if out.requires_grad else None
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, parents=(self,))
        def bw(g):
            self._accumulate(g * y * (1.0 - y))
        out._backward = bw if out.requires_grad else None
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))
        def bw(g):
            self._accumulate(g * y)
        out._backward = bw if out.requires_grad else None
        return out

    def abs(self):
        s = np.sign(self.data)
        out = Tensor(np.abs(self.data), parents=(self,))
        def bw(g):
            self._accumulate(g * s)
        out._backward = bw if out.requires_grad else None
        return out

    def square(self):
        out = Tensor(self.data * self.data, parents=(self,))
        def bw(g):
            self._accumulate(g * 2.0 * self.data)
        out._backward = bw if out.requires_grad else None
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis`` with gradient splitting."""
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)
    out._backward = bw if out.requires_grad else None
    return out


def custom_op(inputs, out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an externally computed op into the tape.

    ``backward_fn(grad_out)`` must return one gradient array per input
    (or None for inputs without gradient).
    """
    inputs = tuple(inputs)
    out = Tensor(out_data, parents=inputs)
    def bw(g):
        grads = backward_fn(g)
        for t, gr in zip(inputs, grads):
            if t.requires_grad and gr is not None:
                t._accumulate(gr)
    out._backward = bw if out.requires_grad else None
    return out


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return (a - b).square().mean()


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"l1 shapes differ: {a.shape} vs {b.shape}")
    return (a - b).abs().mean()
