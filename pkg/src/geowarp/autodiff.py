"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records how it was produced; ``backward``
replays the recorded operations in reverse, accumulating gradients into every
reachable tensor that requires them.  Only the primitives this package needs
are implemented: dense/batched algebra, elementwise maps, gather/scatter and
segment sums.  All data is kept in 64-bit floats.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "as_tensor",
    "backward",
    "zero_grad",
    "add",
    "mul",
    "matmul",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "elementwise",
    "reshape",
    "swapaxes",
    "gather",
    "concat",
    "segment_sum",
]


class Tensor:
    """Node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "parents", "vjps", "requires_grad", "name")

    # keep numpy scalars from absorbing Tensors into object arrays; binary
    # ops with ndarrays/np scalars then fall back to our reflected methods
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjps=(), requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad and not self.parents else "tensor")
        return f"Tensor({tag}, shape={self.data.shape})"

    # Operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        return gather(self, idx)


def constant(data, name=None) -> Tensor:
    return Tensor(data, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Arithmetic ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), vjps=(lambda g: -g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)
    return Tensor(
        a.data**p,
        parents=(a,),
        vjps=(lambda g: g * p * a.data ** (p - 1.0),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), vjps=(lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(
        np.where(mask, a.data, 0.0), parents=(a,), vjps=(lambda g: g * mask,)
    )


def elementwise(a: Tensor, fn: Callable, deriv: Callable) -> Tensor:
    """Apply ``fn`` elementwise; ``deriv(x)`` supplies d fn/dx for the vjp."""
    return Tensor(fn(a.data), parents=(a,), vjps=(lambda g: g * deriv(a.data),))


# Linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return Tensor(out, parents=(a, b), vjps=(vjp_a, vjp_b))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return Tensor(out, parents=(a,), vjps=(vjp,))


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        vjps=(lambda g: g.reshape(a.data.shape),),
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor(
        np.swapaxes(a.data, i, j),
        parents=(a,),
        vjps=(lambda g: np.swapaxes(g, i, j),),
    )


def gather(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return acc

    return Tensor(out, parents=(a,), vjps=(vjp,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(
        out, parents=tuple(tensors), vjps=tuple(make_vjp(k) for k in range(len(tensors)))
    )


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum a 1-d tensor into ``num_segments`` buckets given per-element ids."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if a.ndim != 1 or segment_ids.shape != a.data.shape:
        raise ValueError("segment_sum expects matching 1-d value/id arrays")
    out = np.zeros(num_segments, dtype=np.float64)
    np.add.at(out, segment_ids, a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g[segment_ids],))


# Backward pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, upstream=None) -> None:
    """Accumulate d(upstream . root)/d t into ``t.grad`` for reachable leaves.

    Intermediate gradients live in a per-call map, so a recorded graph can be
    replayed any number of times; only leaf tensors (no parents) receive
    ``.grad``, adding onto any existing buffer.  Call :func:`zero_grad` on
    persistent parameters between steps.  Never mutates tensor data.
    """
    if upstream is None:
        upstream = np.ones_like(root.data)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != root.data.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output shape {root.data.shape}"
        )
    if not root.requires_grad:
        return

    def deposit(node: Tensor, g: np.ndarray):
        node.grad = g if node.grad is None else node.grad + g

    grads: dict[int, np.ndarray] = {id(root): upstream}
    order = _topo_order(root)
    if not root.parents:
        deposit(root, upstream)
        return
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            if parent.parents:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            else:
                deposit(parent, pg)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
