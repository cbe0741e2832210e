"""Minimal reverse-mode automatic differentiation over numpy arrays.

The training loss is a modest composition of matrix products, exponentials,
softmaxes, and gathers, so a small tape is enough: wrap parameter arrays in
Var, run the ordinary forward code, call backward() on the scalar loss.

Every helper below dispatches on its inputs: with plain ndarrays it computes
with numpy and returns an ndarray, with Vars it records the operation. The
same forward code therefore serves inference (arrays in, arrays out) and
gradient evaluation. Gradient correctness is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    """A node in the tape: a value plus how to push gradients to parents."""

    # make ndarray <op> Var defer to the reflected methods below
    __array_ufunc__ = None

    __slots__ = ("value", "_parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self._parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _slice(self, key)

    def backward(self):
        """Accumulate gradients of this scalar into every ancestor's .grad."""
        if self.value.ndim != 0 and self.value.size != 1:
            raise ValueError("backward() requires a scalar")
        order = _toposort(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            for parent, vjp in node._parents:
                parent.grad = parent.grad + vjp(node.grad)


def _toposort(root: Var):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def val(x) -> np.ndarray:
    """Underlying ndarray of x, whether traced or not."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def detach(x) -> np.ndarray:
    """Constant copy of x; gradients do not flow through the result."""
    return np.array(val(x))


def _is_traced(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    if not _is_traced(a, b):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return Var(out, tuple(parents))


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    if not _is_traced(a, b):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return Var(out, tuple(parents))


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _is_traced(a, b):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)))
    if isinstance(b, Var):
        parents.append((b, lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)))
    return Var(out, tuple(parents))


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv
    if not _is_traced(a, b):
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g / o, s)))
    if isinstance(b, Var):
        parents.append(
            (b, lambda g, n=av, o=bv, s=bv.shape: _unbroadcast(-g * n / (o * o), s))
        )
    return Var(out, tuple(parents))


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _is_traced(a, b):
        return out
    parents = []
    if av.ndim == 2 and bv.ndim == 2:
        if isinstance(a, Var):
            parents.append((a, lambda g, o=bv: g @ o.T))
        if isinstance(b, Var):
            parents.append((b, lambda g, o=av: o.T @ g))
    elif av.ndim == 2 and bv.ndim == 1:
        if isinstance(a, Var):
            parents.append((a, lambda g, o=bv: np.outer(g, o)))
        if isinstance(b, Var):
            parents.append((b, lambda g, o=av: o.T @ g))
    elif av.ndim == 1 and bv.ndim == 2:
        if isinstance(a, Var):
            parents.append((a, lambda g, o=bv: o @ g))
        if isinstance(b, Var):
            parents.append((b, lambda g, o=av: np.outer(o, g)))
    elif av.ndim == 1 and bv.ndim == 1:
        if isinstance(a, Var):
            parents.append((a, lambda g, o=bv: g * o))
        if isinstance(b, Var):
            parents.append((b, lambda g, o=av: g * o))
    else:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    return Var(out, tuple(parents))


def power(x, p: float):
    xv = val(x)
    out = xv**p
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, o=xv: g * p * o ** (p - 1)),))


def exp(x):
    xv = val(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, o=out: g * o),))


def log1p(x):
    xv = val(x)
    out = np.log1p(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, o=xv: g / (1.0 + o)),))


def sqrt(x):
    xv = val(x)
    out = np.sqrt(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, o=out: g / (2.0 * o)),))


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the second operand."""
    av, bv = val(a), val(b)
    out = np.maximum(av, bv)
    if not _is_traced(a, b):
        return out
    awins = av > bv
    parents = []
    if isinstance(a, Var):
        parents.append(
            (a, lambda g, w=awins, s=av.shape: _unbroadcast(g * w, s))
        )
    if isinstance(b, Var):
        parents.append(
            (b, lambda g, w=~awins, s=bv.shape: _unbroadcast(g * w, s))
        )
    return Var(out, tuple(parents))


def summ(x, axis=None, keepdims=False):
    xv = val(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def vjp(g, shape=xv.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(out, ((x, vjp),))


def mean(x, axis=None, keepdims=False):
    xv = val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return div(summ(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape):
    xv = val(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, s=xv.shape: g.reshape(s)),))


def transpose(x):
    xv = val(x)
    out = xv.T
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g: g.T),))


def concat(parts, axis=0):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _is_traced(*parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        if isinstance(p, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parents.append((p, lambda g, sl=tuple(sl): g[sl]))
    return Var(out, tuple(parents))


def take(x, idx):
    """Gather rows x[idx] for an integer index array (duplicates allowed)."""
    xv = val(x)
    idx = np.asarray(idx, dtype=int)
    out = xv[idx]
    if not isinstance(x, Var):
        return out

    def vjp(g, shape=xv.shape, idx=idx):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return buf

    return Var(out, ((x, vjp),))


def _slice(x, key):
    """Basic slicing (ints and slices only); use take() for index arrays."""
    xv = val(x)
    out = xv[key]
    if not isinstance(x, Var):
        return out

    def vjp(g, shape=xv.shape, key=key):
        buf = np.zeros(shape)
        buf[key] += g
        return buf

    return Var(out, ((x, vjp),))


def repeat_rows(x, m: int):
    """Stack a length-c vector into an (m, c) matrix."""
    row = reshape(x, (1, -1))
    return matmul(np.ones((m, 1)), row)


def softmax_rows(x):
    """Row-wise softmax of a 2-D array, numerically stabilized.

    The row max is detached, which leaves gradients exact because softmax
    is invariant to constant row shifts.
    """
    shift = sub(x, detach(x).max(axis=1, keepdims=True))
    e = exp(shift)
    return div(e, summ(e, axis=1, keepdims=True))
