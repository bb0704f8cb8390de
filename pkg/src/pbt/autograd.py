"""A small reverse-mode autodiff over numpy arrays.

Only the operations the model needs are defined. A node records its parents
and a closure mapping the output gradient to one gradient per parent. Graph
nodes are only built when some input requires a gradient, so inference runs
straight numpy.
"""
from __future__ import annotations

import numpy as np

from . import _accel


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = gp if k not in grads else grads[k] + gp


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    a, b = _pair(a, b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(a.data @ b.data, (a, b), back)


def linear(x, w, b=None):
    """x @ w + b with weights stored (fan_in, fan_out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2):
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def take(a, idx):
    """Rows ``a[idx]`` along axis 0 (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        if idx.size == 0:
            return (out,)
        steps = np.diff(idx)
        if np.all(steps > 0):
            out[idx] = g
        elif np.all(steps >= 0):
            starts = np.concatenate([[0], np.flatnonzero(steps) + 1])
            out[idx[starts]] = np.add.reduceat(g, starts, axis=0)
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), back)


def scatter(a, idx, n):
    """Rows of ``a`` placed at unique positions ``idx`` of an n-row zero array."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
    out[idx] = a.data
    return _node(out, (a,), lambda g: (g[idx],))


def cols(a, start, stop):
    """Column slice ``a[:, start:stop]`` of a 2-D tensor."""

    def back(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return _node(a.data[:, start:stop], (a,), back)


def mask_fill(a, keep):
    """Zero every element where ``keep`` (broadcastable bool) is False."""
    keep = np.asarray(keep, dtype=bool)
    zero = np.zeros((), dtype=a.dtype)
    return _node(np.where(keep, a.data, zero), (a,), lambda g: (np.where(keep, g, zero),))


def leaky_relu(a, slope=0.01):
    pos = a.data > 0
    s = a.data.dtype.type(slope)
    return _node(np.where(pos, a.data, a.data * s), (a,), lambda g: (np.where(pos, g, g * s),))


def gelu(a):
    return _node(_accel.gelu_fwd(a.data), (a,), lambda g: (_accel.gelu_bwd(a.data, g),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Layer norm over the last axis; eps sits inside the square root."""
    shape = x.shape
    n = shape[-1]
    y, xhat, rstd = _accel.layer_norm_fwd(x.data.reshape(-1, n), gamma.data, beta.data, x.dtype.type(eps))

    def back(g):
        dx, dg, db = _accel.layer_norm_bwd(g.reshape(-1, n), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _node(y.reshape(shape), (x, gamma, beta), back)


def masked_softmax(scores, valid):
    """Softmax over the last axis with invalid entries excluded (weight exactly 0)."""
    shape = scores.shape
    n = shape[-1]
    v = np.broadcast_to(np.asarray(valid, dtype=bool), shape).reshape(-1, n)
    y = _accel.masked_softmax(scores.data.reshape(-1, n), v)

    def back(g):
        return (_accel.softmax_bwd(g.reshape(-1, n), y).reshape(shape),)

    return _node(y.reshape(shape), (scores,), back)


def dropout(a, rate, rng):
    if rate <= 0.0 or rng is None:
        return a
    keep = rng.random(a.shape) >= rate
    scale = np.where(keep, 1.0 / (1.0 - rate), 0.0).astype(a.dtype)
    return mul(a, Tensor(scale))
