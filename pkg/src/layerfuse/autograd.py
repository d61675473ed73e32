"""Reverse-mode differentiation over numpy float64 arrays.

Each operation records its parents and a closure mapping the output gradient
to parent gradients.  :func:`backward` walks the recorded graph in reverse
topological order.  Only the operations defined in this module are recorded;
anything else reaching :func:`backward` raises :class:`UnsupportedOpError`.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class UnsupportedOpError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


SUPPORTED_OPS = frozenset({
    "leaf", "add", "sub", "mul", "neg", "matmul", "dot", "gelu", "sigmoid",
    "softmax", "layer_norm", "sum", "mean", "concat", "stack", "reshape",
    "transpose", "slice", "take", "weighted_sum", "bce_logits",
})


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name", "requires_grad")
    # let numpy arrays on the left defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward_fn: Callable | None = None, name: str | None = None,
                 requires_grad: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.name = name
        self.grad = None
        if requires_grad is None:
            requires_grad = name is not None or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _node(data, parents, op, backward_fn) -> Tensor:
    return Tensor(data, parents, op, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    # in-place temporaries: this op dominates elementwise cost in the FFN
    x2 = xd * xd
    t = x2 * (_GELU_C * 0.044715)
    t += _GELU_C
    t *= xd
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def back(g):
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= _GELU_C + (3 * _GELU_C * 0.044715) * x2
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _node(out, (x,), "gelu", back)


def sigmoid_array(z):
    """Overflow-free logistic function on plain numbers or arrays."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = np.asarray(sigmoid_array(x.data))
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def bce_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against soft targets.

    Uses max(z, 0) - z*t + log(1 + exp(-|z|)), exact and overflow-free.
    """
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    s = sigmoid_array(zd)
    return _node(out, (z,), "bce_logits", lambda g: (g * (s - t),))


# ----------------------------------------------------------------- linear alg

def matmul(a, b) -> Tensor:
    """Batched matrix product following ``np.matmul`` broadcasting; both operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight matrix: fold the batch dims into one 2-D product
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _node(out, (a, b), "matmul", back)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), "matmul", back)


def dot(x, w) -> Tensor:
    """Contract the last axis of ``x`` with the vector ``w``: [..., d] . [d] -> [...]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dot: cannot contract {x.shape} with {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        gx = g[..., None] * wd
        gw = np.tensordot(g, xd, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return gx, gw

    return _node(xd @ wd, (x, w), "dot", back)


def weighted_sum(weights, stack) -> Tensor:
    """Sum over axis -2 of ``stack`` weighted by ``weights``: [..., K] x [..., K, d] -> [..., d]."""
    w, s = as_tensor(weights), as_tensor(stack)
    wd, sd = w.data, s.data
    if sd.shape[-2] != wd.shape[-1]:
        raise ShapeError(f"weighted_sum: {wd.shape} vs {sd.shape}")
    out = np.matmul(wd[..., None, :], sd)[..., 0, :]

    def back(g):
        gw = np.matmul(sd, g[..., :, None])[..., 0]
        gs = wd[..., :, None] * g[..., None, :]
        return _unbroadcast(gw, wd.shape), _unbroadcast(gs, sd.shape)

    return _node(out, (w, s), "weighted_sum", back)


# ------------------------------------------------------------- normalization

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction.  ``mask`` (broadcastable bool) marks allowed entries."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), "softmax", back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gxhat = g * gd
        d = xd.shape[-1]
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), "layer_norm", back)


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), "mean", back)


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, "stack", back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _node(x.data[idx], (x,), "slice", back)


def take(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _node(table.data[ids], (table,), "take", back)


# ------------------------------------------------------------------ backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named leaf it reaches."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        if node.op not in SUPPORTED_OPS or (node.parents and node.backward_fn is None):
            raise UnsupportedOpError(f"no recorded backward rule for op {node.op!r}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if not node.parents:
            node.grad = g
            if node.name is not None:
                out[node.name] = out[node.name] + g if node.name in out else g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return out
