"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation creates a node holding its parents and a
closure mapping the upstream gradient to one gradient per parent.  The graph
is rebuilt on every forward pass, so episodes of any shape are fine.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

DTYPE = np.float64

_grad_enabled = True
_op_count = 0
_branch_log = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch decisions (ReLU masks, argmax indices, signs) of
    every piecewise operation run inside the block."""
    global _branch_log
    prev = _branch_log
    _branch_log = log = []
    try:
        yield log
    finally:
        _branch_log = prev


def _log_branch(decision):
    if _branch_log is not None:
        _branch_log.append(decision)


class OpCounter:
    def __init__(self):
        self.start = _op_count
        self.stop = None

    @property
    def count(self):
        end = _op_count if self.stop is None else self.stop
        return end - self.start


@contextlib.contextmanager
def count_ops():
    """Count tensor operations executed inside the block."""
    counter = OpCounter()
    try:
        yield counter
    finally:
        counter.stop = _op_count


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        global _op_count
        _op_count += 1
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def const(value):
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = Tensor.const(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._node(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor.const(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._node(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor.const(other) - self

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._node(self.data * c, (self,), lambda g: (g * c,))
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._node(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / float(other))
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._node(a / b, (self, other), backward)

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul operands must be at least rank 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {self.shape} @ {other.shape}")
        a, b = self.data, other.data

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._node(a @ b, (self, other), backward)

    # -- elementwise ------------------------------------------------------

    def abs(self):
        x = self.data
        sign = np.sign(x)
        _log_branch(sign)
        return Tensor._node(np.abs(x), (self,), lambda g: (g * sign,))

    def relu(self):
        x = self.data
        keep = x > 0
        _log_branch(keep)
        return Tensor._node(np.where(keep, x, 0.0), (self,), lambda g: (g * keep,))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._node(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._node(y, (self,), lambda g: (g / (2.0 * y),))

    def __pow__(self, p):
        x = self.data
        p = float(p)
        return Tensor._node(x**p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis, keepdims=False):
        """Maximum along ``axis``; the gradient goes to the first maximal entry."""
        return masked_max(self, axis=axis, keepdims=keepdims)

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a, b):
        return Tensor._node(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape):
        shape = tuple(shape)
        if shape == self.shape:
            return self
        old = self.shape
        data = np.broadcast_to(self.data, shape)
        return Tensor._node(data, (self,), lambda g: (_unbroadcast(g, old),))

    def __getitem__(self, idx):
        shape = self.shape
        basic = _is_basic_index(idx)

        def backward(g):
            out = np.zeros(shape, dtype=DTYPE)
            if basic:
                out[idx] += g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._node(self.data[idx], (self,), backward)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._node(np.concatenate(datas, axis=axis), tuple(tensors), backward)


def masked_max(x, axis, mask=None, keepdims=False):
    """Max along ``axis`` ignoring entries where ``mask`` is False.

    Ties resolve to the lowest index, so the backward pass is deterministic.
    """
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    idx = np.expand_dims(np.argmax(data, axis=axis), axis)
    _log_branch(idx)
    out = np.take_along_axis(x.data if mask is None else data, idx, axis)
    shape = x.shape
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(grad, idx, g, axis)
        return (grad,)

    return Tensor._node(out, (x,), backward)


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; masked-out entries get probability 0."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    shape = x.shape

    def backward(g):
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return (_unbroadcast(gx, shape),)

    return Tensor._node(y, (x,), backward)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(y, (x,), backward)


def logsumexp(x, axis=-1, keepdims=False):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return Tensor._node(out, (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return Tensor._node(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-12):
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data
    y = xhat * gam + beta.data
    d = v.shape[-1]

    def backward(g):
        dxhat = g * gam
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        dgamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return Tensor._node(y, (x, gamma, beta), backward)


def l2_normalize(x, axis=-1):
    """x / ||x||; zero vectors map to zero with zero gradient."""
    v = x.data
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = v / safe

    def backward(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(nonzero, gx, 0.0),)

    return Tensor._node(y, (x,), backward)


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return Tensor._node(weight.data[ids], (weight,), backward)


def affine(x, weight, bias, activation=None):
    """Fused ``act(x @ weight + bias)`` over the trailing dimension."""
    v, w = x.data, weight.data
    din, dout = w.shape
    if v.shape[-1] != din:
        raise ShapeError(f"linear expects trailing dim {din}, got {v.shape[-1]}")
    z = v @ w
    if bias is not None:
        z = z + bias.data
    keep = None
    if activation == "relu":
        keep = z > 0
        _log_branch(keep)
        z = np.where(keep, z, 0.0)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")

    def backward(g):
        if keep is not None:
            g = g * keep
        flat_g = g.reshape(-1, dout)
        gx = g @ w.T
        gw = v.reshape(-1, din).T @ flat_g
        if bias is None:
            return gx, gw
        return gx, gw, flat_g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._node(z, parents, backward)
