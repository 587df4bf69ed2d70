"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape: every operation returns a new Node recording its parents and
a closure that propagates the incoming gradient. Graphs are rebuilt each
training step; gradients accumulate additively into ``.grad`` and are zeroed
explicitly by the caller.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    """One value in the computation graph (an n-d float64 array)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op",
                 "_backward_done")

    # keep numpy from consuming Nodes elementwise; defer to our operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None,
                 op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def parameter(data):
    """Leaf node that collects gradients."""
    return Node(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def constant(data):
    return Node(data, requires_grad=False, op="const")


def _tracked(*nodes):
    return any(n.requires_grad or n._parents for n in nodes)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` along axes that were broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += _unbroadcast(g, node.data.shape)


def _make(data, parents, backward, op):
    parents = [p for p in parents if p.requires_grad or p._parents]
    if parents:
        return Node(data, parents=parents, backward=backward, op=op)
    return Node(data, op=op)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_node(a), as_node(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _make(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _make(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _make(out, (a, b), backward, "mul")


def div(a, b):
    a, b = as_node(a), as_node(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))
    return _make(out, (a, b), backward, "div")


def neg(a):
    a = as_node(a)

    def backward(g):
        _accumulate(a, -g)
    return _make(-a.data, (a,), backward, "neg")


def exp(a):
    a = as_node(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)
    return _make(out, (a,), backward, "exp")


def log(a):
    a = as_node(a)

    def backward(g):
        _accumulate(a, g / a.data)
    return _make(np.log(a.data), (a,), backward, "log")


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))
    return _make(out, (a,), backward, "tanh")


def sigmoid(a):
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))
    return _make(out, (a,), backward, "sigmoid")


def relu(a):
    a = as_node(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)
    return _make(a.data * mask, (a,), backward, "relu")


def softplus(a):
    a = as_node(a)
    # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * sig)
    return _make(out, (a,), backward, "softplus")


def square(a):
    a = as_node(a)

    def backward(g):
        _accumulate(a, 2.0 * g * a.data)
    return _make(a.data * a.data, (a,), backward, "square")


# ----------------------------------------------------------------- structural

def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul: operands must have rank >= 1, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 \
            else np.multiply.outer(g, b.data)
        if a.data.ndim > 1:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        else:
            gb = np.multiply.outer(a.data, g)
        _accumulate(a, ga)
        _accumulate(b, gb)
    return _make(out, (a, b), backward, "matmul")


def reshape(a, shape):
    a = as_node(a)
    out = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))
    return _make(out, (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_node(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inv))
    return _make(out, (a,), backward, "transpose")


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.data for n in nodes], axis=axis)
    sizes = [n.data.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(n, g[tuple(sl)])
    return _make(out, nodes, backward, "concat")


def getitem(a, idx):
    a = as_node(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)
    return _make(out, (a,), backward, "getitem")


def nsum(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))
    return _make(out, (a,), backward, "sum")


def nmean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return nsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a):
    """Softmax over the last axis."""
    a = as_node(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - inner))
    return _make(out, (a,), backward, "softmax")


def conv1d(x, w, b=None):
    """Same-padded 1-D convolution over time.

    x: (B, T, C_in), w: (k, C_in, C_out) with odd k, b: (C_out,) or None.
    Output: (B, T, C_out).
    """
    x, w = as_node(x), as_node(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected x (B,T,C_in) and w (k,C_in,C_out), got {x.shape} and {w.shape}")
    k, c_in, c_out = w.data.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel width must be odd, got {k}")
    B, T, cx = x.data.shape
    if cx != c_in:
        raise ShapeError(f"conv1d: input channels {cx} != kernel channels {c_in} (x {x.shape}, w {w.shape})")
    if T < k:
        raise ShapeError(f"conv1d: sequence length {T} shorter than kernel width {k}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B,T,C_in,k)
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(B, T, k * c_in)
    wm = w.data.reshape(k * c_in, c_out)
    out = cols @ wm

    def backward(g):
        gw = np.tensordot(cols, g, axes=([0, 1], [0, 1]))  # (k*C_in, C_out)
        _accumulate(w, gw.reshape(k, c_in, c_out))
        gcols = g @ wm.T  # (B, T, k*C_in)
        gxp = np.zeros_like(xp)
        gcols = gcols.reshape(B, T, k, c_in)
        for j in range(k):
            gxp[:, j:j + T, :] += gcols[:, :, j, :]
        _accumulate(x, gxp[:, pad:pad + T, :])
    out_node = _make(out, (x, w), backward, "conv1d")
    if b is not None:
        out_node = out_node + b
    return out_node


# ------------------------------------------------------------------- backward

def backward(root):
    """Populate ``.grad`` of every requires_grad ancestor of ``root``.

    ``root`` must be scalar-shaped. Calling twice on the same root without
    rebuilding the graph is an error.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    if root._backward_done:
        raise RuntimeError("backward: already called on this root; rebuild the graph")
    root._backward_done = True

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = None


def finite_difference_check(f, theta0, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a 1-D parameter Node to a scalar Node. Relative error per
    coordinate is |analytic - cd| / max(1, |cd|).
    """
    theta0 = np.asarray(theta0, dtype=np.float64).ravel()
    leaf = parameter(theta0.copy())
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise ValueError("finite_difference_check: non-finite function value at theta0")
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(theta0)

    worst = 0.0
    for i in range(theta0.size):
        tp, tm = theta0.copy(), theta0.copy()
        tp[i] += h
        tm[i] -= h
        fp = f(constant(tp)).item()
        fm = f(constant(tm)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_difference_check: non-finite value near coordinate {i}")
        cd = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst
