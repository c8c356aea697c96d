"""Reverse-mode automatic differentiation on dense float64 arrays.

Eager tape: every op evaluates immediately and records a backward closure.
Just enough coverage for small MLP/CNN forward passes, Monte-Carlo class
expectations, and attack objectives. No higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Node", "leaf", "constant", "forward", "backward", "gradient",
    "finite_diff_check",
    "add", "sub", "neg", "mul", "matmul", "conv2d", "relu", "exp", "log",
    "reduce_sum", "reduce_mean", "reduce_max", "clip", "absolute",
    "softmax", "log_softmax", "take", "maximum_scalar", "reshape",
]

# Batch tile used by chunked evaluations elsewhere in the package. Fixed so
# that float accumulation order (and therefore output bits) never depends on
# caller-side batching choices.
CHUNK = 256


class Tensor:
    """Dense row-major float64 array. Construction rejects NaN/Inf."""

    __slots__ = ("array",)

    def __init__(self, values):
        a = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("Tensor holds non-finite entries")
        self.array = a

    @property
    def shape(self):
        return list(self.array.shape)

    @property
    def data(self):
        # flat row-major view
        return self.array.reshape(-1)

    def __repr__(self):
        return "Tensor(%r)" % (self.array,)


_node_serial = 0


class Node:
    """One tape entry: a value, its parents, and a local backward rule."""

    __slots__ = ("value", "parents", "grad", "is_input", "_bw", "_serial")

    def __init__(self, value, parents=(), bw=None, is_input=False):
        global _node_serial
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.parents = tuple(parents)
        self.grad = None
        self.is_input = is_input
        self._bw = bw  # maps output grad -> tuple of parent grads
        _node_serial += 1
        self._serial = _node_serial

    @property
    def a(self):
        return self.value.array

    def __repr__(self):
        return "Node(shape=%s, parents=%d)" % (self.value.shape, len(self.parents))


def leaf(values):
    """Differentiable input node."""
    return Node(values, is_input=True)


def constant(values):
    """Non-input node with no parents; gradient never requested through it."""
    return Node(values)


def _as_node(x):
    if isinstance(x, Node):
        return x
    return constant(x)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    va, vb = a.a, b.a

    def bw(g):
        return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)

    return Node(va + vb, (a, b), bw)


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    va, vb = a.a, b.a

    def bw(g):
        return _unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)

    return Node(va - vb, (a, b), bw)


def neg(a):
    a = _as_node(a)

    def bw(g):
        return (-g,)

    return Node(-a.a, (a,), bw)


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    va, vb = a.a, b.a

    def bw(g):
        return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)

    return Node(va * vb, (a, b), bw)


def relu(a):
    a = _as_node(a)
    va = a.a
    mask = va > 0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return Node(np.maximum(va, 0.0), (a,), bw)


def exp(a):
    a = _as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.a)  # overflow -> Tensor ctor raises

    def bw(g):
        return (g * out,)

    return Node(out, (a,), bw)


def log(a):
    a = _as_node(a)
    va = a.a

    def bw(g):
        return (g / va,)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(va)  # non-positive input -> Tensor ctor raises
    return Node(out, (a,), bw)


def absolute(a):
    a = _as_node(a)
    va = a.a
    s = np.sign(va)  # 0 at 0

    def bw(g):
        return (g * s,)

    return Node(np.abs(va), (a,), bw)


def clip(a, lo, hi):
    """Clip values to [lo, hi]; straight-through gradient.

    The gradient passes unchanged wherever lo <= value <= hi (boundary
    inclusive, so projections onto the box keep their gradient on the
    boundary itself) and is zero outside.
    """
    a = _as_node(a)
    va = a.a
    mask = (va >= lo) & (va <= hi)

    def bw(g):
        return (g * mask,)

    return Node(np.clip(va, lo, hi), (a,), bw)


def maximum_scalar(a, s):
    """max(a, s) elementwise; gradient flows only where a > s."""
    a = _as_node(a)
    va = a.a
    mask = va > s

    def bw(g):
        return (g * mask,)

    return Node(np.maximum(va, s), (a,), bw)


# ---------------------------------------------------------------------------
# shape and reductions

def reshape(a, shape):
    a = _as_node(a)
    va = a.a

    def bw(g):
        return (g.reshape(va.shape),)

    return Node(va.reshape(shape), (a,), bw)


def reduce_sum(a, axis=None):
    a = _as_node(a)
    va = a.a

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, va.shape).copy(),)

    return Node(va.sum(axis=axis), (a,), bw)


def reduce_mean(a, axis=None):
    a = _as_node(a)
    va = a.a
    n = va.size if axis is None else va.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, va.shape).copy(),)
        ge = np.expand_dims(g / n, axis)
        return (np.broadcast_to(ge, va.shape).copy(),)

    return Node(va.mean(axis=axis), (a,), bw)


def reduce_max(a, axis=None):
    """Max reduction; ties send the gradient to the first maximizer."""
    a = _as_node(a)
    va = a.a
    if axis is None:
        idx = np.unravel_index(np.argmax(va), va.shape)

        def bw(g):
            ga = np.zeros_like(va)
            ga[idx] = g
            return (ga,)

        return Node(va.max(), (a,), bw)

    idx = np.argmax(va, axis=axis)

    def bw(g):
        ga = np.zeros_like(va)
        np.put_along_axis(ga, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        return (ga,)

    return Node(va.max(axis=axis), (a,), bw)


def take(a, index):
    """Advanced indexing a[index]; backward scatter-adds."""
    a = _as_node(a)
    va = a.a

    def bw(g):
        ga = np.zeros_like(va)
        np.add.at(ga, index, g)
        return (ga,)

    return Node(va[index], (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    va, vb = a.a, b.a
    if va.ndim != 2 or vb.ndim != 2:
        raise ValueError("matmul expects 2-D operands, got %s @ %s"
                         % (va.shape, vb.shape))
    if va.shape[1] != vb.shape[0]:
        raise ValueError("matmul shape mismatch: %s @ %s" % (va.shape, vb.shape))

    def bw(g):
        return g @ vb.T, va.T @ g

    with np.errstate(over="ignore", invalid="ignore"):
        out = va @ vb  # overflow -> Tensor ctor raises
    return Node(out, (a, b), bw)


def _im2col(x, kh, kw):
    """Strided view (B, C, kh, kw, OH, OW) over the valid window positions."""
    B, C, H, W = x.shape
    OH, OW = H - kh + 1, W - kw + 1
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (B, C, kh, kw, OH, OW), (s[0], s[1], s[2], s[3], s[2], s[3]))


def conv2d_np(x, w, b):
    """Valid cross-correlation, stride 1. x (B,C,H,W), w (O,C,kh,kw), b (O,)."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    OH, OW = H - kh + 1, W - kw + 1
    cols = _im2col(x, kh, kw).transpose(0, 4, 5, 1, 2, 3).reshape(
        B * OH * OW, C * kh * kw)
    y = cols @ w.reshape(O, -1).T + b
    return y.reshape(B, OH, OW, O).transpose(0, 3, 1, 2)


def conv2d(x, w, b):
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    vx, vw, vb = x.a, w.a, b.a
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[1]:
        raise ValueError("conv2d shape mismatch: x %s, w %s"
                         % (vx.shape, vw.shape))
    B, C, H, W = vx.shape
    O, _, kh, kw = vw.shape
    OH, OW = H - kh + 1, W - kw + 1

    def bw(g):
        # g (B,O,OH,OW); im2col view recomputed instead of cached: the copies
        # below already dominate memory and the view itself is free.
        g2 = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, O)
        cols = _im2col(vx, kh, kw).transpose(0, 4, 5, 1, 2, 3).reshape(
            B * OH * OW, C * kh * kw)
        gw = (g2.T @ cols).reshape(vw.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ vw.reshape(O, -1)).reshape(
            B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros_like(vx)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + OH, j:j + OW] += gcols[:, :, i, j]
        return gx, gw, gb

    return Node(conv2d_np(vx, vw, vb), (x, w, b), bw)


# ---------------------------------------------------------------------------
# softmax family (stable forms with closed-form backward)

def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a, axis=-1):
    a = _as_node(a)
    s = softmax_np(a.a, axis=axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Node(s, (a,), bw)


def log_softmax(a, axis=-1):
    a = _as_node(a)
    va = a.a
    out = log_softmax_np(va, axis=axis)
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Node(out, (a,), bw)


# ---------------------------------------------------------------------------
# tape execution

def _toposort(root):
    """Iterative post-order over the tape; each node exactly once."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _input_leaves(root):
    leaves = [n for n in _toposort(root) if n.is_input]
    leaves.sort(key=lambda n: n._serial)
    return leaves


def forward(graph, *inputs):
    """Value of an (already evaluated) graph.

    Evaluation is eager, so the tape is recorded at construction time. When
    `inputs` are given they are checked against the graph's input leaves in
    creation order; a shape mismatch is an error (eager tapes cannot be
    rebound, rebuild the graph to change inputs).
    """
    if inputs:
        leaves = _input_leaves(graph)
        if len(inputs) != len(leaves):
            raise ValueError("graph has %d input leaves, got %d inputs"
                             % (len(leaves), len(inputs)))
        for lf, x in zip(leaves, inputs):
            xa = x.array if isinstance(x, Tensor) else np.asarray(x)
            if tuple(xa.shape) != tuple(lf.a.shape):
                raise ValueError("input shape %s does not match leaf shape %s"
                                 % (xa.shape, lf.a.shape))
    return graph.value


def backward(graph):
    """Backpropagate from a scalar output, filling .grad on every tape node."""
    if graph.a.size != 1:
        raise ValueError("backward requires a scalar output, got shape %s"
                         % (graph.value.shape,))
    order = _toposort(graph)
    for n in order:
        n.grad = None
    graph.grad = np.ones_like(graph.a)
    for n in reversed(order):
        if n.grad is None or n._bw is None:
            continue
        pgrads = n._bw(n.grad)
        for p, pg in zip(n.parents, pgrads):
            if pg is None:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.a)
            p.grad += pg
    return order


def gradient(graph, wrt):
    """d(scalar output)/d(wrt) with the same shape as wrt.

    `wrt` is an input Node of the graph (or the Tensor object held by one).
    """
    if graph.a.size != 1:
        raise ValueError("gradient requires a scalar output, got shape %s"
                         % (graph.value.shape,))
    order = _toposort(graph)
    if isinstance(wrt, Node):
        target = wrt
        if not any(n is target for n in order):
            raise ValueError("wrt is not on the tape")
    else:
        tensor = wrt
        matches = [n for n in order if n.is_input and n.value is tensor]
        if not matches:
            raise ValueError("wrt is not on the tape")
        target = matches[0]

    backward(graph)
    g = target.grad
    if g is None:
        g = np.zeros_like(target.a)
    return Tensor(g)


def finite_diff_check(f, x, h=1e-5):
    """Max relative gap between the tape gradient of f and central differences.

    f maps an input Node to a scalar Node; x is the evaluation point. The
    relative gap at each coordinate uses denominator max(|g|, |fd|, 1e-6) so
    coordinates with a genuinely zero derivative do not blow up the ratio.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    xa = x.array.copy() if isinstance(x, Tensor) else np.asarray(
        x, dtype=np.float64).copy()
    node = leaf(xa)
    g = gradient(f(node), node).array.reshape(-1)
    flat = xa.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        for sgn, slot in ((+1, 0), (-1, 1)):
            pert = flat.copy()
            pert[i] += sgn * h
            val = f(leaf(pert.reshape(xa.shape))).a
            if slot == 0:
                hi = float(val)
            else:
                lo = float(val)
        fd[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(g - fd) / denom))
