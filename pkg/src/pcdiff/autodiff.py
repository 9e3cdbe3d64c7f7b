"""Minimal reverse-mode differentiation over numpy arrays.

The engine records a graph of :class:`Tensor` nodes while any input requires
a gradient, and replays it backwards in reverse topological order.  The op
set is deliberately small: what the score network, the conditioning path and
the loss need, with a few ops fused (group norm, attention softmax, bilinear
lookup, strided convolution) to keep Python overhead per training step low.

Precision follows the arrays: build parameters in float64 for gradient
checks and float32 for training.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents if requires_grad else ()
        self.backward_fn = backward_fn if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def leaf(value, requires_grad=True) -> Tensor:
    return Tensor(np.asarray(value), requires_grad=requires_grad)


def _pair(a, b):
    # Python scalars adopt the other operand's dtype (a 0-d float64 array would upcast)
    if isinstance(a, (int, float)) and not isinstance(b, (int, float)):
        b = as_tensor(b)
        return Tensor(np.asarray(a, dtype=b.value.dtype)), b
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        return a, Tensor(np.asarray(b, dtype=a.value.dtype))
    return as_tensor(a), as_tensor(b)


def _node(value, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(value, parents, backward_fn, req)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b):
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb
    return _node(out, (a, b), back)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xv = x.value
    return _node(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def gaussian(x, width=1.0):
    """g(x) = exp(-x^2 / (2 a^2))."""
    x = as_tensor(x)
    xv = x.value
    inv = 1.0 / (width * width)
    out = np.exp(-0.5 * inv * xv * xv)
    return _node(out, (x,), lambda g: (-g * out * xv * inv,))


def square(x):
    x = as_tensor(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if av.ndim > 2 and bv.ndim == 2:
                # shared weight: fold batch dims into rows
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb
    return _node(av @ bv, (a, b), back)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), back)


def getitem(x, index):
    x = as_tensor(x)
    shape, dtype = x.value.shape, x.value.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)
    return _node(x.value[index], (x,), back)


def _needs_add_at(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.value.shape
    return _node(np.broadcast_to(x.value, shape), (x,), lambda g: (_unbroadcast(g, old),))


def permute_rows(x, order):
    """Gather rows along axis 1 with a per-batch permutation ``order`` (B, N)."""
    x = as_tensor(x)
    idx = order[..., None]
    inv = np.argsort(order, axis=1)[..., None]
    out = np.take_along_axis(x.value, idx, axis=1)
    return _node(out, (x,), lambda g: (np.take_along_axis(g, inv, axis=1),))


def mask_fill(x, mask, fill):
    """Replace entries where ``mask`` is true by a constant; no gradient there."""
    x = as_tensor(x)
    keep = ~mask
    return _node(np.where(mask, fill, x.value), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), float(1.0 / n))


# ---------------------------------------------------------------- fused layers

def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (x,), back)


_GROUP_MATS: dict = {}


def _group_mean_matrix(channels, groups, dtype):
    key = (channels, groups, np.dtype(dtype).str)
    mat = _GROUP_MATS.get(key)
    if mat is None:
        size = channels // groups
        mat = np.kron(np.eye(groups), np.full((size, size), 1.0 / size)).astype(dtype)
        _GROUP_MATS[key] = mat
    return mat


def group_norm(x, groups, eps=1e-5):
    """Normalise the last axis in ``groups`` contiguous channel groups.

    Statistics are per token (every leading index separately), so tokens never
    exchange information through the normaliser.  Group means are taken with a
    block-averaging matmul, far cheaper in numpy than a reshaped reduction.
    """
    x = as_tensor(x)
    xv = x.value
    avg = _group_mean_matrix(xv.shape[-1], groups, xv.dtype)
    centered = xv - xv @ avg
    inv_std = 1.0 / np.sqrt((centered * centered) @ avg + eps)
    xhat = centered * inv_std

    def back(g):
        mg = g @ avg
        mgx = (g * xhat) @ avg
        return (inv_std * (g - mg - xhat * mgx),)
    return _node(xhat, (x,), back)


def scale_shift(x, scale, shift):
    """x * scale + shift with broadcasting, as a single node."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xv, sv = x.value, scale.value

    def back(g):
        return (g * sv if x.requires_grad else None,
                _unbroadcast(g * xv, sv.shape) if scale.requires_grad else None,
                _unbroadcast(g, shift.value.shape) if shift.requires_grad else None)
    return _node(xv * sv + shift.value, (x, scale, shift), back)


def bilinear_lookup(grid, coords):
    """Sample ``grid`` (B, H, W, C) at normalised ``coords`` (B, N, 2) = (p_h, p_w).

    Pixel centres sit at (i + 0.5) / H.  Coordinates outside [0, 1]^2 return a
    zero feature; taps falling outside the map near the border are zero-padded.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    gv, cv = grid.value, coords.value
    Bg, H, W, C = gv.shape
    B, N = cv.shape[:2]
    if Bg not in (1, B):
        raise ValueError(f"grid batch {Bg} does not match coordinate batch {B}")
    ph, pw = cv[..., 0], cv[..., 1]
    inside = (ph >= 0.0) & (ph <= 1.0) & (pw >= 0.0) & (pw <= 1.0)
    yy = np.where(inside, ph * H - 0.5, -2.0)
    xx = np.where(inside, pw * W - 0.5, -2.0)
    y0, x0 = np.floor(yy), np.floor(xx)
    wy, wx = yy - y0, xx - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    binds = np.arange(B)[:, None] if Bg == B else np.zeros((B, 1), dtype=np.int64)
    flat = gv.reshape(Bg, H * W, C)

    taps = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        iy, ix = y0 + dy, x0 + dx
        valid = inside & (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        lin = np.where(valid, iy * W + ix, 0)
        fy = wy if dy else 1.0 - wy
        fx = wx if dx else 1.0 - wx
        taps.append((lin, valid, fy, fx, dy, dx))

    out = np.zeros((B, N, C), dtype=gv.dtype)
    vals = []
    for lin, valid, fy, fx, _, _ in taps:
        v = flat[binds, lin] * valid[..., None]
        vals.append(v)
        out += (fy * fx)[..., None] * v

    def back(g):
        gg = gc = None
        if grid.requires_grad:
            gflat = np.zeros((Bg * H * W, C), dtype=gv.dtype)
            offs = binds * (H * W)
            for lin, valid, fy, fx, _, _ in taps:
                w = (fy * fx * valid)[..., None]
                np.add.at(gflat, (offs + lin).ravel(), (g * w).reshape(-1, C))
            gg = gflat.reshape(Bg, H, W, C)
        if coords.requires_grad:
            dyy = np.zeros((B, N), dtype=gv.dtype)
            dxx = np.zeros((B, N), dtype=gv.dtype)
            for (lin, valid, fy, fx, dy, dx), v in zip(taps, vals):
                gv_dot = (g * v).sum(-1)
                dyy += gv_dot * fx * (1.0 if dy else -1.0)
                dxx += gv_dot * fy * (1.0 if dx else -1.0)
            gc = np.stack([dyy * H * inside, dxx * W * inside], axis=-1)
        return gg, gc
    return _node(out, (grid, coords), back)


def conv2d(x, weight, bias, stride=2, pad=1):
    """2D convolution, channels-last: x (B, H, W, Cin), weight (kh, kw, Cin, Cout)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xv, wv = x.value, weight.value
    B, H, W, Cin = xv.shape
    kh, kw, _, Cout = wv.shape
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((B, Ho, Wo, kh, kw, Cin), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * Cin)
    w2 = wv.reshape(kh * kw * Cin, Cout)
    out = (cols2 @ w2).reshape(B, Ho, Wo, Cout) + bias.value

    def back(g):
        g2 = g.reshape(-1, Cout)
        gw = (cols2.T @ g2).reshape(wv.shape) if weight.requires_grad else None
        gb = g2.sum(0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, Cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + H, pad:pad + W, :]
        return gx, gw, gb
    return _node(out, (x, weight, bias), back)


# ---------------------------------------------------------------- driver

def backward(root: Tensor, upstream=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    ``upstream`` is the cotangent of ``root``; defaults to ones (scalar loss).
    Interior nodes have their gradients released after use.
    """
    if not root.requires_grad:
        return
    if upstream is None:
        upstream = np.ones_like(root.value)
    order = _topological(root)
    grads = {id(root): np.asarray(upstream, dtype=root.value.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(fn: Callable[..., Tensor], argnums: Iterable[int] = (0,)):
    """Functional wrapper: ``grad(f)(*arrays)`` returns gradients of a scalar ``f``."""
    argnums = tuple(argnums)

    def wrapped(*args):
        leaves = [leaf(a, requires_grad=i in argnums) for i, a in enumerate(args)]
        out = fn(*leaves)
        backward(out)
        gs = [leaves[i].grad if leaves[i].grad is not None else np.zeros_like(leaves[i].value)
              for i in argnums]
        return gs[0] if len(gs) == 1 else tuple(gs)
    return wrapped
