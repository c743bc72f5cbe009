"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graphs are built lazily: every op returns a :class:`Node` whose value is
filled in by :func:`forward`.  :func:`backward` then walks the graph in
reverse topological order and returns gradients for every leaf that
requires them.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphStateError(AutodiffError, RuntimeError):
    pass


_ids = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Nodes created inside this block never require gradients."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Node:
    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "shape",
                 "dtype", "name", "_fwd", "_bwd", "_ctx")

    def __init__(self, op, inputs, shape, dtype, fwd=None, bwd=None,
                 value=None, requires_grad=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(int(s) for s in shape)
        self.dtype = np.dtype(dtype)
        self.value = value
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._fwd = fwd
        self._bwd = bwd
        self._ctx = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def numpy(self) -> np.ndarray:
        if self.value is None:
            raise GraphStateError(f"{self!r} has not been evaluated")
        return self.value

    __array_priority__ = 1000

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------- leaves

def leaf(value, requires_grad=True, name=None, dtype=None) -> Node:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind not in "f":
        arr = arr.astype(np.float32)
    return Node("leaf", (), arr.shape, arr.dtype, value=arr,
                requires_grad=requires_grad, name=name)


def const(value, dtype=None) -> Node:
    return leaf(value, requires_grad=False, dtype=dtype)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = np.float32
    return const(x, dtype=dtype)


def _coerce(a, b):
    if isinstance(a, Node):
        return a, _as_node(b, a)
    b = _as_node(b)
    return _as_node(a, b), b


def _make(op, inputs, shape, dtype, fwd, bwd) -> Node:
    rg = grad_enabled() and any(n.requires_grad for n in inputs)
    return Node(op, inputs, shape, dtype, fwd=fwd, bwd=bwd, requires_grad=rg)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(a: Node, b: Node, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _rtype(*nodes):
    return np.result_type(*[n.dtype for n in nodes])


# ------------------------------------------------------ elementwise binary

def add(a, b) -> Node:
    a, b = _coerce(a, b)
    return _make("add", (a, b), _bshape(a, b, "add"), _rtype(a, b),
                 lambda x, y: (x + y, None),
                 lambda g, c, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Node:
    a, b = _coerce(a, b)
    return _make("sub", (a, b), _bshape(a, b, "sub"), _rtype(a, b),
                 lambda x, y: (x - y, None),
                 lambda g, c, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Node:
    a, b = _coerce(a, b)
    return _make("mul", (a, b), _bshape(a, b, "mul"), _rtype(a, b),
                 lambda x, y: (x * y, None),
                 lambda g, c, x, y: (_unbroadcast(g * y, x.shape),
                                     _unbroadcast(g * x, y.shape)))


def div(a, b) -> Node:
    a, b = _coerce(a, b)

    def bwd(g, c, x, y):
        gx = g / y
        return _unbroadcast(gx, x.shape), _unbroadcast(-gx * x / y, y.shape)

    return _make("div", (a, b), _bshape(a, b, "div"), _rtype(a, b),
                 lambda x, y: (x / y, None), bwd)


def minimum(a, b) -> Node:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _coerce(a, b)

    def fwd(x, y):
        first = x <= y
        return np.where(first, x, y), first

    def bwd(g, first, x, y):
        return (_unbroadcast(np.where(first, g, 0), x.shape),
                _unbroadcast(np.where(first, 0, g), y.shape))

    return _make("minimum", (a, b), _bshape(a, b, "minimum"), _rtype(a, b), fwd, bwd)


# ------------------------------------------------------- elementwise unary

def _unary(op, x, f, df):
    x = _as_node(x)
    return _make(op, (x,), x.shape, x.dtype, lambda v: (f(v), None),
                 lambda g, c, v: (g * df(v),))


def neg(x) -> Node:
    x = _as_node(x)
    return _make("neg", (x,), x.shape, x.dtype, lambda v: (-v, None),
                 lambda g, c, v: (-g,))


def exp(x) -> Node:
    x = _as_node(x)

    def fwd(v):
        out = np.exp(v)
        return out, out

    return _make("exp", (x,), x.shape, x.dtype, fwd, lambda g, out, v: (g * out,))


def log(x) -> Node:
    return _unary("log", x, np.log, lambda v: 1.0 / v)


def sqrt(x) -> Node:
    x = _as_node(x)

    def fwd(v):
        out = np.sqrt(v)
        return out, out

    return _make("sqrt", (x,), x.shape, x.dtype, fwd, lambda g, out, v: (g * 0.5 / out,))


def abs_(x) -> Node:
    """|x| with the subgradient at zero fixed to 0."""
    return _unary("abs", x, np.abs, np.sign)


def sin(x) -> Node:
    return _unary("sin", x, np.sin, np.cos)


def cos(x) -> Node:
    return _unary("cos", x, np.cos, lambda v: -np.sin(v))


def relu(x) -> Node:
    x = _as_node(x)

    def fwd(v):
        m = v > 0
        return v * m, m

    return _make("relu", (x,), x.shape, x.dtype, fwd, lambda g, m, v: (g * m,))


def sigmoid(x) -> Node:
    x = _as_node(x)

    def fwd(v):
        # split by sign so exp never overflows
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        e = np.exp(v[~pos])
        out[~pos] = e / (1.0 + e)
        return out, out

    return _make("sigmoid", (x,), x.shape, x.dtype, fwd,
                 lambda g, s, v: (g * s * (1 - s),))


def clamp(x, lo=None, hi=None) -> Node:
    """Clip to ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    x = _as_node(x)

    def fwd(v):
        m = np.ones(v.shape, dtype=bool)
        if lo is not None:
            m &= v >= lo
        if hi is not None:
            m &= v <= hi
        return np.clip(v, lo, hi), m

    return _make("clamp", (x,), x.shape, x.dtype, fwd, lambda g, m, v: (g * m,))


_SERIES_EPS = 1e-4


def rodrigues_a(s) -> Node:
    """sin(r)/r as a function of s = r**2."""
    def f(s):
        small = s < _SERIES_EPS
        r = np.sqrt(np.where(small, 1.0, s))
        return np.where(small, 1 - s / 6 + s * s / 120 - s ** 3 / 5040, np.sin(r) / r)

    def df(s):
        small = s < _SERIES_EPS
        r = np.sqrt(np.where(small, 1.0, s))
        closed = (r * np.cos(r) - np.sin(r)) / (2 * r ** 3)
        return np.where(small, -1 / 6 + s / 60 - s * s / 1680, closed)

    return _unary("rodrigues_a", s, f, df)


def rodrigues_b(s) -> Node:
    """(1 - cos(r))/r**2 as a function of s = r**2."""
    def f(s):
        small = s < _SERIES_EPS
        ss = np.where(small, 1.0, s)
        return np.where(small, 0.5 - s / 24 + s * s / 720 - s ** 3 / 40320,
                        (1 - np.cos(np.sqrt(ss))) / ss)

    def df(s):
        small = s < _SERIES_EPS
        ss = np.where(small, 1.0, s)
        r = np.sqrt(ss)
        closed = (r * np.sin(r) - 2 * (1 - np.cos(r))) / (2 * ss * ss)
        return np.where(small, -1 / 24 + s / 360 - s * s / 13440, closed)

    return _unary("rodrigues_b", s, f, df)


# -------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def sum_(x, axis=None, keepdims=False) -> Node:
    x = _as_node(x)
    axes = _norm_axis(axis, x.ndim)

    def bwd(g, c, v):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, v.shape).copy(),)

    return _make("sum", (x,), _reduced_shape(x.shape, axes, keepdims), x.dtype,
                 lambda v: (np.sum(v, axis=axes, keepdims=keepdims), None), bwd)


def mean(x, axis=None, keepdims=False) -> Node:
    x = _as_node(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64)) or 1

    def bwd(g, c, v):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, v.shape).astype(v.dtype),)

    return _make("mean", (x,), _reduced_shape(x.shape, axes, keepdims), x.dtype,
                 lambda v: (np.mean(v, axis=axes, keepdims=keepdims), None), bwd)


# ------------------------------------------------------------- structural

def reshape(x, shape) -> Node:
    x = _as_node(x)
    shape = tuple(shape)
    try:
        out_shape = np.empty(x.shape, dtype=np.uint8).reshape(shape).shape
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make("reshape", (x,), out_shape, x.dtype,
                 lambda v: (v.reshape(out_shape), None),
                 lambda g, c, v: (g.reshape(v.shape),))


def transpose(x, axes=None) -> Node:
    x = _as_node(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), tuple(x.shape[a] for a in axes), x.dtype,
                 lambda v: (np.transpose(v, axes), None),
                 lambda g, c, v: (np.transpose(g, inv),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x, index) -> Node:
    x = _as_node(x)
    out_shape = np.empty(x.shape, dtype=np.uint8)[index].shape
    basic = _is_basic_index(index)

    def bwd(g, c, v):
        gx = np.zeros(v.shape, dtype=g.dtype)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", (x,), out_shape, x.dtype, lambda v: (v[index], None), bwd)


def broadcast_to(x, shape) -> Node:
    x = _as_node(x)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from None
    return _make("broadcast_to", (x,), shape, x.dtype,
                 lambda v: (np.broadcast_to(v, shape).copy(), None),
                 lambda g, c, v: (_unbroadcast(g, v.shape),))


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no inputs")
    nd = nodes[0].ndim
    ax = axis % nd
    for n in nodes:
        if n.ndim != nd or any(n.shape[i] != nodes[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[m.shape for m in nodes]}")
    shape = list(nodes[0].shape)
    shape[ax] = sum(n.shape[ax] for n in nodes)
    splits = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def bwd(g, c, *vals):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", nodes, shape, _rtype(*nodes),
                 lambda *vals: (np.concatenate(vals, axis=ax), None), bwd)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    ax = axis % (nodes[0].ndim + 1)
    expanded = [reshape(n, n.shape[:ax] + (1,) + n.shape[ax:]) for n in nodes]
    return concat(expanded, axis=ax)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Node:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} @ {b.shape}") from None
    shape = lead + (a.shape[-2], b.shape[-1])

    def bwd(g, c, x, y):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _make("matmul", (a, b), shape, _rtype(a, b),
                 lambda x, y: (np.matmul(x, y), None), bwd)


# ----------------------------------------------------------------- imaging

def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation on ``(N, C, H, W)`` with zero padding."""
    x, w = _coerce(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: expected 4-D input and weight")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")
    inputs = (x, w) if b is None else (x, w, _as_node(b, x))
    if b is not None and inputs[2].shape != (o,):
        raise ShapeError(f"conv2d: bias shape {inputs[2].shape} != ({o},)")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))

    def fwd(xv, wv, bv=None):
        xp = np.pad(xv, pad) if padding else xv
        win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
        # im2col once; the backward pass reuses it for the weight gradient
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ wv.reshape(o, -1).T
        if bv is not None:
            out += bv
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols

    def bwd(g, cols, xv, wv, bv=None):
        gw = (g.transpose(1, 0, 2, 3).reshape(o, -1) @ cols).reshape(o, c, kh, kw)
        gx = None
        if x.requires_grad:
            cols = np.tensordot(wv, g, axes=([0], [1]))      # (c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if bv is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d", inputs, (n, o, ho, wo), _rtype(*inputs), fwd, bwd)


def avg_pool2d(x, kernel: int, stride: int = 1) -> Node:
    """Average pooling over the last two axes of ``(N, C, H, W)``, no padding."""
    x = _as_node(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d: expected 4-D input")
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("avg_pool2d: kernel larger than input")
    k2 = kernel * kernel

    def fwd(v):
        acc = np.zeros((n, c, ho, wo), dtype=np.result_type(v.dtype, np.float32))
        for i in range(kernel):
            for j in range(kernel):
                acc += v[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        return acc / k2, None

    def bwd(g, ctx, v):
        gx = np.zeros(v.shape, dtype=g.dtype)
        share = g / k2
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return _make("avg_pool2d", (x,), (n, c, ho, wo), x.dtype, fwd, bwd)


def pad2d(x, p: int, mode: str = "reflect") -> Node:
    """Pad the last two axes by ``p`` on every side ('reflect' or 'zero')."""
    x = _as_node(x)
    if mode not in ("reflect", "zero"):
        raise ValueError(f"unknown pad mode {mode!r}")
    h, w = x.shape[-2:]
    if mode == "reflect" and (p >= h or p >= w):
        raise ShapeError("pad2d: reflect padding larger than input")
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    np_mode = "reflect" if mode == "reflect" else "constant"

    def fold(g, axis, n):
        # adjoint of a 1-D pad along ``axis`` back to length ``n``
        g = np.moveaxis(g, axis, -1)
        gi = g[..., p:p + n].copy()
        if mode == "reflect":
            for k in range(1, p + 1):
                gi[..., k] += g[..., p - k]
                gi[..., n - 1 - k] += g[..., p + n - 1 + k]
        return np.moveaxis(gi, -1, axis)

    def bwd(g, c, v):
        return (fold(fold(g, -1, w), -2, h),)

    shape = x.shape[:-2] + (h + 2 * p, w + 2 * p)
    return _make("pad2d", (x,), shape, x.dtype,
                 lambda v: (np.pad(v, widths, mode=np_mode), None), bwd)


def upsample2x(x) -> Node:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = _as_node(x)
    h, w = x.shape[-2:]

    def bwd(g, c, v):
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return _make("upsample2x", (x,), x.shape[:-2] + (2 * h, 2 * w), x.dtype,
                 lambda v: (v.repeat(2, axis=-2).repeat(2, axis=-1), None), bwd)


def grid_sample(img, coords) -> Node:
    """Bilinear sampling of ``img`` (N, C, H, W) at pixel ``coords`` (N, Ho, Wo, 2).

    ``coords[..., 0]`` is the column (x) and ``coords[..., 1]`` the row (y).
    Taps that fall outside the image read zero.  Differentiable with respect
    to both the image and the coordinates.
    """
    img, coords = _coerce(img, coords)
    if img.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise ShapeError("grid_sample: expected img (N,C,H,W) and coords (N,Ho,Wo,2)")
    if img.shape[0] != coords.shape[0]:
        raise ShapeError("grid_sample: batch size mismatch")
    n, c, h, w = img.shape
    ho, wo = coords.shape[1:3]

    def taps(cv):
        x = cv[..., 0]
        y = cv[..., 1]
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        out = []
        for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                           (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = np.where(inside, yi * w + xi, 0)
            out.append((dx, dy, wt, inside, flat))
        return fx, fy, out

    def gather(iv, flat):
        # iv: (N, C, H*W); flat: (N, Ho, Wo) -> (N, C, Ho, Wo)
        idx = flat.reshape(n, 1, -1)
        return np.take_along_axis(iv, np.broadcast_to(idx, (n, c, idx.shape[-1])),
                                  axis=2).reshape(n, c, ho, wo)

    def fwd(iv, cv):
        fx, fy, tl = taps(cv)
        flat_img = iv.reshape(n, c, h * w)
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(iv, cv))
        vals = []
        for dx, dy, wt, inside, flat in tl:
            v = gather(flat_img, flat) * inside[:, None]
            vals.append(v)
            out += v * wt[:, None]
        return out, (fx, fy, tl, vals)

    def bwd(g, ctx, iv, cv):
        fx, fy, tl, vals = ctx
        gimg = None
        if img.requires_grad:
            gimg = np.zeros((n, c, h * w), dtype=g.dtype)
            base = (np.arange(n) * (c * h * w))[:, None, None, None] + \
                (np.arange(c) * (h * w))[None, :, None, None]
            for dx, dy, wt, inside, flat in tl:
                contrib = g * (wt * inside)[:, None]
                idx = base + flat[:, None]
                gimg += np.bincount(idx.ravel(), weights=contrib.ravel(),
                                    minlength=n * c * h * w).reshape(n, c, h * w)
            gimg = gimg.reshape(n, c, h, w).astype(iv.dtype)
        v00, v01, v10, v11 = vals
        # d/dx and d/dy of the bilinear blend
        ddx = (v01 - v00) * (1 - fy)[:, None] + (v11 - v10) * fy[:, None]
        ddy = (v10 - v00) * (1 - fx)[:, None] + (v11 - v01) * fx[:, None]
        gc = np.stack([(g * ddx).sum(axis=1), (g * ddy).sum(axis=1)], axis=-1)
        return gimg, gc.astype(cv.dtype)

    return _make("grid_sample", (img, coords), (n, c, ho, wo), _rtype(img, coords), fwd, bwd)


# ---------------------------------------------------------------- execution

def _topo(root: Node, pred: Callable[[Node], bool]) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen or not pred(node):
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def forward(root: Node) -> np.ndarray:
    """Evaluate every unevaluated node under ``root`` and return its value."""
    for node in _topo(root, lambda n: n.value is None):
        if node._fwd is None:
            raise GraphStateError(f"leaf {node!r} has no value")
        vals = [inp.value for inp in node.inputs]
        with np.errstate(all="ignore"):
            value, ctx = node._fwd(*vals)
        value = np.asarray(value)
        if value.shape != node.shape:
            raise ShapeError(f"{node.op}: produced {value.shape}, expected {node.shape}")
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{node.op} produced non-finite values")
        node.value = value.astype(node.dtype, copy=False)
        node._ctx = ctx
    return root.value


def backward(root: Node) -> dict:
    """Gradients of a scalar ``root`` with respect to every reachable leaf that
    requires them, keyed by leaf id."""
    if root.value is None:
        raise GraphStateError("backward called before forward")
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo(root, lambda n: n.requires_grad)
    grads = {root.id: np.ones(root.shape, dtype=root.dtype)}
    out = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not node.inputs:
            out[node.id] = g
            continue
        if node.value is None:
            raise GraphStateError(f"{node!r} was not evaluated")
        vals = [inp.value for inp in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = node._bwd(g, node._ctx, *vals)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if not np.isfinite(gi).all():
                raise NonFiniteError(f"gradient of {node.op} is non-finite")
            gi = np.asarray(gi, dtype=inp.dtype)
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return out


def release(root: Node) -> None:
    """Drop cached intermediate values and contexts under ``root``."""
    for node in _topo(root, lambda n: bool(n.inputs)):
        node._ctx = None


# ---------------------------------------------------------------- parameters

@dataclass
class ParamGroup:
    name: str
    tensors: list
    trainable: bool = True

    def arrays(self) -> list:
        return [t.value for t in self.tensors]


@dataclass
class OptState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "OptState":
        return OptState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                        dict(self.m), dict(self.v))


def _check_disjoint(params: Iterable[ParamGroup]) -> None:
    seen = {}
    for grp in params:
        for t in grp.tensors:
            if t.id in seen:
                raise ValueError(f"tensor {t.id} in groups {seen[t.id]!r} and {grp.name!r}")
            seen[t.id] = grp.name


def optimizer_step(params: Sequence[ParamGroup], grads: dict, state: OptState):
    """One Adam step on the trainable groups.

    Parameter arrays are replaced, never written in place, so earlier
    snapshots of them stay valid.  Frozen groups are left untouched.
    """
    _check_disjoint(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for grp in params:
        if not grp.trainable:
            continue
        for i, p in enumerate(grp.tensors):
            g = grads.get(p.id)
            if g is None:
                raise KeyError(f"no gradient for {grp.name}[{i}]")
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            key = (grp.name, i)
            g = g.astype(np.float64)
            m = state.m.get(key)
            v = state.v.get(key)
            if m is None:
                m = np.zeros(p.shape)
                v = np.zeros(p.shape)
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[key] = m
            state.v[key] = v
            upd = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            p.value = (p.value.astype(np.float64) - upd).astype(p.dtype)
    return params, state


def snapshot(params: Sequence[ParamGroup]) -> dict:
    """Immutable copy of every group: name -> (trainable, tuple of arrays)."""
    out = {}
    for grp in params:
        arrs = []
        for t in grp.tensors:
            a = np.array(t.value, copy=True)
            a.setflags(write=False)
            arrs.append(a)
        out[grp.name] = (grp.trainable, tuple(arrs))
    return out


def restore(params: Sequence[ParamGroup], snap: dict, trainable: bool = False) -> None:
    """Load arrays from a snapshot; ``trainable=True`` also restores the flags."""
    for grp in params:
        flag, arrs = snap[grp.name]
        if len(arrs) != len(grp.tensors):
            raise ShapeError(f"group {grp.name!r}: {len(arrs)} arrays for {len(grp.tensors)} tensors")
        for t, a in zip(grp.tensors, arrs):
            if a.shape != t.shape:
                raise ShapeError(f"group {grp.name!r}: shape {a.shape} != {t.shape}")
            t.value = np.array(a, dtype=t.dtype, copy=True)
        if trainable:
            grp.trainable = flag


# --------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"RVCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[ParamGroup] | dict) -> None:
    """Write groups in the binary checkpoint layout (see README)."""
    snap = params if isinstance(params, dict) else snapshot(params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(snap))]
    for name, (trainable, arrs) in snap.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BI", int(trainable), len(arrs)))
        for a in arrs:
            chunks.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into ``name -> (trainable, tuple of float32 arrays)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, ngroups = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(ngroups):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        trainable, ntensors = struct.unpack_from("<BI", buf, pos)
        pos += 5
        arrs = []
        for _ in range(ntensors):
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            a = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            a = a.astype(np.float32)
            a.setflags(write=False)
            arrs.append(a)
        out[name] = (bool(trainable), tuple(arrs))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
