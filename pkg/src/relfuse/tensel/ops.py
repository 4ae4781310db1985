"""Differentiable primitives over rank-4 tensors.

Every function here computes its forward result eagerly and, when a tape is
active and some input requires a gradient, registers a closure producing the
vector-Jacobian product for each input.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, as_tensor, emit


def _t(x, like=None) -> Tensor:
    return as_tensor(x, like)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.dims, b.dims):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot combine dims {a.dims} and {b.dims}")


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    b = _t(b.data.astype(a.dtype, copy=False)) if not b.requires_grad and b.dtype != a.dtype else b
    _check_broadcast(a, b, "add")
    sa, sb = a.dims, b.dims
    return emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    b = _t(b.data.astype(a.dtype, copy=False)) if not b.requires_grad and b.dtype != a.dtype else b
    _check_broadcast(a, b, "sub")
    sa, sb = a.dims, b.dims
    return emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; size-1 axes broadcast (e.g. a one-channel map over C channels)."""
    a, b = _t(a), _t(b)
    b = _t(b.data.astype(a.dtype, copy=False)) if not b.requires_grad and b.dtype != a.dtype else b
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.dims, b.dims
    return emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def scale(a, s: float) -> Tensor:
    a = _t(a)
    s = a.dtype.type(s)
    return emit(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a, s: float) -> Tensor:
    a = _t(a)
    return emit(a.data + a.dtype.type(s), (a,), lambda g: (g,))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    sa, sb = a.dims, b.dims
    out = ad / bd
    return emit(out, (a, b), lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)))


# ------------------------------------------------------------- elementwise

def sigmoid(x) -> Tensor:
    """Logistic function, evaluated without overflow for either sign."""
    x = _t(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _t(x)
    out = np.tanh(x.data)
    return emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return emit(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is passed only where the value was inside."""
    x = _t(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def log(x) -> Tensor:
    x = _t(x)
    d = x.data
    return emit(np.log(d), (x,), lambda g: (g / d,))


def abs_(x) -> Tensor:
    x = _t(x)
    sign = np.sign(x.data)
    return emit(np.abs(x.data), (x,), lambda g: (g * sign,))


# ------------------------------------------------------------ channel ops

def concat_channels(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    na, ca, ha, wa = a.dims
    nb, cb, hb, wb = b.dims
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: batch/spatial dims differ, {a.dims} vs {b.dims}")
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return emit(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _t(x)
    if not 0 <= start < stop <= x.dims[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {x.dims[1]} channels")
    dims, dtype = x.dims, x.dtype

    def back(g):
        full = np.zeros(dims, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return emit(x.data[:, start:stop].copy(), (x,), back)


def softmax(x) -> Tensor:
    """Softmax across the channel axis (one probability vector per sample/location)."""
    x = _t(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return emit(p, (x,), back)


def l1_distance(a, b) -> Tensor:
    """Per-location channelwise L1 residual, (N, C, H, W) x2 -> (N, 1, H, W)."""
    a, b = _t(a), _t(b)
    if a.dims != b.dims:
        raise ShapeError(f"l1_distance: dims differ, {a.dims} vs {b.dims}")
    diff = a.data - b.data
    sign = np.sign(diff)

    def back(g):
        ga = g * sign
        return (ga, -ga)

    return emit(np.abs(diff).sum(axis=1, keepdims=True), (a, b), back)


def global_avg_pool(x) -> Tensor:
    x = _t(x)
    n, c, h, w = x.dims
    inv = 1.0 / (h * w)
    return emit(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                lambda g: (np.broadcast_to(g * inv, (n, c, h, w)).astype(x.dtype),))


def space_to_depth(x, block: int) -> Tensor:
    """Fold each block x block patch into channels: (N,C,H,W) -> (N, C*b*b, H/b, W/b)."""
    x = _t(x)
    n, c, h, w = x.dims
    if h % block or w % block:
        raise ShapeError(f"space_to_depth: {h}x{w} not divisible by {block}")
    hb, wb = h // block, w // block
    out = x.data.reshape(n, c, hb, block, wb, block).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * block * block, hb, wb)

    def back(g):
        gi = g.reshape(n, c, block, block, hb, wb).transpose(0, 1, 4, 2, 5, 3)
        return (gi.reshape(n, c, h, w),)

    return emit(np.ascontiguousarray(out), (x,), back)


# ------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = _t(x)
    dims = x.dims
    return emit(x.data.sum().reshape(1, 1, 1, 1), (x,),
                lambda g: (np.broadcast_to(g.reshape(()), dims).astype(x.dtype),))


def mean_all(x) -> Tensor:
    x = _t(x)
    dims = x.dims
    inv = 1.0 / x.data.size
    return emit(x.data.mean().reshape(1, 1, 1, 1), (x,),
                lambda g: (np.broadcast_to(g.reshape(()) * inv, dims).astype(x.dtype),))


def masked_mean(x, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where the (broadcastable, constant) mask is set.

    An empty mask yields an exact zero with zero gradient.
    """
    x = _t(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.dims)
    count = int(m.sum())
    dims, dtype = x.dims, x.dtype
    if count == 0:
        return emit(np.zeros((1, 1, 1, 1), dtype=dtype), (x,), lambda g: (np.zeros(dims, dtype=dtype),))
    val = x.data[m].sum() / count
    w = m.astype(dtype) / count
    return emit(np.asarray(val, dtype=dtype).reshape(1, 1, 1, 1), (x,), lambda g: (g.reshape(()) * w,))


# ----------------------------------------------------------- batch gather

def take_batch(x, rows: np.ndarray) -> Tensor:
    x = _t(x)
    rows = np.asarray(rows, dtype=np.intp)
    dims, dtype = x.dims, x.dtype

    def back(g):
        full = np.zeros(dims, dtype=dtype)
        np.add.at(full, rows, g)
        return (full,)

    return emit(x.data[rows], (x,), back)


def scatter_batch(x, rows: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``x`` at batch positions ``rows`` of an all-zero batch of size n."""
    x = _t(x)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + x.dims[1:], dtype=x.dtype)
    out[rows] = x.data
    return emit(out, (x,), lambda g: (g[rows],))


# -------------------------------------------------------------- convolution

def _im2col3(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=xd.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(n, c * 9, h, w)


def _col2im3(gcols: np.ndarray, c: int) -> np.ndarray:
    n, _, h, w = gcols.shape
    gcols = gcols.reshape(n, c, 9, h, w)
    gp = np.zeros((n, c, h + 2, w + 2), dtype=gcols.dtype)
    for ky in range(3):
        for kx in range(3):
            gp[:, :, ky:ky + h, kx:kx + w] += gcols[:, :, ky * 3 + kx]
    return gp[:, :, 1:h + 1, 1:w + 1]


def conv2d(x, weight, bias) -> Tensor:
    """Stride-1, zero-padded 'same' convolution with a 1x1 or 3x3 kernel.

    weight has dims (C_out, C_in, k, k), bias (1, C_out, 1, 1).
    """
    x, w, b = _t(x), _t(weight), _t(bias)
    cout, cin, kh, kw = w.dims
    n, c, h, wd = x.dims
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin} (weight dims {w.dims})")
    if b.dims != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias dims {b.dims} do not match (1, {cout}, 1, 1)")
    cols = x.data if kh == 1 else _im2col3(x.data)
    wm = w.data.reshape(cout, -1)
    out = np.tensordot(wm, cols, axes=([1], [1])).transpose(1, 0, 2, 3) + b.data
    out = np.ascontiguousarray(out)

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])).reshape(w.dims)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        gcols = np.tensordot(wm, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gcols if kh == 1 else _col2im3(np.ascontiguousarray(gcols), c)
        return (np.ascontiguousarray(gx), gw, gb)

    return emit(out, (x, w, b), back)


# ----------------------------------------------------------------- losses

def bce_with_logits(logits, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against soft targets."""
    z = _t(logits)
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.dims:
        raise ShapeError(f"bce_with_logits: target {t.shape} vs logits {z.dims}")
    zd = z.data
    loss = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    e = np.exp(-np.abs(zd))
    p = np.where(zd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return emit(loss, (z,), lambda g: (g * (p - t),))


def param_tensor(p) -> Tensor:
    return p.value if isinstance(p, Parameter) else _t(p)
