"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it and a closure that
maps the output gradient to gradients of its inputs.  ``backward`` walks the
recorded graph in reverse topological order.  Image tensors use NHWC layout,
sequences use (batch, time, channels).
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class UsageError(RuntimeError):
    """Raised when the autodiff engine is driven incorrectly."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- graph traversal --------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not part of a tracked graph")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward):
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise arithmetic -------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def minimum(a, b):
    a, b = _pair(a, b)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)))


# -- unary functions ---------------------------------------------------------
def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),))


def clip(a, lo, hi):
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- reductions and shape manipulation ---------------------------------------
def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    shape = a.shape
    dtype = a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- losses with fused, numerically stable kernels ----------------------------
def bce_with_logits(logits, target):
    """Mean binary cross-entropy between ``sigmoid(logits)`` and ``target``."""
    z = logits.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    if z.shape != t.shape:
        raise ShapeError(f"bce shapes differ: {z.shape} vs {t.shape}")
    n = z.size
    val = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _make(np.asarray(val.mean(), dtype=z.dtype), (logits,), lambda g: (g * (_sigmoid(z) - t) / n,))


# -- convolutions --------------------------------------------------------------
def _im2col(xp, kh, kw, stride, ho, wo):
    """(B, H, W, C) -> contiguous (B * ho * wo, kh * kw * C) patch matrix."""
    bsz, h, w, c = xp.shape
    if kh == kw == stride and h == ho * stride and w == wo * stride:
        # non-overlapping windows: a pure space-to-depth permutation
        return xp.reshape(bsz, ho, kh, wo, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(-1, kh * kw * c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * c)


def _col2im(cols, out_shape, stride, hi, wi, kh, kw, dtype):
    """Scatter-add a (B * hi * wi, kh * kw * C) patch matrix into (B, H, W, C)."""
    bsz, h, w, c = out_shape
    if kh == kw == stride and h == hi * stride and w == wi * stride:
        return cols.reshape(bsz, hi, wi, kh, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(out_shape)
    cols = cols.reshape(bsz, hi, wi, kh, kw, c)
    out = np.zeros(out_shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (hi - 1) + 1 : stride, j : j + stride * (wi - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution; x is (B, H, W, Cin), w is (kh, kw, Cin, Cout)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or xd.shape[3] != wd.shape[2]:
        raise ShapeError(f"conv2d input {xd.shape} incompatible with weight {wd.shape}")
    bsz, h, wid, cin = xd.shape
    kh, kw, _, cout = wd.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wid + 2 * p - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wd.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat.T, xp.shape, stride, ho, wo, kh, kw, xd.dtype)
            gx = gxp[:, p : p + h, p : p + wid] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Transposed 2-D convolution; x is (B, H, W, Cin), w is (kh, kw, Cin, Cout).

    Output side length is ``(H - 1) * stride + kh - 2 * padding``.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or xd.shape[3] != wd.shape[2]:
        raise ShapeError(f"conv_transpose2d input {xd.shape} incompatible with weight {wd.shape}")
    bsz, h, wid, cin = xd.shape
    kh, kw, _, cout = wd.shape
    p = padding
    hp = (h - 1) * stride + kh
    wp = (wid - 1) * stride + kw
    # (Cin, kh * kw * Cout), matching the patch ordering of _im2col
    wmat = wd.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    xmat = xd.reshape(-1, cin)
    dtype = np.result_type(xd, wd)
    full = _col2im(xmat @ wmat, (bsz, hp, wp, cout), stride, h, wid, kh, kw, dtype)
    out = full[:, p : hp - p, p : wp - p] if p else full
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (p, p), (p, p), (0, 0))) if p else g
        gcols = _im2col(gfull, kh, kw, stride, h, wid)
        gw = (xmat.T @ gcols).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        gx = (gcols @ wmat.T).reshape(xd.shape) if x.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, backward)


def causal_conv1d(x, w, b=None, dilation=1):
    """Causal 1-D convolution; x is (B, T, Cin), w is (k, Cin, Cout).

    Output step ``t`` only sees inputs at steps ``<= t``; the sequence is
    left-padded with zeros so the length is preserved.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise ShapeError(f"causal_conv1d input {xd.shape} incompatible with weight {wd.shape}")
    bsz, t, cin = xd.shape
    k, _, cout = wd.shape
    pad = (k - 1) * dilation
    xp = np.pad(xd, ((0, 0), (pad, 0), (0, 0)))
    taps = [xp[:, i * dilation : i * dilation + t].reshape(-1, cin) for i in range(k)]
    out = sum(taps[i] @ wd[i] for i in range(k)).reshape(bsz, t, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = np.stack([taps[i].T @ g2 for i in range(k)])
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                gxp[:, i * dilation : i * dilation + t] += (g2 @ wd[i].T).reshape(bsz, t, cin)
            gx = gxp[:, pad:]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


def conv_transpose1d(x, w, b=None, stride=1):
    """Transposed 1-D convolution; x is (B, T, Cin), w is (k, Cin, Cout).

    Output length is ``(T - 1) * stride + k``.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise ShapeError(f"conv_transpose1d input {xd.shape} incompatible with weight {wd.shape}")
    bsz, t, cin = xd.shape
    k, _, cout = wd.shape
    tout = (t - 1) * stride + k
    xmat = xd.reshape(-1, cin)
    out = np.zeros((bsz, tout, cout), dtype=np.result_type(xd, wd))
    for i in range(k):
        out[:, i : i + stride * (t - 1) + 1 : stride] += (xmat @ wd[i]).reshape(bsz, t, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def backward(g):
        slices = [g[:, i : i + stride * (t - 1) + 1 : stride].reshape(-1, cout) for i in range(k)]
        gw = np.stack([xmat.T @ s for s in slices])
        gx = sum(s @ wd[i].T for i, s in enumerate(slices)).reshape(xd.shape) if x.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)
