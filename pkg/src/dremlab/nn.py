"""Layers, optimizer and checkpoint container built on :mod:`dremlab.tensor`."""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


class Module:
    """Container that discovers parameters from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def copy_from(self, other, tau=1.0):
        """Polyak update ``self <- tau * other + (1 - tau) * self``."""
        for (_, p), (_, q) in zip(self.named_parameters(), other.named_parameters()):
            if tau == 1.0:
                p.data = q.data.copy()
            else:
                p.data = tau * q.data + (1.0 - tau) * p.data

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, scale=None):
        bound = scale if scale is not None else np.sqrt(1.0 / n_in)
        self.weight = parameter(_uniform(rng, bound, (n_in, n_out), dtype))
        self.bias = parameter(np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    """Square-kernel NHWC convolution with He-style uniform initialization."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (kernel, kernel, c_in, c_out), dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * kernel * kernel / (stride * stride)
        self.weight = parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (kernel, kernel, c_in, c_out), dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class CausalConv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, dilation=1, dtype=np.float32):
        fan_in = c_in * kernel
        self.weight = parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (kernel, c_in, c_out), dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.dilation = dilation

    def forward(self, x):
        return T.causal_conv1d(x, self.weight, self.bias, self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dtype=np.float32):
        fan_in = c_in * kernel / stride
        self.weight = parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (kernel, c_in, c_out), dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride

    def forward(self, x):
        return T.conv_transpose1d(x, self.weight, self.bias, self.stride)


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- checkpoint container ------------------------------------------------------
#
# Layout (little-endian):
#   magic  b"TNCK"           4 bytes
#   version                  u32
#   header_len               u32, followed by a UTF-8 JSON header
#   n_tensors                u32
#   per tensor:
#     name_len u16, name (UTF-8)
#     dtype tag u8 (1 = float32, 2 = float64)
#     ndim u8, dims u32 * ndim
#     raw values, C order
CHECKPOINT_MAGIC = b"TNCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(tensors, header=None):
    buf = io.BytesIO()
    head = json.dumps(header or {}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float64)
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def loads_checkpoint(blob):
    try:
        return _parse_checkpoint(blob)
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a tensor checkpoint")
    version, hlen = struct.unpack_from("<II", view, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(bytes(view[off : off + hlen]).decode())
    off += hlen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + nlen]).decode()
        off += nlen
        tag, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        dtype = _TAG_DTYPES[tag].newbyteorder("<")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * dtype.itemsize
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return header, tensors


def save_checkpoint(path, tensors, header=None):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(tensors, header))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
