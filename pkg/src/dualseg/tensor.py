"""Dense NCHW tensor with tape-based reverse-mode autodiff.

Only the operator set the segmentation architecture needs is provided.
Every op records a closure on the output node; ``Tensor.backward()`` walks
the tape in reverse topological order and accumulates into ``.grad``.
Repeated backward calls accumulate until ``zero_grad``.

Two float precisions coexist: float64 for oracle/gradient tests, float32
for training and inference.  Precision is carried by the array dtype of
each tensor, never by a global switch.  Binary ops require matching dtypes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (validation / EMA bookkeeping)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accum_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def _result(data, parents, backward):
    """Wrap an op result; records the tape edge only when useful."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._prev for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def _check_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ: {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(x, y):
    x, y = _as_tensor(x), _as_tensor(y, like=x)
    _check_same_shape(x, y, "add")
    _check_dtype(x, y, "add")

    def backward(g):
        if x.requires_grad or x._prev:
            x.accum_grad(g)
        if y.requires_grad or y._prev:
            y.accum_grad(g)

    return _result(x.data + y.data, (x, y), backward)


def mul(x, y):
    if not isinstance(y, Tensor):      # scalar fast path
        return scale(x, float(y))
    if not isinstance(x, Tensor):
        return scale(y, float(x))
    _check_same_shape(x, y, "mul")
    _check_dtype(x, y, "mul")

    def backward(g):
        if x.requires_grad or x._prev:
            x.accum_grad(g * y.data)
        if y.requires_grad or y._prev:
            y.accum_grad(g * x.data)

    return _result(x.data * y.data, (x, y), backward)


def div(x, y):
    x, y = _as_tensor(x), _as_tensor(y, like=x)
    _check_same_shape(x, y, "div")

    def backward(g):
        if x.requires_grad or x._prev:
            x.accum_grad(g / y.data)
        if y.requires_grad or y._prev:
            y.accum_grad(-g * x.data / (y.data * y.data))

    return _result(x.data / y.data, (x, y), backward)


def scale(x, s):
    x = _as_tensor(x)
    s = float(s)

    def backward(g):
        x.accum_grad(g * s)

    return _result(x.data * s, (x,), backward)


def add_scalar(x, s):
    x = _as_tensor(x)
    s = float(s)

    def backward(g):
        x.accum_grad(g)

    return _result(x.data + s, (x,), backward)


def log(x):
    def backward(g):
        x.accum_grad(g / x.data)

    return _result(np.log(x.data), (x,), backward)


def pow_scalar(x, exponent):
    e = float(exponent)
    out_data = x.data ** e

    def backward(g):
        x.accum_grad(g * e * x.data ** (e - 1.0))

    return _result(out_data, (x,), backward)


def clip(x, lo, hi):
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.accum_grad(g * mask)

    return _result(np.clip(x.data, lo, hi), (x,), backward)


def sum_all(x):
    def backward(g):
        x.accum_grad(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum(dtype=x.data.dtype)), (x,), backward)


def sum_axis(x, axis):
    axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)

    def backward(g):
        x.accum_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype, copy=False))

    return _result(x.data.sum(axis=axis), (x,), backward)


def reshape(x, shape):
    shape = tuple(shape)

    def backward(g):
        x.accum_grad(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x.accum_grad(g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes; batch dims must match."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad or a._prev:
            a.accum_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad or b._prev:
            b.accum_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def concat_channels(xs):
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    n, _, h, w = xs[0].shape
    for i, t in enumerate(xs[1:], 1):
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(
                f"concat_channels: input {i} has shape {t.shape}, expected (N={n}, *, H={h}, W={w})")
    widths = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._prev:
                t.accum_grad(g[:, lo:hi])

    return _result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), backward)


def _softmax(data, axis):
    z = data - data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_op(x, axis):
    s = _softmax(x.data, axis)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x.accum_grad(s * (g - dot))

    return _result(s, (x,), backward)


def softmax_channel(x):
    """Softmax over the channel axis of an NCHW tensor, per pixel."""
    if x.ndim != 4:
        raise ShapeError(f"softmax_channel expects NCHW, got shape {x.shape}")
    return _softmax_op(x, 1)


def softmax_last(x):
    return _softmax_op(x, -1)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvParams:
    """Static description of a 2-D convolution.

    Covers the standard, dilated (dilation > 1), depthwise (groups == C)
    and point-wise (1x1) cases with a single parameter set.
    """
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}")

    def out_hw(self, h, w):
        oh = kernels.conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0])
        ow = kernels.conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1])
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output size {oh}x{ow} < 1 for input {h}x{w}")
        return oh, ow

    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


def conv2d(x, w, b, p: ConvParams):
    """Cross-correlation with stride/padding/dilation/groups.

    Differentiable w.r.t. x, w and b.  Weight layout (out, in/groups, kh, kw).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, ConvParams expects {p.in_channels}")
    if w.shape != p.weight_shape():
        raise ShapeError(f"conv2d: weight shape {w.shape} != expected {p.weight_shape()}")
    if b is not None and b.shape != (p.out_channels,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({p.out_channels},)")
    p.out_hw(x.shape[2], x.shape[3])
    out = kernels.conv2d_forward(x.data, w.data, None if b is None else b.data,
                                 p.stride, p.padding, p.dilation, p.groups)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or x._prev:
            x.accum_grad(kernels.conv2d_grad_input(g, w.data, x.shape,
                                                   p.stride, p.padding, p.dilation, p.groups))
        if w.requires_grad or w._prev:
            w.accum_grad(kernels.conv2d_grad_weight(g, x.data, w.shape,
                                                    p.stride, p.padding, p.dilation, p.groups))
        if b is not None and (b.requires_grad or b._prev):
            b.accum_grad(g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=2, kernel=2, padding=0):
    """Transposed convolution; forward equals conv2d's backward-by-input.

    Weight layout (in, out, kh, kw).  With the architecture's kernel-2 /
    stride-2 setting this is an exact 2x upsampler.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects NCHW input, got shape {x.shape}")
    ic, oc, kh, kw = w.shape
    if x.shape[1] != ic:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, weight expects {ic}")
    if (kh, kw) != (kernel, kernel):
        raise ShapeError(f"conv_transpose2d: weight kernel {(kh, kw)} != {(kernel, kernel)}")
    n, _, h, wd = x.shape
    oh = stride * (h - 1) + kernel - 2 * padding
    ow = stride * (wd - 1) + kernel - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d output size {oh}x{ow} < 1")
    st = (stride, stride)
    pd = (padding, padding)
    dl = (1, 1)
    out = kernels.conv2d_grad_input(x.data, w.data, (n, oc, oh, ow), st, pd, dl, 1)
    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or x._prev:
            x.accum_grad(kernels.conv2d_forward(g, w.data, None, st, pd, dl, 1))
        if w.requires_grad or w._prev:
            w.accum_grad(kernels.conv2d_grad_weight(x.data, g, w.shape, st, pd, dl, 1))
        if b is not None and (b.requires_grad or b._prev):
            b.accum_grad(g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    Training mode normalizes by batch moments and folds them into the
    running stats via ``running = (1-momentum)*running + momentum*batch``
    (biased variance throughout).  Eval mode uses the running stats and
    never mutates them.
    """
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {t.shape}, expected ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running stats sized {running_mean.shape}, expected ({c},)")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad or gamma._prev:
            gamma.accum_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad or beta._prev:
            beta.accum_grad(g.sum(axis=axes))
        if x.requires_grad or x._prev:
            gsc = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                gm = gsc.mean(axis=axes).reshape(1, c, 1, 1)
                gxh = (gsc * xhat).mean(axis=axes).reshape(1, c, 1, 1)
                gx = inv_std.reshape(1, c, 1, 1) * (gsc - gm - xhat * gxh)
            else:
                gx = gsc * inv_std.reshape(1, c, 1, 1)
            x.accum_grad(gx)

    del m
    return _result(out, (x, gamma, beta), backward)


def prelu(x, a):
    """y = x where x >= 0 else a_c * x, with a per-channel slope."""
    c = x.shape[1]
    if a.shape != (c,):
        raise ShapeError(f"prelu: slope has shape {a.shape}, expected ({c},)")
    neg = x.data < 0
    av = a.data.reshape(1, c, 1, 1)
    out = np.where(neg, av * x.data, x.data)

    def backward(g):
        if x.requires_grad or x._prev:
            x.accum_grad(np.where(neg, av * g, g))
        if a.requires_grad or a._prev:
            a.accum_grad(np.where(neg, g * x.data, 0.0).sum(axis=(0, 2, 3)))

    return _result(out, (x, a), backward)


def avg_pool2(x):
    """2x2 average pooling, stride 2.  Odd spatial sizes are rejected.

    Summation order (row-major within the window, then *0.25) is fixed so
    results are bit-reproducible.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 requires even spatial size, got {h}x{w}")
    d = x.data
    out = (((d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2]) + d[:, :, 1::2, 0::2])
           + d[:, :, 1::2, 1::2]) * np.asarray(0.25, dtype=x.dtype)

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=x.dtype)
        x.accum_grad(gx)

    return _result(out, (x,), backward)
