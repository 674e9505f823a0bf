"""Parameterized layers on top of the tensor ops.

A minimal ``Module`` tree provides deterministic parameter registration
(attribute insertion order), which fixes both the weight-init draw order
and the checkpoint tensor order.

Quantization support: forwards accept an optional ``qctx`` (see
``dualseg.quant``).  In observe mode the context records activation ranges
at every conv/transpose-conv input and output; in apply mode it substitutes
fake-quantized weights/activations.  For the Conv+BN+PReLU composites the
BN is folded into the conv, so the recorded "out" point is the post-BN
value.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor


class Module:
    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix[:-1], self
        for cname, child in self._children():
            yield from child.named_modules(prefix + cname + ".")

    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _kaiming_fanout(rng, shape, fan_out, dtype):
    std = np.sqrt(2.0 / fan_out)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, dtype, stride=1, dilation=1,
                 groups=1, bias=False, padding=None):
        k = (kernel, kernel) if isinstance(kernel, int) else kernel
        d = (dilation, dilation) if isinstance(dilation, int) else dilation
        s = (stride, stride) if isinstance(stride, int) else stride
        if padding is None:
            # "same" padding: non-strided 3x3/dilated convs preserve spatial size
            padding = (d[0] * (k[0] - 1) // 2, d[1] * (k[1] - 1) // 2)
        p = (padding, padding) if isinstance(padding, int) else padding
        self.p = ConvParams(in_ch, out_ch, k, s, p, d, groups, bias)
        self.weight = _kaiming_fanout(rng, self.p.weight_shape(), out_ch * k[0] * k[1], dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.qname = None

    def forward(self, x, qctx=None):
        if qctx is None:
            return T.conv2d(x, self.weight, self.bias, self.p)
        if qctx.observing:
            qctx.observe(self.qname + ".in", x.data)
            y = T.conv2d(x, self.weight, self.bias, self.p)
            qctx.observe(self.qname + ".out", y.data)
            return y
        xq = qctx.fq_act(self.qname + ".in", x)
        wq, bq = qctx.conv_weights(self.qname)
        y = T.conv2d(xq, Tensor(wq), None if bq is None else Tensor(bq), self.p)
        return qctx.fq_act(self.qname + ".out", y)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, rng, dtype, kernel=2, stride=2, bias=False):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.weight = _kaiming_fanout(rng, (in_ch, out_ch, kernel, kernel),
                                      out_ch * kernel * kernel, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.qname = None

    def forward(self, x, qctx=None):
        if qctx is None:
            return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.kernel)
        if qctx.observing:
            qctx.observe(self.qname + ".in", x.data)
            y = T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.kernel)
            qctx.observe(self.qname + ".out", y.data)
            return y
        xq = qctx.fq_act(self.qname + ".in", x)
        wq, bq = qctx.conv_weights(self.qname)
        y = T.conv_transpose2d(xq, Tensor(wq), None if bq is None else Tensor(bq),
                               self.stride, self.kernel)
        return qctx.fq_act(self.qname + ".out", y)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, ch, dtype, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, ch, dtype, init=0.25):
        self.slope = Tensor(np.full(ch, init, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.prelu(x, self.slope)


class ConvBNAct(Module):
    """Conv (or transpose conv) followed by BatchNorm and PReLU.

    The unit every stem/merge/decoder layer uses; also the BN-folding
    boundary for post-training quantization.
    """

    def __init__(self, in_ch, out_ch, kernel, rng, dtype, stride=1, transpose=False):
        if transpose:
            self.conv = ConvTranspose2d(in_ch, out_ch, rng, dtype, kernel=kernel, stride=stride)
        else:
            self.conv = Conv2d(in_ch, out_ch, kernel, rng, dtype, stride=stride)
        self.bn = BatchNorm2d(out_ch, dtype)
        self.act = PReLU(out_ch, dtype)

    def forward(self, x, training=False, qctx=None):
        if qctx is None:
            return self.act.forward(self.bn.forward(self.conv.forward(x), training))
        name = self.conv.qname
        if qctx.observing:
            qctx.observe(name + ".in", x.data)
            y = self.bn.forward(self.conv.forward(x), training=False)
            qctx.observe(name + ".out", y.data)
            return self.act.forward(y)
        # apply: BN already folded into the stored weights
        xq = qctx.fq_act(name + ".in", x)
        wq, bq = qctx.conv_weights(name)
        if isinstance(self.conv, ConvTranspose2d):
            y = T.conv_transpose2d(xq, Tensor(wq), Tensor(bq),
                                   self.conv.stride, self.conv.kernel)
        else:
            y = T.conv2d(xq, Tensor(wq), Tensor(bq), self.conv.p)
        y = qctx.fq_act(name + ".out", y)
        return self.act.forward(y)
