"""Numba-compiled convolution kernels.

Same contracts as ``numpy_impl``; direct loops instead of im2col.  Each
output element is produced by exactly one thread and inner accumulation
order is fixed, so results are bitwise-deterministic for a fixed thread
count.  fastmath stays off for the same reason.
"""

import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"

from .numpy_impl import conv_out_size


@njit(cache=True, parallel=True)
def _conv2d_forward(x, w, sh, sw, ph, pw, dh, dw, groups, out):
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    ocg = oc // groups
    for oco in prange(oc):
        g = oco // ocg
        c0 = g * icg
        for b in range(n):
            for i in range(oh):
                ih0 = i * sh - ph
                for j in range(ow):
                    jw0 = j * sw - pw
                    acc = 0.0
                    for ic in range(icg):
                        for ki in range(kh):
                            ih = ih0 + ki * dh
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(kw):
                                jw = jw0 + kj * dw
                                if jw < 0 or jw >= wd:
                                    continue
                                acc += x[b, c0 + ic, ih, jw] * w[oco, ic, ki, kj]
                    out[b, oco, i, j] = acc
    return out


@njit(cache=True, parallel=True)
def _conv2d_grad_input(gout, w, sh, sw, ph, pw, dh, dw, groups, gx):
    n, c, h, wd = gx.shape
    oc, icg, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    ocg = oc // groups
    for ci in prange(c):
        g = ci // icg
        ic = ci - g * icg
        o0 = g * ocg
        for b in range(n):
            for oco in range(ocg):
                for i in range(oh):
                    ih0 = i * sh - ph
                    for j in range(ow):
                        jw0 = j * sw - pw
                        go = gout[b, o0 + oco, i, j]
                        for ki in range(kh):
                            ih = ih0 + ki * dh
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(kw):
                                jw = jw0 + kj * dw
                                if jw < 0 or jw >= wd:
                                    continue
                                gx[b, ci, ih, jw] += go * w[o0 + oco, ic, ki, kj]
    return gx


@njit(cache=True, parallel=True)
def _conv2d_grad_weight(gout, x, sh, sw, ph, pw, dh, dw, groups, gw):
    n, c, h, wd = x.shape
    oc, icg, kh, kw = gw.shape
    oh, ow = gout.shape[2], gout.shape[3]
    ocg = oc // groups
    for oco in prange(oc):
        g = oco // ocg
        c0 = g * icg
        for ic in range(icg):
            for ki in range(kh):
                for kj in range(kw):
                    acc = 0.0
                    for b in range(n):
                        for i in range(oh):
                            ih = i * sh - ph + ki * dh
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(ow):
                                jw = j * sw - pw + kj * dw
                                if jw < 0 or jw >= wd:
                                    continue
                                acc += gout[b, oco, i, j] * x[b, c0 + ic, ih, jw]
                    gw[oco, ic, ki, kj] = acc
    return gw


def conv2d_forward(x, w, b, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    oh = conv_out_size(h, kh, stride[0], padding[0], dilation[0])
    ow = conv_out_size(wd, kw, stride[1], padding[1], dilation[1])
    out = np.empty((n, oc, oh, ow), dtype=x.dtype)
    _conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w),
                    stride[0], stride[1], padding[0], padding[1],
                    dilation[0], dilation[1], groups, out)
    if b is not None:
        out += b.reshape(1, oc, 1, 1)
    return out


def conv2d_grad_input(gout, w, x_shape, stride, padding, dilation, groups):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    _conv2d_grad_input(np.ascontiguousarray(gout), np.ascontiguousarray(w),
                       stride[0], stride[1], padding[0], padding[1],
                       dilation[0], dilation[1], groups, gx)
    return gx


def conv2d_grad_weight(gout, x, w_shape, stride, padding, dilation, groups):
    gw = np.empty(w_shape, dtype=gout.dtype)
    _conv2d_grad_weight(np.ascontiguousarray(gout), np.ascontiguousarray(x),
                        stride[0], stride[1], padding[0], padding[1],
                        dilation[0], dilation[1], groups, gw)
    return gw
