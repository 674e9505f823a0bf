"""Pure-numpy convolution kernels (im2col / col2im based).

These are the fallback implementations behind ``dualseg.kernels``; the numba
twins in ``numba_impl`` compute the same quantities with explicit loops.
All functions take/return plain ``np.ndarray`` in NCHW layout and never
touch autodiff state.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def conv_out_size(size, kernel, stride, padding, dilation):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(x, kh, kw, sh, sw, ph, pw, dh, dw, oh, ow):
    """View of every receptive field: (N, C, OH, OW, KH, KW)."""
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    vh = dh * (kh - 1) + 1
    vw = dw * (kw - 1) + 1
    win = sliding_window_view(x, (vh, vw), axis=(2, 3))
    return win[:, :, ::sh, ::sw, ::dh, ::dw][:, :, :oh, :ow]


def conv2d_forward(x, w, b, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh = conv_out_size(h, kh, sh, ph, dh)
    ow = conv_out_size(wd, kw, sw, pw, dw)
    win = _windows(x, kh, kw, sh, sw, ph, pw, dh, dw, oh, ow)
    if groups == c and icg == 1 and oc == c:
        # depthwise fast path
        out = np.einsum("nchwij,cij->nchw", win, w[:, 0], optimize=True)
    else:
        ocg = oc // groups
        out = np.empty((n, oc, oh, ow), dtype=x.dtype)
        for g in range(groups):
            wg = w[g * ocg:(g + 1) * ocg].reshape(ocg, -1)
            cols = win[:, g * icg:(g + 1) * icg].transpose(0, 2, 3, 1, 4, 5)
            cols = cols.reshape(n, oh * ow, icg * kh * kw)
            og = cols @ wg.T                       # (n, oh*ow, ocg)
            out[:, g * ocg:(g + 1) * ocg] = og.transpose(0, 2, 1).reshape(n, ocg, oh, ow)
    if b is not None:
        out = out + b.reshape(1, oc, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_grad_input(gout, w, x_shape, stride, padding, dilation, groups):
    n, c, h, wd = x_shape
    oc, icg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh, ow = gout.shape[2], gout.shape[3]
    gx = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gout.dtype)
    ocg = oc // groups
    for g in range(groups):
        go = gout[:, g * ocg:(g + 1) * ocg]
        wg = w[g * ocg:(g + 1) * ocg]
        # (n, oh, ow, icg, kh, kw) = sum over ocg
        gcols = np.tensordot(go, wg, axes=([1], [0]))
        dst = gx[:, g * icg:(g + 1) * icg]
        for i in range(kh):
            for j in range(kw):
                dst[:, :, i * dh:i * dh + sh * oh:sh, j * dw:j * dw + sw * ow:sw] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if ph or pw:
        gx = gx[:, :, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gx)


def conv2d_grad_weight(gout, x, w_shape, stride, padding, dilation, groups):
    oc, icg, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh, ow = gout.shape[2], gout.shape[3]
    win = _windows(x, kh, kw, sh, sw, ph, pw, dh, dw, oh, ow)
    ocg = oc // groups
    gw = np.empty(w_shape, dtype=gout.dtype)
    for g in range(groups):
        go = gout[:, g * ocg:(g + 1) * ocg]
        wg = win[:, g * icg:(g + 1) * icg]
        gw[g * ocg:(g + 1) * ocg] = np.einsum("nohw,nihwkl->oikl", go, wg, optimize=True)
    return gw
