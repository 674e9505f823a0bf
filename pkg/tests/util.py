"""Shared test helpers: independent oracles and finite-difference checks.

The oracles here deliberately avoid the library's own compute paths: the
convolution reference is a naive 6-nested loop, loss oracles are literal
scalar-formula loops, and gradients come from central differences.
"""

import numpy as np

from dualseg.tensor import Tensor


def ref_conv2d(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1, bias=None):
    """Naive loop convolution oracle (float64)."""
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    ocg = oc // groups
    for b in range(n):
        for o in range(oc):
            g = o // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(icg):
                        for ki in range(kh):
                            for kj in range(kw):
                                ih = i * sh - ph + ki * dh
                                jw = j * sw - pw + kj * dw
                                if 0 <= ih < h and 0 <= jw < wd:
                                    acc += x[b, g * icg + ic, ih, jw] * w[o, ic, ki, kj]
                    out[b, o, i, j] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


def fd_gradients(loss_fn, tensors, n_samples=20, eps=1e-5, rng=None):
    """Central finite differences on sampled entries of each tensor.

    Returns max relative error between analytic grads (via backward) and
    numeric estimates.  ``loss_fn`` must rebuild the graph on every call.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "tensor received no gradient"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        k = min(n_samples, flat.size)
        idxs = rng.choice(flat.size, size=k, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = loss_fn().item()
            flat[idx] = orig - eps
            lm = loss_fn().item()
            flat[idx] = orig
            num = (lp - lm) / (2 * eps)
            # the 1e-3 floor keeps FD noise on (near-)zero gradients, e.g.
            # dead dilated-kernel taps, from masquerading as relative error
            err = abs(num - gflat[idx]) / max(abs(num), abs(gflat[idx]), 1e-3)
            worst = max(worst, err)
    return worst


def rand_tensor(rng, shape, requires_grad=False, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


def inner(a, b):
    return float((np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)).sum())
