"""Kernel backend selection.

The hot convolution kernels exist twice: numba-compiled loops and a pure
numpy im2col fallback.  ``DUALSEG_BACKEND`` picks at import time:

  * ``auto`` (default) - per-shape mix: numba for depthwise convolutions,
    the BLAS-backed numpy path for everything else (the split
    ``benchmarks/bench_kernels.py`` measures fastest); plain numpy when
    numba is unavailable
  * ``numba``          - numba loops everywhere, fail loudly if missing
  * ``numpy``          - force the pure-numpy fallback

Within any fixed setting results are bit-reproducible run to run (the
mixed dispatch maps each shape class to one backend deterministically).
"""

import os

from . import numpy_impl

_choice = os.environ.get("DUALSEG_BACKEND", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"DUALSEG_BACKEND must be auto|numba|numpy, got {_choice!r}")

if _choice in ("auto", "numba"):
    try:
        from . import numba_impl
    except ImportError:
        if _choice == "numba":
            raise
        numba_impl = None
else:
    numba_impl = None

conv_out_size = numpy_impl.conv_out_size


def _depthwise(w_shape, groups):
    return w_shape[1] == 1 and groups == w_shape[0]


if _choice == "numba":
    BACKEND = "numba"
    conv2d_forward = numba_impl.conv2d_forward
    conv2d_grad_input = numba_impl.conv2d_grad_input
    conv2d_grad_weight = numba_impl.conv2d_grad_weight
elif _choice == "numpy" or numba_impl is None:
    BACKEND = "numpy"
    conv2d_forward = numpy_impl.conv2d_forward
    conv2d_grad_input = numpy_impl.conv2d_grad_input
    conv2d_grad_weight = numpy_impl.conv2d_grad_weight
else:
    BACKEND = "mixed"

    def conv2d_forward(x, w, b, stride, padding, dilation, groups):
        impl = numba_impl if _depthwise(w.shape, groups) else numpy_impl
        return impl.conv2d_forward(x, w, b, stride, padding, dilation, groups)

    def conv2d_grad_input(gout, w, x_shape, stride, padding, dilation, groups):
        impl = numba_impl if _depthwise(w.shape, groups) else numpy_impl
        return impl.conv2d_grad_input(gout, w, x_shape, stride, padding, dilation, groups)

    def conv2d_grad_weight(gout, x, w_shape, stride, padding, dilation, groups):
        impl = numba_impl if _depthwise(w_shape, groups) else numpy_impl
        return impl.conv2d_grad_weight(gout, x, w_shape, stride, padding, dilation, groups)
