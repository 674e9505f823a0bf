"""Dual-decoder drivable-area / lane segmentation toolkit.

CPU reference implementation of an efficient multi-task segmentation
family (four sizes plus a three-class drivable variant) with its own
tensor engine, static parameter/FLOP cost model, toy-scale trainer and
INT8 post-training static quantization simulator.
"""

from .kernels import BACKEND
from .tensor import ConvParams, Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["BACKEND", "ConvParams", "Tensor", "no_grad", "__version__"]
