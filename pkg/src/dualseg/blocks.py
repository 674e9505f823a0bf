"""Composite building blocks: the dilated-pyramid encoder blocks with their
depthwise and strided variants, hierarchical feature fusion, the two decoder
upsampling blocks, and patch-local class-attention.

Width bookkeeping for the pyramid blocks: the N output channels split into
K branches of width d = N // K, with the first (dilation-1) branch widened
to d1 = N - (K-1)*d so the concatenation restores exactly N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, ConvBNAct, Module, PReLU

ESP = "esp"
DESP = "desp"
STRIDE_ESP = "stride_esp"


@dataclass(frozen=True)
class EspSpec:
    in_channels: int
    out_channels: int
    variant: str = ESP
    branch_count: int = 5
    dilation_rates: tuple = (1, 2, 4, 8, 16)

    def __post_init__(self):
        if self.variant not in (ESP, DESP, STRIDE_ESP):
            raise ValueError(f"unknown block variant {self.variant!r}")
        if len(self.dilation_rates) != self.branch_count:
            raise ShapeError("dilation_rates length must equal branch_count")
        if self.d < 1:
            raise ShapeError(
                f"out_channels={self.out_channels} too small for {self.branch_count} branches")
        if self.variant in (ESP, DESP) and self.in_channels != self.out_channels:
            raise ShapeError(
                f"{self.variant} requires in_channels == out_channels for the residual add, "
                f"got {self.in_channels} != {self.out_channels}")

    @property
    def d(self):
        return self.out_channels // self.branch_count

    @property
    def d1(self):
        return self.out_channels - (self.branch_count - 1) * self.d

    @property
    def branch_widths(self):
        return (self.d1,) + (self.d,) * (self.branch_count - 1)


def hff(branches):
    """Hierarchical feature fusion: cumulative sums over the equal-width
    branches (ascending dilation); the first, wider branch bypasses."""
    if len(branches) < 2:
        raise ShapeError("hff needs at least two branches")
    w = branches[1].shape[1]
    for i, b in enumerate(branches[2:], 2):
        if b.shape[1] != w:
            raise ShapeError(f"hff: branch {i} width {b.shape[1]} != {w}")
    out = [branches[0], branches[1]]
    acc = branches[1]
    for b in branches[2:]:
        acc = T.add(acc, b)
        out.append(acc)
    return out


class EspBlock(Module):
    """Reduce -> K parallel dilated branches -> HFF -> concat -> BN+PReLU.

    variant ``esp``:        1x1 reduce, standard dilated 3x3 branches
    variant ``desp``:       1x1 reduce, depthwise dilated 3x3 + biased 1x1
    variant ``stride_esp``: 3x3 stride-2 reduce (downsamples, M may != N)

    The residual add of the non-strided variants is applied by the caller.
    """

    def __init__(self, spec: EspSpec, rng, dtype):
        self.spec = spec
        d = spec.d
        if spec.variant == STRIDE_ESP:
            self.reduce = Conv2d(spec.in_channels, d, 3, rng, dtype, stride=2)
        else:
            self.reduce = Conv2d(spec.in_channels, d, 1, rng, dtype)
        if spec.variant == DESP:
            self.branches = [
                Conv2d(d, d, 3, rng, dtype, dilation=r, groups=d)
                for r in spec.dilation_rates
            ]
            self.pointwise = [
                Conv2d(d, w, 1, rng, dtype, bias=True)
                for w in spec.branch_widths
            ]
        else:
            self.branches = [
                Conv2d(d, w, 3, rng, dtype, dilation=r)
                for w, r in zip(spec.branch_widths, spec.dilation_rates)
            ]
            self.pointwise = []
        self.bn = BatchNorm2d(spec.out_channels, dtype)
        self.act = PReLU(spec.out_channels, dtype)

    def forward(self, x, training=False, qctx=None):
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.spec.variant}: input has {x.shape[1]} channels, expected {self.spec.in_channels}")
        if self.spec.variant == STRIDE_ESP and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ShapeError(f"stride_esp requires even spatial size, got {x.shape[2]}x{x.shape[3]}")
        r = self.reduce.forward(x, qctx)
        outs = []
        for i, conv in enumerate(self.branches):
            b = conv.forward(r, qctx)
            if self.pointwise:
                b = self.pointwise[i].forward(b, qctx)
            outs.append(b)
        fused = hff(outs)
        y = T.concat_channels(fused)
        return self.act.forward(self.bn.forward(y, training))


class UcbBlock(Module):
    """Upsampling block that merges a downsampled copy of the input image:
    transpose conv -> concat(skip image) -> two 3x3 convs, BN+PReLU each."""

    def __init__(self, in_ch, out_ch, rng, dtype, skip_ch=3):
        self.up = ConvBNAct(in_ch, out_ch, 2, rng, dtype, stride=2, transpose=True)
        self.conv1 = ConvBNAct(out_ch + skip_ch, out_ch, 3, rng, dtype)
        self.conv2 = ConvBNAct(out_ch, out_ch, 3, rng, dtype)
        self.skip_ch = skip_ch

    def forward(self, x, skip_image, training=False, qctx=None):
        if skip_image.shape[1] != self.skip_ch:
            raise ShapeError(f"ucb: skip image has {skip_image.shape[1]} channels, expected {self.skip_ch}")
        y = self.up.forward(x, training, qctx)
        if skip_image.shape[2:] != y.shape[2:]:
            raise ShapeError(
                f"ucb: skip image spatial size {skip_image.shape[2:]} != upsampled {y.shape[2:]}")
        y = T.concat_channels([y, skip_image])
        y = self.conv1.forward(y, training, qctx)
        return self.conv2.forward(y, training, qctx)


class UsbBlock(Module):
    """Final upsampling block: transpose conv (BN+PReLU) then one bare 3x3
    conv whose output is the raw logit map."""

    def __init__(self, in_ch, classes, rng, dtype):
        self.up = ConvBNAct(in_ch, classes, 2, rng, dtype, stride=2, transpose=True)
        self.head = Conv2d(classes, classes, 3, rng, dtype)

    def forward(self, x, training=False, qctx=None):
        return self.head.forward(self.up.forward(x, training, qctx), qctx)


class PcaaBlock(Module):
    """Patch-local class-attention, channel preserving.

    Per non-overlapping patch: a 1x1 conv scores K local classes, a spatial
    softmax turns each score map into partial activation weights, their
    weighted feature averages give K local class centers, and each pixel is
    refined by a softmax-weighted (scaled dot product) mix of those centers
    through a final 1x1 conv, added residually.  Zeroing the final conv
    therefore recovers the identity exactly.
    """

    def __init__(self, channels, rng, dtype, num_local_classes=4, patch=(8, 8)):
        self.channels = channels
        self.num_local_classes = num_local_classes
        self.patch = patch
        self.cls = Conv2d(channels, num_local_classes, 1, rng, dtype)
        self.refine = Conv2d(channels, channels, 1, rng, dtype)

    def _to_patches(self, t, ch):
        n, _, h, w = t.shape
        sh, sw = self.patch
        hp, wp = h // sh, w // sw
        v = T.reshape(t, (n, ch, hp, sh, wp, sw))
        v = T.permute(v, (0, 2, 4, 1, 3, 5))            # (n, hp, wp, ch, sh, sw)
        return T.reshape(v, (n, hp * wp, ch, sh * sw))

    def forward(self, x, training=False, qctx=None):
        n, c, h, w = x.shape
        sh, sw = self.patch
        if h % sh or w % sw:
            raise ShapeError(f"pcaa: patch {self.patch} does not divide feature map {h}x{w}")
        k = self.num_local_classes
        scores = self.cls.forward(x, qctx)                   # (n, k, h, w)
        cam = T.softmax_last(self._to_patches(scores, k))    # (n, p, k, s)
        feats = self._to_patches(x, c)                       # (n, p, c, s)
        feats_t = T.permute(feats, (0, 1, 3, 2))             # (n, p, s, c)
        centers = T.matmul(cam, feats_t)                     # (n, p, k, c)
        sim = T.matmul(feats_t, T.permute(centers, (0, 1, 3, 2)))
        sim = T.softmax_last(T.scale(sim, 1.0 / math.sqrt(c)))   # (n, p, s, k)
        refined = T.matmul(sim, centers)                     # (n, p, s, c)
        hp, wp = h // sh, w // sw
        refined = T.reshape(refined, (n, hp, wp, sh, sw, c))
        refined = T.permute(refined, (0, 5, 1, 3, 2, 4))     # (n, c, hp, sh, wp, sw)
        refined = T.reshape(refined, (n, c, h, w))
        return T.add(x, self.refine.forward(refined, qctx))
