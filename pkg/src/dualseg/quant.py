"""INT8 post-training static quantization, simulated in float.

Weights: per-output-channel symmetric int8 (scale only).  Activations:
per-tensor affine int8 with (scale, zero_point) derived from calibrated
min/max or percentile ranges at every conv / transpose-conv input and
output.  For Conv+BN+PReLU composites the BN is folded into the conv
before weight quantization, so their "out" point sits after the folded
affine; block-internal convs (whose BN follows a concat) quantize unfused
and keep BN in float.

Sidecar file: one record per activation point (name, scale f32,
zero_point i32), little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError
from .layers import Conv2d, ConvBNAct, ConvTranspose2d
from .tensor import Tensor, no_grad

QMIN, QMAX = -128, 127
INT8_LEVELS = 127
SIDECAR_MAGIC = b"TLNQ"


def fake_quantize(t, scale, zero_point=0, levels=INT8_LEVELS):
    """clamp(round(t/scale) + zp) mapped back to float; idempotent and
    within scale/2 of the identity on in-range values.

    ``levels`` sets the grid: int8 keeps the default (clamp [-128, 127]);
    larger values emulate finer grids for convergence checks.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    q = np.clip(np.round(t / scale) + zero_point, -levels - 1, levels)
    return ((q - zero_point) * scale).astype(t.dtype if hasattr(t, "dtype") else np.float64)


def act_qparams(lo, hi, levels=INT8_LEVELS):
    """Affine (scale, zero_point) covering [lo, hi] with 2*levels steps; a
    symmetric range [-a, a] yields scale a/levels (a/127 in int8) and
    zero_point 0."""
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    span = hi - lo
    if span <= 0:
        return max(abs(hi), 1e-8) / levels, 0
    scale = span / (2 * levels)
    zp = int(np.clip(round(-levels - lo / scale), -levels - 1, levels))
    return scale, zp


def weight_channel_scales(w, channel_axis=0, levels=INT8_LEVELS):
    """Symmetric per-channel scales max|w_c|/levels (1.0 for all-zero channels)."""
    axes = tuple(i for i in range(w.ndim) if i != channel_axis)
    mx = np.abs(w).max(axis=axes)
    return np.where(mx > 0, mx / levels, 1.0)


def quantize_weight_per_channel(w, channel_axis=0, levels=INT8_LEVELS):
    scales = weight_channel_scales(w, channel_axis, levels)
    shape = [1] * w.ndim
    shape[channel_axis] = -1
    s = scales.reshape(shape)
    q = np.clip(np.round(w / s), -levels - 1, levels)
    return (q * s).astype(w.dtype), scales


def fold_conv_bn(w, b, bn, channel_axis=0):
    """Fold eval-mode BN into conv weights/bias along the output axis."""
    g = bn.gamma.data.astype(np.float64)
    mu = bn.running_mean.astype(np.float64)
    var = bn.running_var.astype(np.float64)
    k = g / np.sqrt(var + bn.eps)
    shape = [1] * w.ndim
    shape[channel_axis] = -1
    wf = (w.astype(np.float64) * k.reshape(shape)).astype(w.dtype)
    b0 = np.zeros_like(mu) if b is None else b.astype(np.float64)
    bf = (bn.beta.data.astype(np.float64) + (b0 - mu) * k).astype(w.dtype)
    return wf, bf


@dataclass(frozen=True)
class QuantScheme:
    """Calibrated activation points plus prepared (folded, fake-quantized)
    weights keyed by conv name."""
    act: dict          # name -> (scale, zero_point)
    weights: dict      # conv qname -> (w_q, bias or None)
    calibration: str
    levels: int = INT8_LEVELS


class _Observer:
    observing = True

    def __init__(self, percentile=None):
        self.percentile = percentile
        self.minmax = {}
        self.pct = {}

    def observe(self, name, arr):
        lo, hi = float(arr.min()), float(arr.max())
        if name in self.minmax:
            plo, phi = self.minmax[name]
            self.minmax[name] = (min(plo, lo), max(phi, hi))
        else:
            self.minmax[name] = (lo, hi)
        if self.percentile is not None:
            p = self.percentile
            qlo, qhi = np.percentile(arr, [100.0 - p, p])
            if name in self.pct:
                plo, phi = self.pct[name]
                self.pct[name] = (min(plo, float(qlo)), max(phi, float(qhi)))
            else:
                self.pct[name] = (float(qlo), float(qhi))

    def ranges(self):
        return dict(self.pct if self.percentile is not None else self.minmax)


class _Applied:
    observing = False

    def __init__(self, scheme: QuantScheme):
        self.scheme = scheme

    def fq_act(self, name, t):
        if name not in self.scheme.act:
            raise CalibrationError(f"no calibrated activation range for point {name!r}")
        scale, zp = self.scheme.act[name]
        return Tensor(fake_quantize(t.data, scale, zp, self.scheme.levels))

    def conv_weights(self, name):
        if name not in self.scheme.weights:
            raise CalibrationError(f"no quantized weights prepared for layer {name!r}")
        return self.scheme.weights[name]


def calibrate(model, batches, method="minmax", percentile=99.9):
    """Run calibration batches through the model in eval mode, collecting
    per-point activation ranges; returns {point: (lo, hi)}."""
    if method not in ("minmax", "percentile"):
        raise ValueError(f"unknown calibration method {method!r}")
    obs = _Observer(percentile if method == "percentile" else None)
    count = 0
    with no_grad():
        for batch in batches:
            x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
            model.forward(x, training=False, qctx=obs)
            count += 1
    if count == 0:
        raise CalibrationError("empty calibration set")
    return obs.ranges()


def prepare(model, ranges, calibration="minmax", levels=INT8_LEVELS) -> QuantScheme:
    """Turn calibrated ranges into a full scheme: activation qparams for
    every point, BN-folded + per-channel fake-quantized weights per conv.

    ``levels`` > 127 emulates finer-than-int8 grids over the same ranges.
    """
    act = {name: act_qparams(lo, hi, levels) for name, (lo, hi) in ranges.items()}
    weights = {}
    folded = set()
    for _, mod in model.named_modules():
        if isinstance(mod, ConvBNAct):
            conv = mod.conv
            axis = 1 if isinstance(conv, ConvTranspose2d) else 0
            bias = None if conv.bias is None else conv.bias.data
            wf, bf = fold_conv_bn(conv.weight.data, bias, mod.bn, axis)
            wq, _ = quantize_weight_per_channel(wf, axis, levels)
            weights[conv.qname] = (wq, bf)
            folded.add(conv.qname)
    for _, mod in model.named_modules():
        if isinstance(mod, (Conv2d, ConvTranspose2d)) and mod.qname not in folded:
            axis = 1 if isinstance(mod, ConvTranspose2d) else 0
            wq, _ = quantize_weight_per_channel(mod.weight.data, axis, levels)
            weights[mod.qname] = (wq, None if mod.bias is None else mod.bias.data.copy())
    expected = {m.qname for _, m in model.named_modules()
                if isinstance(m, (Conv2d, ConvTranspose2d))}
    missing = sorted(p for q in expected for p in (q + ".in", q + ".out") if p not in act)
    if missing:
        raise CalibrationError(f"uncalibrated quantization points: {missing[:4]}")
    return QuantScheme(act=act, weights=weights, calibration=calibration, levels=levels)


def quantized_forward(model, scheme: QuantScheme, x):
    with no_grad():
        return model.forward(x, training=False, qctx=_Applied(scheme))


def quantized_ctx(scheme: QuantScheme):
    return _Applied(scheme)


# ---------------------------------------------------------------------------
# sidecar serialization (activation points only; weight scales are
# re-derived deterministically from the checkpoint weights)
# ---------------------------------------------------------------------------

def save_scheme(path, ranges_or_scheme):
    if isinstance(ranges_or_scheme, QuantScheme):
        items = ranges_or_scheme.act
    else:
        items = {name: act_qparams(lo, hi) for name, (lo, hi) in ranges_or_scheme.items()}
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, (scale, zp) in items.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<fi", scale, zp))


def load_scheme_act(path):
    with open(path, "rb") as fh:
        if fh.read(4) != SIDECAR_MAGIC:
            raise CalibrationError(f"{path}: not a quantization sidecar")
        count, = struct.unpack("<I", fh.read(4))
        act = {}
        for _ in range(count):
            nlen, = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            scale, zp = struct.unpack("<fi", fh.read(8))
            act[name] = (float(scale), int(zp))
        return act


def scheme_from_sidecar(model, path, calibration="minmax") -> QuantScheme:
    act = load_scheme_act(path)
    ranges = {}
    for name, (scale, zp) in act.items():
        lo = (QMIN + 1 - zp) * scale
        hi = (QMAX - zp) * scale
        ranges[name] = (lo, hi)
    scheme = prepare(model, ranges, calibration)
    # keep the exact stored qparams rather than re-derived ones
    return QuantScheme(act=act, weights=scheme.weights, calibration=calibration)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def quant_report(model, scheme: QuantScheme, samples):
    """FP32 vs PTSQ metrics and deltas per head; the FP32 column is the
    plain (unquantized) evaluation."""
    from .trainer import evaluate
    fp32 = evaluate(model, samples)
    ptsq = evaluate(model, samples, qctx=_Applied(scheme))
    return {"fp32": fp32, "ptsq": ptsq,
            "delta": {k: ptsq[k] - fp32[k] for k in fp32}}


def format_quant_report(report):
    keys = list(report["fp32"])
    name_w = max(len(k) for k in keys) + 2
    lines = [f"{'metric':<{name_w}}{'FP32':>10}{'INT8-PTSQ':>12}{'delta':>10}"]
    for k in keys:
        lines.append(f"{k:<{name_w}}{report['fp32'][k]:>10.4f}"
                     f"{report['ptsq'][k]:>12.4f}{report['delta'][k]:>+10.4f}")
    return "\n".join(lines)
