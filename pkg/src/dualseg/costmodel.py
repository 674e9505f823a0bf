"""Analytic, execution-free parameter and FLOP accounting.

The per-layer table is enumerated directly from a ``ModelConfig`` (the
channel arithmetic is re-derived here on purpose, so the table is an
independent cross-check of the built model's parameter census).

FLOP convention: the default (1 FLOP per MAC, elementwise ops included)
is the one calibrated against the published per-block figures of this
architecture family (0.46 GFLOPs standard block / 0.14 GFLOPs depthwise
block at 64 channels on a 180x320 map); every report prints the
convention it used.  Elementwise costs: BN 2 ops/element, PReLU 2,
residual/fusion adds 1, bias adds 1, 2x2 average pooling 4 per output
element, softmax 4 per element.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig

BN_OPS = 2
PRELU_OPS = 2
ADD_OPS = 1
BIAS_OPS = 1
AVGPOOL_OPS = 4
SOFTMAX_OPS = 4

#: Published reference budgets for the four standard configurations
#: (parameters; FLOPs at 384x640; on-disk size at 16 bits per element).
REFERENCE_BUDGETS = {
    "nano":   dict(params=0.03e6, flops=0.57e9, size_mb=0.06),
    "small":  dict(params=0.12e6, flops=1.40e9, size_mb=0.23),
    "medium": dict(params=0.48e6, flops=4.63e9, size_mb=0.92),
    "large":  dict(params=1.94e6, flops=17.58e9, size_mb=3.72),
}


@dataclass(frozen=True)
class CostConvention:
    flops_per_mac: int = 1
    include_elementwise: bool = True

    def describe(self):
        ew = "+ elementwise" if self.include_elementwise else "(elementwise excluded)"
        return f"{self.flops_per_mac} FLOP/MAC {ew}"


@dataclass
class LayerCost:
    name: str
    params: int = 0
    macs: int = 0
    elementwise: int = 0

    def flops(self, conv: CostConvention = CostConvention()):
        f = conv.flops_per_mac * self.macs
        if conv.include_elementwise:
            f += self.elementwise
        return f


def _split(n, k=5):
    d = n // k
    return d, n - (k - 1) * d


class _Builder:
    def __init__(self):
        self.rows = []

    def row(self, name):
        r = LayerCost(name)
        self.rows.append(r)
        return r

    @staticmethod
    def conv(r, cin, cout, k, positions, groups=1, bias=False):
        w = cout * (cin // groups) * k * k
        r.params += w + (cout if bias else 0)
        r.macs += w * positions
        if bias:
            r.elementwise += cout * positions

    @staticmethod
    def tconv(r, cin, cout, k, in_positions, bias=False):
        w = cin * cout * k * k
        r.params += w + (cout if bias else 0)
        r.macs += w * in_positions
        if bias:
            r.elementwise += cout * in_positions * k * k

    @staticmethod
    def bn_act(r, ch, positions):
        r.params += 3 * ch          # gamma, beta, prelu slope
        r.elementwise += (BN_OPS + PRELU_OPS) * ch * positions


def _esp_rows(b, r, cin, cout, positions, variant):
    """Shared cost of the pyramid blocks; `positions` is the OUTPUT grid."""
    d, d1 = _split(cout)
    widths = (d1,) + (d,) * 4
    if variant == "stride_esp":
        b.conv(r, cin, d, 3, positions)
    else:
        b.conv(r, cin, d, 1, positions)
    for w in widths:
        if variant == "desp":
            b.conv(r, d, d, 3, positions, groups=d)
            b.conv(r, d, w, 1, positions, bias=True)
        else:
            b.conv(r, d, w, 3, positions)
    r.elementwise += 3 * d * positions * ADD_OPS      # hierarchical fusion sums
    b.bn_act(r, cout, positions)


def cost_table(config: ModelConfig, input_hw=(384, 640)):
    h, w = input_hw
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    p2, p4, p8 = (h // 2) * (w // 2), (h // 4) * (w // 4), (h // 8) * (w // 8)
    c0a, c0b = config.stem
    s1, p_rep, m1 = config.stage1
    s2, q_rep, pre, post = config.stage2
    u1, u2 = config.decoder
    b = _Builder()

    r = b.row("image_pyramid")
    r.elementwise += AVGPOOL_OPS * 3 * (p2 + p4)

    r = b.row("stem_a")
    b.conv(r, 3, c0a, 3, p2)
    b.bn_act(r, c0a, p2)
    r = b.row("stem_b")
    b.conv(r, c0a, c0b, 3, p2)
    b.bn_act(r, c0b, p2)

    r = b.row("stage1.sesp")
    _esp_rows(b, r, c0b + 3, s1, p4, "stride_esp")
    for i in range(p_rep):
        r = b.row(f"stage1.desp.{i}")
        _esp_rows(b, r, s1, s1, p4, "desp")
        r.elementwise += s1 * p4 * ADD_OPS            # residual
    r = b.row("stage1.merge")
    b.conv(r, 2 * s1 + 3, m1, 3, p4)
    b.bn_act(r, m1, p4)

    r = b.row("stage2.sesp")
    _esp_rows(b, r, m1, s2, p8, "stride_esp")
    for i in range(q_rep):
        r = b.row(f"stage2.desp.{i}")
        _esp_rows(b, r, s2, s2, p8, "desp")
        r.elementwise += s2 * p8 * ADD_OPS
    r = b.row("stage2.conv_pre")
    b.conv(r, 2 * s2, pre, 3, p8)
    b.bn_act(r, pre, p8)

    r = b.row("pcaa")
    k = config.pcaa_classes
    b.conv(r, pre, k, 1, p8)                          # local class scores
    r.elementwise += SOFTMAX_OPS * k * p8             # partial activation maps
    r.macs += k * pre * p8                            # class centers
    r.macs += k * pre * p8                            # pixel-to-class similarity
    r.elementwise += (1 + SOFTMAX_OPS) * k * p8       # scale + similarity softmax
    r.macs += k * pre * p8                            # center mixing
    b.conv(r, pre, pre, 1, p8)                        # refinement
    r.elementwise += pre * p8 * ADD_OPS               # residual

    r = b.row("conv_post")
    b.conv(r, pre, post, 1, p8)
    b.bn_act(r, post, p8)

    for head_name, classes in config.heads:
        r = b.row(f"head.{head_name}.ucb1")
        b.tconv(r, post, u1, 2, p8)
        b.bn_act(r, u1, p4)
        b.conv(r, u1 + 3, u1, 3, p4)
        b.bn_act(r, u1, p4)
        b.conv(r, u1, u1, 3, p4)
        b.bn_act(r, u1, p4)
        r = b.row(f"head.{head_name}.ucb2")
        b.tconv(r, u1, u2, 2, p4)
        b.bn_act(r, u2, p2)
        b.conv(r, u2 + 3, u2, 3, p2)
        b.bn_act(r, u2, p2)
        b.conv(r, u2, u2, 3, p2)
        b.bn_act(r, u2, p2)
        r = b.row(f"head.{head_name}.usb")
        b.tconv(r, u2, classes, 2, p2)
        b.bn_act(r, classes, h * w)
        b.conv(r, classes, classes, 3, h * w)
    return b.rows


def count_params(config: ModelConfig):
    return cost_table(config)


def count_flops(config: ModelConfig, input_hw=(384, 640),
                convention: CostConvention = CostConvention()):
    return cost_table(config, input_hw), convention


def total_params(config: ModelConfig) -> int:
    return sum(r.params for r in cost_table(config))


def total_flops(config: ModelConfig, input_hw=(384, 640),
                convention: CostConvention = CostConvention()) -> int:
    return sum(r.flops(convention) for r in cost_table(config, input_hw))


def esp_block_cost(channels=64, hw=(180, 320), variant="esp"):
    """Stand-alone cost of one non-strided pyramid block (no residual)."""
    b = _Builder()
    r = b.row(variant)
    _esp_rows(b, r, channels, channels, hw[0] * hw[1], variant)
    return r


# -- tensor census ----------------------------------------------------------

def _census(config: ModelConfig):
    """(n_param_elements, n_buffer_elements, n_tensors) from config alone."""
    rows = cost_table(config)
    params = sum(r.params for r in rows)
    c0a, c0b = config.stem
    s1, p_rep, m1 = config.stage1
    s2, q_rep, pre, post = config.stage2
    u1, u2 = config.decoder
    bn_channels = [c0a, c0b, s1, m1, s2, pre, post]
    bn_channels += [s1] * p_rep + [s2] * q_rep
    for _, classes in config.heads:
        bn_channels += [u1, u1, u1, u2, u2, u2, classes]
    buffers = 2 * sum(bn_channels)
    d1s = [_split(s1)[0], _split(s2)[0]]
    # tensors: per BN unit gamma/beta/mean/var + slope; convs counted below
    n_conv = 2 + (2 * p_rep * 5 + 6) + (2 * q_rep * 5 + 6) + 2 + 2 + 2 + 1
    n_conv += len(config.heads) * (3 + 3 + 2)
    n_bias = (p_rep + q_rep) * 5
    n_tensors = n_conv + n_bias + 5 * len(bn_channels)
    del d1s
    return params, buffers, n_tensors


def checkpoint_size(config: ModelConfig, bytes_per_element=4):
    """Estimated on-disk size: payload plus container overhead.

    Overhead is the checkpoint header (20 bytes) plus an estimated
    48 bytes of name/shape metadata per tensor.
    """
    params, buffers, n_tensors = _census(config)
    payload = (params + buffers) * bytes_per_element
    overhead = 20 + 48 * n_tensors
    return payload + overhead, payload, overhead


# -- reports ----------------------------------------------------------------

def format_report(config: ModelConfig, input_hw=(384, 640),
                  convention: CostConvention = CostConvention()):
    rows = cost_table(config, input_hw)
    lines = []
    name_w = max(len(r.name) for r in rows) + 2
    lines.append(f"config {config.name}  input {input_hw[0]}x{input_hw[1]}  "
                 f"convention: {convention.describe()}")
    lines.append(f"{'layer':<{name_w}}{'params':>12}{'MACs':>16}{'elemwise':>14}{'FLOPs':>16}")
    for r in rows:
        lines.append(f"{r.name:<{name_w}}{r.params:>12,}{r.macs:>16,}"
                     f"{r.elementwise:>14,}{r.flops(convention):>16,}")
    tp = sum(r.params for r in rows)
    tf = sum(r.flops(convention) for r in rows)
    lines.append(f"{'total':<{name_w}}{tp:>12,}{sum(r.macs for r in rows):>16,}"
                 f"{sum(r.elementwise for r in rows):>14,}{tf:>16,}")
    ref = REFERENCE_BUDGETS.get(config.name)
    if ref:
        lines.append(f"reference params {ref['params'] / 1e6:.2f}M   computed {tp / 1e6:.3f}M   "
                     f"deviation {100 * (tp - ref['params']) / ref['params']:+.1f}%")
        lines.append(f"reference FLOPs  {ref['flops'] / 1e9:.2f}G   computed {tf / 1e9:.3f}G   "
                     f"deviation {100 * (tf - ref['flops']) / ref['flops']:+.1f}%")
    return "\n".join(lines)


def csv_report(config: ModelConfig, input_hw=(384, 640),
               convention: CostConvention = CostConvention()):
    rows = cost_table(config, input_hw)
    out = ["layer,params,macs,elementwise,flops"]
    for r in rows:
        out.append(f"{r.name},{r.params},{r.macs},{r.elementwise},{r.flops(convention)}")
    return "\n".join(out) + "\n"
