"""Model assembly for the four standard configurations and the
directly/alternative (three-class drivable) variant, plus checkpoint I/O.

Pipeline: two stride-2 stem convs; two downsampling stages of a strided
pyramid block followed by P (resp. Q) depthwise pyramid blocks with
residual adds; 2x/4x average-pooled copies of the input image injected as
long-range shortcuts; patch-local class attention at 1/8 resolution; and
one structurally identical decoder per task head (two image-merging
upsampling blocks, then the logit block).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import DESP, STRIDE_ESP, EspBlock, EspSpec, PcaaBlock, UcbBlock, UsbBlock
from .errors import CheckpointError, ShapeError
from .layers import ConvBNAct, Conv2d, ConvTranspose2d, Module

CHECKPOINT_MAGIC = b"TLNP"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FingerprintError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture recipe: per-stage output channels, repeat counts
    P/Q, decoder widths and the class count of each task head."""
    name: str
    stem: tuple            # (conv0a_out, conv0b_out)
    stage1: tuple          # (stride_esp_out, P, merge_out)
    stage2: tuple          # (stride_esp_out, Q, pre_pcaa_out, post_pcaa_out)
    decoder: tuple         # (ucb1_out, ucb2_out)
    heads: tuple = (("drivable", 2), ("lane", 2))
    pcaa_classes: int = 4
    pcaa_patch: tuple = (8, 8)

    def canonical(self) -> str:
        d = {
            "name": self.name,
            "stem": list(self.stem),
            "stage1": list(self.stage1),
            "stage2": list(self.stage2),
            "decoder": list(self.decoder),
            "heads": [[n, c] for n, c in self.heads],
            "pcaa_classes": self.pcaa_classes,
            "pcaa_patch": list(self.pcaa_patch),
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.canonical().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


_BASE = {
    "nano":   dict(stem=(4, 8),   stage1=(16, 1, 32),   stage2=(32, 1, 16, 8),    decoder=(4, 4)),
    "small":  dict(stem=(8, 16),  stage1=(32, 2, 64),   stage2=(64, 3, 32, 16),   decoder=(8, 8)),
    "medium": dict(stem=(16, 32), stage1=(64, 3, 128),  stage2=(128, 5, 64, 32),  decoder=(16, 8)),
    "large":  dict(stem=(32, 64), stage1=(128, 5, 256), stage2=(256, 7, 128, 64), decoder=(32, 8)),
}


def get_config(name: str, variant: str = "standard") -> ModelConfig:
    key = name.lower()
    if key not in _BASE:
        raise ValueError(f"unknown config {name!r}; choose from {sorted(_BASE)}")
    if variant == "standard":
        heads = (("drivable", 2), ("lane", 2))
    elif variant == "d_and_a":
        heads = (("drivable", 3), ("lane", 2))
    else:
        raise ValueError(f"unknown variant {variant!r}; choose standard or d_and_a")
    return ModelConfig(name=key, heads=heads, **_BASE[key])


def known_configs():
    for name in _BASE:
        for variant in ("standard", "d_and_a"):
            yield get_config(name, variant)


class Decoder(Module):
    def __init__(self, in_ch, cfg: ModelConfig, classes, rng, dtype):
        u1, u2 = cfg.decoder
        self.ucb1 = UcbBlock(in_ch, u1, rng, dtype)
        self.ucb2 = UcbBlock(u1, u2, rng, dtype)
        self.usb = UsbBlock(u2, classes, rng, dtype)

    def forward(self, x, i1, i2, training=False, qctx=None):
        y = self.ucb1.forward(x, i2, training, qctx)
        y = self.ucb2.forward(y, i1, training, qctx)
        return self.usb.forward(y, training, qctx)


class SegModel(Module):
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        c0a, c0b = config.stem
        s1, p_rep, m1 = config.stage1
        s2, q_rep, pre, post = config.stage2
        self.config = config
        self.dtype = np.dtype(dtype)
        self.stem_a = ConvBNAct(3, c0a, 3, rng, dtype, stride=2)
        self.stem_b = ConvBNAct(c0a, c0b, 3, rng, dtype)
        self.sesp1 = EspBlock(EspSpec(c0b + 3, s1, STRIDE_ESP), rng, dtype)
        self.desp1 = [EspBlock(EspSpec(s1, s1, DESP), rng, dtype) for _ in range(p_rep)]
        self.merge1 = ConvBNAct(2 * s1 + 3, m1, 3, rng, dtype)
        self.sesp2 = EspBlock(EspSpec(m1, s2, STRIDE_ESP), rng, dtype)
        self.desp2 = [EspBlock(EspSpec(s2, s2, DESP), rng, dtype) for _ in range(q_rep)]
        self.conv_pre = ConvBNAct(2 * s2, pre, 3, rng, dtype)
        self.pcaa = PcaaBlock(pre, rng, dtype, config.pcaa_classes, config.pcaa_patch)
        self.conv_post = ConvBNAct(pre, post, 1, rng, dtype)
        self.decoders = [Decoder(post, config, classes, rng, dtype)
                         for _, classes in config.heads]
        for name, mod in self.named_modules():
            if isinstance(mod, (Conv2d, ConvTranspose2d)):
                mod.qname = name

    def forward(self, x, training=False, qctx=None, trace=None):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"forward expects (N, 3, H, W) input, got {x.shape}")
        n, _, h, w = x.shape
        if h % 16 or w % 16:
            raise ShapeError(f"input spatial size {h}x{w} must be divisible by 16")
        ph, pw = self.config.pcaa_patch
        if (h // 8) % ph or (w // 8) % pw:
            raise ShapeError(
                f"attention patch {ph}x{pw} does not divide the 1/8-scale map "
                f"{h // 8}x{w // 8}; input must be divisible by {8 * ph}x{8 * pw}")
        i1 = T.avg_pool2(x)
        i2 = T.avg_pool2(i1)
        y = self.stem_b.forward(self.stem_a.forward(x, training, qctx), training, qctx)
        if trace is not None:
            trace.append(("stem", y.shape))
        f0 = self.sesp1.forward(T.concat_channels([y, i1]), training, qctx)
        f = f0
        for blk in self.desp1:
            f = T.add(blk.forward(f, training, qctx), f)
        y = self.merge1.forward(T.concat_channels([f0, f, i2]), training, qctx)
        if trace is not None:
            trace.append(("stage1", y.shape))
        f0 = self.sesp2.forward(y, training, qctx)
        f = f0
        for blk in self.desp2:
            f = T.add(blk.forward(f, training, qctx), f)
        y = self.conv_pre.forward(T.concat_channels([f0, f]), training, qctx)
        if trace is not None:
            trace.append(("stage2", y.shape))
        y = self.pcaa.forward(y, training, qctx)
        if trace is not None:
            trace.append(("pcaa", y.shape))
        y = self.conv_post.forward(y, training, qctx)
        outs = []
        for (head_name, _), dec in zip(self.config.heads, self.decoders):
            o = dec.forward(y, i1, i2, training, qctx)
            if trace is not None:
                trace.append((f"head.{head_name}", o.shape))
            outs.append(o)
        return tuple(outs)

    # -- census ------------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_items(self):
        """Checkpoint payload: every learnable parameter, then every BN
        running stat, as (name, ndarray) in deterministic order."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self.named_buffers():
            yield name, b


def build(config: ModelConfig, seed=0, dtype=np.float32) -> SegModel:
    return SegModel(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint file format (all integers little-endian):
#   magic "TLNP" | version u32 | config fingerprint u64 | tensor count u32
#   then per tensor: name_len u16, UTF-8 name, dtype tag u8 (0=f32, 1=f64),
#   rank u8, dims u32 each, raw little-endian element data.
# ---------------------------------------------------------------------------

def save(model: SegModel, path):
    items = list(model.state_items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", model.config.fingerprint()))
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode()
            tag = 0 if arr.dtype == np.float32 else 1
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def read_header(path):
    with open(path, "rb") as fh:
        magic = _read(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, = struct.unpack("<I", _read(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        fingerprint, = struct.unpack("<Q", _read(fh, 8, "fingerprint"))
        count, = struct.unpack("<I", _read(fh, 4, "tensor count"))
        return fingerprint, count


def load(path, config: ModelConfig | None = None, seed=0) -> SegModel:
    """Rebuild a model from a checkpoint.

    With ``config=None`` the file fingerprint is looked up among the known
    named configurations; otherwise the given config must match the file.
    """
    fingerprint, count = read_header(path)
    if config is None:
        match = [c for c in known_configs() if c.fingerprint() == fingerprint]
        if not match:
            raise FingerprintError(
                f"checkpoint fingerprint {fingerprint:#018x} matches no known config")
        config = match[0]
    elif config.fingerprint() != fingerprint:
        owner = [c for c in known_configs() if c.fingerprint() == fingerprint]
        src = owner[0].name if owner else f"fingerprint {fingerprint:#018x}"
        raise FingerprintError(
            f"checkpoint belongs to config {src}, not to requested config {config.name}")
    model = SegModel(config, seed=seed)
    targets = dict(model.state_items())
    seen = set()
    with open(path, "rb") as fh:
        _read(fh, 20, "header")
        for _ in range(count):
            nlen, = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, nlen, "name").decode()
            tag, rank = struct.unpack("<BB", _read(fh, 2, "dtype/rank"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, f"dims of {name!r}"))
            dt = _DTYPE_TAGS[tag]
            raw = _read(fh, int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"data of {name!r}")
            if name not in targets:
                raise UnknownTensorError(f"checkpoint tensor {name!r} not present in model")
            arr = np.frombuffer(raw, dtype=dt).reshape(dims)
            dst = targets[name]
            if dst.shape != arr.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, model expects {dst.shape}")
            dst[...] = arr.astype(dst.dtype, copy=False)
            seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    return model
