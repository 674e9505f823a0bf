"""Desk-scale training loop: AdamW with decoupled weight decay, shadow
(EMA) weights updated after every optimizer step, geometric + photometric
augmentation, and per-epoch validation of the three headline metrics.

Metric log: one CSV row per epoch
``epoch,train_loss,miou_drivable,acc_lane,iou_lane`` (raw-weight
validation metrics; EMA metrics are kept in the in-memory log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import resize_bilinear, resize_nearest
from .losses import DRIVABLE_LOSS, LANE_LOSS, one_hot, total_loss
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 100
    ema_decay: float = 0.999
    ema_ramp_steps: int = 100
    hflip: bool = True
    translate: bool = True
    crop: bool = True
    hsv_jitter: bool = True
    translate_frac: float = 0.1
    crop_min_frac: float = 0.8
    hsv_gains: tuple = (0.015, 0.7, 0.4)
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "beta1", "beta2", "ema_decay"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name}={v} outside [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class AdamW:
    """Decoupled-weight-decay Adam over named parameters."""

    def __init__(self, named_params, config: TrainConfig):
        self.named_params = list(named_params)
        self.cfg = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            if p.grad is None:
                raise RuntimeError(f"adamw_step: parameter {name!r} has no gradient")
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + 1e-8) + cfg.weight_decay * p.data
            p.data -= (cfg.learning_rate * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()


class EmaState:
    """Shadow copy of every learnable parameter."""

    def __init__(self, named_params, decay=0.999):
        self.decay = decay
        self.updates = 0
        self.shadow = {name: p.data.copy() for name, p in named_params}

    def update(self, named_params, decay=None):
        d = self.decay if decay is None else decay
        for name, p in named_params:
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"ema_update: shape drift for {name!r}: "
                                 f"{s.shape} vs {p.data.shape}")
            s *= d
            s += (1.0 - d) * p.data
        self.updates += 1

    def copy_to(self, named_params):
        for name, p in named_params:
            p.data[...] = self.shadow[name].astype(p.data.dtype, copy=False)


def ema_update(ema: EmaState, named_params, decay=None):
    ema.update(named_params, decay)
    return ema


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def rgb_to_hsv(img):
    r, g, b = img[0], img[1], img[2]
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    d = mx - mn
    h = np.zeros_like(mx)
    nz = d > 0
    rmax = nz & (mx == r)
    gmax = nz & (mx == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / d[rmax]) % 6.0
    h[gmax] = (b - r)[gmax] / d[gmax] + 2.0
    h[bmax] = (r - g)[bmax] / d[bmax] + 4.0
    h /= 6.0
    s = np.where(mx > 0, d / np.maximum(mx, 1e-12), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv):
    h, s, v = hsv[0] * 6.0, hsv[1], hsv[2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    out = np.empty_like(hsv)
    for k, (rr, gg, bb) in enumerate([(v, t, p), (q, v, p), (p, v, t),
                                      (p, q, v), (t, p, v), (v, p, q)]):
        m = i == k
        out[0][m] = rr[m]
        out[1][m] = gg[m]
        out[2][m] = bb[m]
    return out


def _shift2d(arr, dy, dx, fill):
    out = np.full_like(arr, fill)
    h, w = arr.shape[-2:]
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[..., ys_dst, xs_dst] = arr[..., ys_src, xs_src]
    return out


def augment(image, masks, config: TrainConfig, rng):
    """Identical geometric transform for image and masks (nearest for
    masks), photometric jitter for the image only.  Translation fills with
    zeros / background."""
    img = image
    masks = list(masks)
    h, w = img.shape[-2:]
    if config.hflip and rng.random() < 0.5:
        img = img[..., ::-1].copy()
        masks = [m[..., ::-1].copy() for m in masks]
    if config.translate:
        ty = int(rng.integers(-int(config.translate_frac * h), int(config.translate_frac * h) + 1))
        tx = int(rng.integers(-int(config.translate_frac * w), int(config.translate_frac * w) + 1))
        if ty or tx:
            img = _shift2d(img, ty, tx, 0.0)
            masks = [_shift2d(m, ty, tx, 0) for m in masks]
    if config.crop:
        frac = rng.uniform(config.crop_min_frac, 1.0)
        ch, cw = max(int(round(frac * h)), 1), max(int(round(frac * w)), 1)
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w):
            img = resize_bilinear(img[..., y0:y0 + ch, x0:x0 + cw], (h, w))
            masks = [resize_nearest(m[..., y0:y0 + ch, x0:x0 + cw], (h, w)) for m in masks]
    if config.hsv_jitter:
        hg, sg, vg = config.hsv_gains
        hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[0] = (hsv[0] + rng.uniform(-hg, hg)) % 1.0
        hsv[1] = np.clip(hsv[1] * (1.0 + rng.uniform(-sg, sg)), 0.0, 1.0)
        hsv[2] = np.clip(hsv[2] * (1.0 + rng.uniform(-vg, vg)), 0.0, 1.0)
        img = hsv_to_rgb(hsv).astype(image.dtype)
    return img, masks


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, samples, qctx=None, batch_size=8):
    """Eval-mode metrics over a sample list: drivable mIoU, lane balanced
    accuracy, lane foreground IoU (plus PA/mPA for a 3-class drivable head).
    Never mutates weights or BN running stats."""
    n_drv = model.config.heads[0][1]
    cc_drv = metrics.ConfusionCounts(n_drv)
    cc_lane = metrics.ConfusionCounts(2)
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x = Tensor(np.stack([s.image for s in chunk]).astype(model.dtype))
            od, ol = model.forward(x, training=False, qctx=qctx)
            pd = od.data.argmax(axis=1)
            pl = ol.data.argmax(axis=1)
            cc_drv = cc_drv + metrics.confusion(pd, np.stack([s.drivable for s in chunk]), n_drv)
            cc_lane = cc_lane + metrics.confusion(pl, np.stack([s.lane for s in chunk]), 2)
    out = {
        "miou_drivable": metrics.miou(cc_drv),
        "acc_lane": metrics.balanced_accuracy(cc_lane),
        "iou_lane": metrics.iou(cc_lane, 1),
    }
    if n_drv > 2:
        out["pa_drivable"] = metrics.pixel_accuracy(cc_drv)
        out["mpa_drivable"] = metrics.mean_pixel_accuracy(cc_drv)
    return out


def loss_params_for(model) -> list:
    out = []
    for head_name, _ in model.config.heads:
        out.append(LANE_LOSS if head_name == "lane" else DRIVABLE_LOSS)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _make_targets(model, chunk):
    per_head = []
    for head_name, classes in model.config.heads:
        labels = np.stack([getattr(s, "drivable" if head_name != "lane" else "lane")
                           for s in chunk])
        per_head.append(one_hot(labels, classes, dtype=model.dtype))
    return per_head


def train(model, dataset, config: TrainConfig):
    """Runs the optimization loop; returns (model, ema_state, epoch_log).

    epoch_log: one dict per epoch with train_loss, raw validation metrics
    and their EMA-weight counterparts (``ema_`` prefix).
    """
    if not dataset.train:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    named = list(model.named_parameters())
    opt = AdamW(named, config)
    ema = EmaState(named, config.ema_decay)
    params_per_head = loss_params_for(model)
    log = []
    step = 0
    augmenting = config.hflip or config.translate or config.crop or config.hsv_jitter
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset.train))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = []
            for idx in order[lo:lo + config.batch_size]:
                s = dataset.train[idx]
                if augmenting:
                    img, (drv, lane) = augment(s.image, (s.drivable, s.lane), config, rng)
                    chunk.append(type(s)(img, drv, lane))
                else:
                    chunk.append(s)
            x = Tensor(np.stack([s.image for s in chunk]).astype(model.dtype))
            outputs = model.forward(x, training=True)
            loss = total_loss(outputs, _make_targets(model, chunk), params_per_head)
            lval = loss.item()
            if not np.isfinite(lval):
                raise RuntimeError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ramp = min(1.0, (ema.updates + 1) / max(config.ema_ramp_steps, 1))
            ema.update(named, decay=config.ema_decay * ramp)
            epoch_loss += lval
            n_batches += 1
            step += 1
        row = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        val = dataset.val if dataset.val else dataset.train
        row.update(evaluate(model, val))
        saved = {n: p.data.copy() for n, p in named}
        ema.copy_to(named)
        row.update({f"ema_{k}": v for k, v in evaluate(model, val).items()})
        for n, p in named:
            p.data[...] = saved[n]
        log.append(row)
    return model, ema, log


CSV_COLUMNS = ("epoch", "train_loss", "miou_drivable", "acc_lane", "iou_lane")


def write_metrics_csv(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in log:
            fh.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")


def _fmt(v):
    return str(v) if isinstance(v, int) else f"{v:.10g}"
