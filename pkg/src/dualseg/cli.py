"""Command-line surface: analyze | train | infer | eval | quantize.

Run specs for ``train`` are TOML files; unknown keys are rejected.  All
defaults equal the published training recipe (AdamW lr 5e-4, weight decay
5e-4, batch 16, 100 epochs, EMA 0.999, 640x384 input).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

try:
    import tomllib
except ImportError:                      # Python < 3.11
    import tomli as tomllib

from . import costmodel, data, model as model_mod, quant, trainer
from .errors import DualsegError
from .tensor import Tensor, no_grad

_RUN_KEYS = {"config", "variant", "manifest", "out_dir", "seed", "image_size", "train"}
_TRAIN_KEYS = {"epochs", "learning_rate", "weight_decay", "beta1", "beta2", "batch_size",
               "ema_decay", "ema_ramp_steps", "hflip", "translate", "crop", "hsv_jitter",
               "translate_frac", "crop_min_frac", "seed"}


def _parse_hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW (e.g. 384x640), got {text!r}")


class _Outputs:
    """Tracks files written by a subcommand so failures leave no partial
    outputs behind."""

    def __init__(self):
        self.paths = []

    def path(self, p):
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if os.path.isfile(p):
                os.unlink(p)


def cmd_analyze(args, out: _Outputs):
    cfg = model_mod.get_config(args.config)
    convention = costmodel.CostConvention(flops_per_mac=2 if args.convention == "2mac" else 1)
    print(costmodel.format_report(cfg, args.hw, convention))
    if args.csv:
        with open(out.path(args.csv), "w", encoding="utf-8") as fh:
            fh.write(costmodel.csv_report(cfg, args.hw, convention))
        print(f"wrote {args.csv}")
    return 0


def load_run_spec(path):
    with open(path, "rb") as fh:
        spec = tomllib.load(fh)
    unknown = set(spec) - _RUN_KEYS
    if unknown:
        raise DualsegError(f"unknown run-spec keys: {sorted(unknown)}")
    for key in ("config", "manifest", "out_dir"):
        if key not in spec:
            raise DualsegError(f"run spec missing required key {key!r}")
    tr = spec.get("train", {})
    unknown = set(tr) - _TRAIN_KEYS
    if unknown:
        raise DualsegError(f"unknown [train] keys: {sorted(unknown)}")
    return spec


def cmd_train(args, out: _Outputs):
    spec = load_run_spec(args.spec)
    variant = spec.get("variant", "standard")
    cfg = model_mod.get_config(spec["config"], variant)
    size = tuple(spec.get("image_size", data.DEFAULT_SIZE))
    manifest = spec["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.spec)), manifest)
    n_drv = cfg.heads[0][1]
    ds = data.load_dataset(manifest, size, drivable_classes=n_drv)
    tc = trainer.TrainConfig(**spec.get("train", {}))
    seed = int(spec.get("seed", 0))
    net = model_mod.build(cfg, seed=seed)
    out_dir = spec["out_dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(os.path.dirname(os.path.abspath(args.spec)), out_dir)
    os.makedirs(out_dir, exist_ok=True)
    ckpt = out.path(os.path.join(out_dir, "checkpoint.tlnp"))
    ckpt_ema = out.path(os.path.join(out_dir, "checkpoint_ema.tlnp"))
    csv = out.path(os.path.join(out_dir, "metrics.csv"))
    if tc.epochs > 0:
        net, ema, log = trainer.train(net, ds, tc)
    else:
        ema, log = trainer.EmaState(net.named_parameters(), tc.ema_decay), []
    trainer.write_metrics_csv(log, csv)
    model_mod.save(net, ckpt)
    named = list(net.named_parameters())
    saved = {n: p.data.copy() for n, p in named}
    ema.copy_to(named)
    model_mod.save(net, ckpt_ema)
    for n, p in named:
        p.data[...] = saved[n]
    for row in log:
        print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
              f"miou_drivable {row['miou_drivable']:.4f} acc_lane {row['acc_lane']:.4f} "
              f"iou_lane {row['iou_lane']:.4f} (ema {row['ema_miou_drivable']:.4f}/"
              f"{row['ema_acc_lane']:.4f}/{row['ema_iou_lane']:.4f})")
    print(f"wrote {ckpt}, {ckpt_ema}, {csv}")
    return 0


_OVERLAYS = {
    2: {1: (253, 104, 100)},                           # drivable: red
    3: {1: (253, 104, 100), 2: (56, 255, 248)},        # directly red, alternative blue
}
_LANE_COLOR = (52, 255, 52)                            # lanes: green


def cmd_infer(args, out: _Outputs):
    net = model_mod.load(args.ckpt)
    img = data.load_image(args.image, args.hw)
    with no_grad():
        od, ol = net.forward(Tensor(img[None].astype(net.dtype)), training=False)
    drv = od.data.argmax(axis=1)[0]
    lane = ol.data.argmax(axis=1)[0]
    stem = os.path.splitext(os.path.basename(args.image))[0]
    os.makedirs(args.out_dir, exist_ok=True)
    data.save_mask(out.path(os.path.join(args.out_dir, f"{stem}_drivable.pgm")), drv)
    data.save_mask(out.path(os.path.join(args.out_dir, f"{stem}_lane.pgm")), lane)
    if args.overlay:
        rgb = (img.transpose(1, 2, 0) * 255.0).round().astype(np.float32)
        colors = _OVERLAYS[net.config.heads[0][1]]
        for cls, color in colors.items():
            rgb[drv == cls] = 0.55 * rgb[drv == cls] + 0.45 * np.array(color, dtype=np.float32)
        rgb[lane == 1] = 0.55 * rgb[lane == 1] + 0.45 * np.array(_LANE_COLOR, dtype=np.float32)
        p = out.path(os.path.join(args.out_dir, f"{stem}_overlay.ppm"))
        data.write_pnm(p, rgb.round().astype(np.uint8))
    print(f"wrote masks for {stem} to {args.out_dir}")
    return 0


def _eval_samples(net, args):
    ds = data.load_dataset(args.manifest, args.hw, drivable_classes=net.config.heads[0][1])
    samples = ds.val if (args.split == "val" and ds.val) else ds.train
    if not samples:
        raise DualsegError(f"manifest has no {args.split} samples")
    return samples


def cmd_eval(args, out: _Outputs):
    net = model_mod.load(args.ckpt)
    res = trainer.evaluate(net, _eval_samples(net, args))
    for k, v in res.items():
        print(f"{k} {v:.4f}")
    return 0


def cmd_quantize(args, out: _Outputs):
    net = model_mod.load(args.ckpt)
    ds = data.load_dataset(args.manifest, args.hw, drivable_classes=net.config.heads[0][1])
    calib_samples = ds.train if ds.train else ds.val
    batches = []
    for i in range(0, min(len(calib_samples), args.batches * args.batch_size), args.batch_size):
        chunk = calib_samples[i:i + args.batch_size]
        batches.append(np.stack([s.image for s in chunk]).astype(net.dtype))
    ranges = quant.calibrate(net, batches, method=args.method, percentile=args.percentile)
    scheme = quant.prepare(net, ranges, calibration=args.method)
    sidecar = args.out or args.ckpt + ".quant"
    quant.save_scheme(out.path(sidecar), scheme)
    eval_samples = ds.val if ds.val else ds.train
    report = quant.quant_report(net, scheme, eval_samples)
    print(f"calibration: {args.method} over {len(batches)} batch(es); sidecar {sidecar}")
    print(quant.format_quant_report(report))
    return 0


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="dualseg", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("analyze", help="static parameter/FLOP report for a config",
                       formatter_class=fmt)
    p.add_argument("--config", required=True, choices=["nano", "small", "medium", "large"])
    p.add_argument("--hw", type=_parse_hw, default=(384, 640), help="input HxW (default 384x640)")
    p.add_argument("--convention", choices=["mac", "2mac"], default="mac",
                   help="FLOPs per MAC (default: 1 FLOP per MAC)")
    p.add_argument("--csv", help="also write the per-layer table as CSV")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("train", help="run the training loop from a TOML run spec",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True, help="run spec (config/manifest/out_dir/[train])")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment one image with a trained checkpoint",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input image (PPM)")
    p.add_argument("--out-dir", default=".", help="where to write the label masks")
    p.add_argument("--hw", type=_parse_hw, default=(384, 640), help="inference HxW")
    p.add_argument("--overlay", action="store_true", help="also write a colour overlay")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="dataset manifest (TSV)")
    p.add_argument("--split", choices=["train", "val"], default="val", help="manifest split")
    p.add_argument("--hw", type=_parse_hw, default=(384, 640), help="evaluation HxW")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("quantize", help="calibrate INT8 PTSQ and report FP32-vs-PTSQ deltas",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="calibration/eval manifest (TSV)")
    p.add_argument("--batches", type=int, default=4, help="calibration batch count")
    p.add_argument("--batch-size", type=int, default=8, help="calibration batch size")
    p.add_argument("--method", choices=["minmax", "percentile"], default="minmax",
                   help="range reduction")
    p.add_argument("--percentile", type=float, default=99.9, help="percentile, if selected")
    p.add_argument("--hw", type=_parse_hw, default=(384, 640), help="HxW for both phases")
    p.add_argument("--out", help="sidecar path; <ckpt>.quant if omitted")
    p.set_defaults(fn=cmd_quantize)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = _Outputs()
    try:
        return args.fn(args, out)
    except (DualsegError, OSError, ValueError, RuntimeError) as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
