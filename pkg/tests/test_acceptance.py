"""Acceptance suite: one test (group) per numbered criterion, each printing
a PASS/FAIL line (run with ``pytest -s`` to see them inline).

Criterion 3's smallest-config FLOPs case is expected to fail: the published
0.57G figure is inconsistent with the published channel table that this
implementation reproduces (parameters within 7%, both per-block FLOP
anchors within 1%).  See the repository README for the analysis summary.
"""

import math

import numpy as np
import pytest

from dualseg import quant
from dualseg import tensor as T
from dualseg.blocks import (DESP, ESP, STRIDE_ESP, EspBlock, EspSpec, PcaaBlock,
                            UcbBlock, UsbBlock)
from dualseg.cli import main as cli_main
from dualseg.costmodel import (REFERENCE_BUDGETS, esp_block_cost, total_flops,
                               total_params)
from dualseg.data import synth_dataset, write_dataset
from dualseg.losses import LossParams, focal_loss, one_hot, total_loss, tversky_loss
from dualseg.metrics import (balanced_accuracy, confusion, iou, mean_pixel_accuracy,
                             miou, pixel_accuracy)
from dualseg.model import build, get_config
from dualseg.tensor import Tensor
from dualseg.trainer import EmaState, TrainConfig, ema_update, evaluate, train

from test_losses import dice_oracle, focal_oracle
from test_metrics import counting_oracle
from util import fd_gradients, rand_tensor


def _line(criterion, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"CRITERION {criterion}: {status}" + (f" - {detail}" if detail else ""), flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1-2: block-level oracles
# ---------------------------------------------------------------------------

def test_c01_block_param_oracle(rng):
    esp_static = esp_block_cost(64, (180, 320), "esp").params
    desp_static = esp_block_cost(64, (180, 320), "desp").params
    esp_rt = sum(p.size for p in EspBlock(EspSpec(64, 64, ESP), rng, np.float32).parameters())
    desp_rt = sum(p.size for p in EspBlock(EspSpec(64, 64, DESP), rng, np.float32).parameters())
    ok = (esp_static, desp_static, esp_rt, desp_rt) == (7872, 2332, 7872, 2332)
    assert _line(1, ok, f"ESP {esp_static}/{esp_rt} (want 7872), DESP {desp_static}/{desp_rt} (want 2332)")


def test_c02_block_flops_oracle():
    esp = esp_block_cost(64, (180, 320), "esp").flops()
    desp = esp_block_cost(64, (180, 320), "desp").flops()
    dev_e = (esp - 0.46e9) / 0.46e9
    dev_d = (desp - 0.14e9) / 0.14e9
    ok = abs(dev_e) <= 0.05 and abs(dev_d) <= 0.10
    assert _line(2, ok, f"ESP {esp / 1e9:.4f}G ({dev_e:+.1%}), DESP {desp / 1e9:.4f}G ({dev_d:+.1%})")


# ---------------------------------------------------------------------------
# 3: whole-model budgets (the nano/flops case is a known, documented red)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ("nano", "small", "medium", "large"))
@pytest.mark.parametrize("quantity", ("params", "flops"))
def test_c03_model_budgets(name, quantity):
    cfg = get_config(name)
    if quantity == "params":
        got, ref, tol = total_params(cfg), REFERENCE_BUDGETS[name]["params"], 0.10
    else:
        got, ref, tol = total_flops(cfg), REFERENCE_BUDGETS[name]["flops"], 0.15
    dev = (got - ref) / ref
    ok = abs(dev) <= tol
    _line(3, ok, f"{name} {quantity}: computed {got:,} vs reference {ref:,.0f} "
                 f"(deviation {dev:+.1%}, tolerance +-{tol:.0%})")
    assert ok, (f"{name} {quantity} deviates {dev:+.1%} from the published budget; "
                "for nano/flops this is a documented inconsistency in the published "
                "figures themselves (see README)")


# ---------------------------------------------------------------------------
# 4: forward shape contract at full resolution
# ---------------------------------------------------------------------------

def test_c04_shape_contract(rng):
    x = Tensor(rng.standard_normal((1, 3, 384, 640)).astype(np.float32))
    with T.no_grad():
        for name in ("nano", "small", "medium", "large"):
            od, ol = build(get_config(name), seed=0).forward(x, training=False)
            assert od.shape == (1, 2, 384, 640), name
            assert ol.shape == (1, 2, 384, 640), name
        od, ol = build(get_config("large", "d_and_a"), seed=0).forward(x, training=False)
        assert od.shape == (1, 3, 384, 640)
        assert ol.shape == (1, 2, 384, 640)
    assert _line(4, True, "all configs (2,384,640) per head; d&a drivable (3,384,640)")


# ---------------------------------------------------------------------------
# 5: gradient suite
# ---------------------------------------------------------------------------

def _fd_block(rng, block, x, n=20, forward=None):
    proj = rand_tensor(rng, x.shape if forward is None else forward(x).shape)
    params = block.parameters() if block is not None else []

    def loss():
        out = forward(x) if forward is not None else block.forward(x, training=True)
        return T.sum_all(T.mul(out, proj))

    tensors = params if params else [x]
    return fd_gradients(loss, tensors, n_samples=max(1, math.ceil(n / max(len(tensors), 1))),
                        rng=rng)


def test_c05_gradient_suite(rng):
    results = {}
    esp = EspBlock(EspSpec(10, 10, ESP), rng, np.float64)
    results["esp"] = _fd_block(rng, esp, rand_tensor(rng, (1, 10, 8, 8)))
    desp = EspBlock(EspSpec(10, 10, DESP), rng, np.float64)
    results["desp"] = _fd_block(rng, desp, rand_tensor(rng, (1, 10, 8, 8)))
    sesp = EspBlock(EspSpec(6, 10, STRIDE_ESP), rng, np.float64)
    results["stride_esp"] = _fd_block(
        rng, sesp, rand_tensor(rng, (1, 6, 8, 8)),
        forward=lambda x: sesp.forward(x, training=True))
    ucb = UcbBlock(6, 4, rng, np.float64)
    skip = rand_tensor(rng, (1, 3, 8, 8))
    results["ucb"] = _fd_block(
        rng, ucb, rand_tensor(rng, (1, 6, 4, 4)),
        forward=lambda x: ucb.forward(x, skip, training=True))
    usb = UsbBlock(6, 2, rng, np.float64)
    results["usb"] = _fd_block(
        rng, usb, rand_tensor(rng, (1, 6, 4, 4)),
        forward=lambda x: usb.forward(x, training=True))
    pcaa = PcaaBlock(6, rng, np.float64, num_local_classes=3, patch=(4, 4))
    results["pcaa"] = _fd_block(
        rng, pcaa, rand_tensor(rng, (1, 6, 4, 4)),
        forward=lambda x: pcaa.forward(x, training=True))

    logits = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    target = one_hot(rng.integers(0, 2, (1, 4, 4)), 2, dtype=np.float64)
    results["focal"] = fd_gradients(lambda: focal_loss(logits, target, LossParams()),
                                    [logits], n_samples=20, rng=rng)
    logits2 = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    results["tversky"] = fd_gradients(
        lambda: tversky_loss(T.softmax_channel(logits2), target, LossParams()),
        [logits2], n_samples=20, rng=rng)

    ok = all(v < 1e-4 for v in results.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in results.items())

    # chained downsampling + pyramid block + overlap loss, full-model check
    chain_img = Tensor(rng.standard_normal((1, 3, 16, 16)))
    chain_sesp = EspBlock(EspSpec(3, 10, STRIDE_ESP), rng, np.float64)
    chain_esp = EspBlock(EspSpec(10, 10, ESP), rng, np.float64)
    chain_target = one_hot(rng.integers(0, 10, (1, 8, 8)), 10, dtype=np.float64)

    def chain_loss():
        f0 = chain_sesp.forward(chain_img, training=True)
        f = T.add(chain_esp.forward(f0, training=True), f0)
        return tversky_loss(T.softmax_channel(f), chain_target, LossParams())

    chain_params = chain_sesp.parameters() + chain_esp.parameters()
    chain_err = fd_gradients(chain_loss, chain_params, n_samples=1, rng=rng)
    ok = ok and chain_err < 1e-3
    assert _line(5, ok, detail + f", chained full-model {chain_err:.2e}")


# ---------------------------------------------------------------------------
# 6-7: loss and metric oracles
# ---------------------------------------------------------------------------

def test_c06_loss_oracles(rng):
    logits = Tensor(rng.standard_normal((1, 2, 4, 4)))
    target = one_hot(rng.integers(0, 2, (1, 4, 4)), 2, dtype=np.float64)
    focal_err = abs(focal_loss(logits, target, LossParams()).item()
                    - focal_oracle(logits.data, target.data, 2.0, 0.25))
    probs = Tensor(rng.uniform(0, 1, (1, 3, 5, 5)))
    target3 = one_hot(rng.integers(0, 3, (1, 5, 5)), 3, dtype=np.float64)
    tv = tversky_loss(probs, target3, LossParams(tversky_alpha=0.5, tversky_beta=0.5)).item()
    dice_err = abs(tv - dice_oracle(probs.data, target3.data, smooth=2.0))
    pd, pl = LossParams(), LossParams(tversky_alpha=0.9, tversky_beta=0.1)
    l2 = Tensor(rng.standard_normal((1, 2, 4, 4)))
    total = total_loss([logits, l2], [target, target], [pd, pl]).item()
    parts = (focal_loss(logits, target, pd).item()
             + tversky_loss(T.softmax_channel(logits), target, pd).item()
             + focal_loss(l2, target, pl).item()
             + tversky_loss(T.softmax_channel(l2), target, pl).item())
    ok = focal_err < 1e-10 and dice_err < 1e-10 and total == parts
    assert _line(6, ok, f"focal err {focal_err:.1e}, dice err {dice_err:.1e}, "
                        f"total==sum-of-parts {total == parts}")


def test_c07_metric_oracles(rng):
    mismatches = 0
    for _ in range(1000):
        shape = (rng.integers(2, 10), rng.integers(2, 10))
        pred = rng.integers(0, 2, shape)
        target = rng.integers(0, 2, shape)
        cc = confusion(pred, target, 2)
        ious, m, pa, mpa = counting_oracle(pred, target, 2)
        if not ([iou(cc, c) for c in range(2)] == ious and miou(cc) == m
                and pixel_accuracy(cc) == pa and mean_pixel_accuracy(cc) == mpa
                and balanced_accuracy(cc) == mpa):
            mismatches += 1
    assert _line(7, mismatches == 0, f"{mismatches}/1000 mask pairs mismatched")


# ---------------------------------------------------------------------------
# 8 + 10 share the trained toy model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run():
    ds = synth_dataset(20, seed=7, size=(64, 64))
    cfg = TrainConfig(epochs=200, batch_size=10, learning_rate=2e-3,
                      hflip=False, translate=False, crop=False, hsv_jitter=False,
                      seed=0)
    model = build(get_config("nano"), seed=1)
    model, ema, log = train(model, ds, cfg)
    return model, ema, log, ds


def test_c08_toy_overfit(toy_run):
    model, _, log, ds = toy_run
    final = evaluate(model, ds.train)
    ok = final["miou_drivable"] > 0.95 and final["iou_lane"] > 0.5
    _line(8, ok, f"200 epochs: train miou_drivable {final['miou_drivable']:.4f} (>0.95), "
                 f"iou_lane {final['iou_lane']:.4f} (>0.5)")
    assert ok
    # smoothed loss is non-increasing for >= 90% of consecutive 10-epoch windows
    losses = [row["train_loss"] for row in log]
    windows = [np.mean(losses[i:i + 10]) for i in range(0, len(losses) - 9, 10)]
    drops = sum(1 for a, b in zip(windows, windows[1:]) if b <= a + 1e-12)
    assert drops >= 0.9 * (len(windows) - 1)


def test_c09_ema_closed_form(rng):
    p = rng.standard_normal(8)
    s0 = rng.standard_normal(8)
    named = [("w", Tensor(p.copy(), requires_grad=True))]
    ema = EmaState(named, decay=0.9)
    ema.shadow["w"][...] = s0
    worst = 0.0
    for k in range(1, 40):
        ema_update(ema, named)
        want = p + 0.9 ** k * (s0 - p)
        worst = max(worst, np.abs(ema.shadow["w"] - want).max())
    ema0 = EmaState(named, decay=0.0)
    ema0.shadow["w"][...] = s0
    ema_update(ema0, named)
    bitwise = np.array_equal(ema0.shadow["w"], named[0][1].data)
    ok = worst <= 1e-12 and bitwise
    assert _line(9, ok, f"closed-form max err {worst:.2e}, decay-0 bitwise {bitwise}")


def test_c10_ptsq(toy_run, rng):
    model, _, _, ds = toy_run
    # property: idempotence and half-scale bound
    t = rng.standard_normal(4000)
    scale, zp = quant.act_qparams(-2.5, 2.5)
    q1 = quant.fake_quantize(t, scale, zp)
    q2 = quant.fake_quantize(q1, scale, zp)
    idem = np.array_equal(q1, q2)
    inr = np.abs(t) <= 2.5
    half = np.abs(q1[inr] - t[inr]).max() <= scale / 2 + 1e-12
    # calibrated toy-model report
    batches = [np.stack([s.image for s in ds.train[i:i + 10]]) for i in (0, 10)]
    scheme = quant.prepare(model, quant.calibrate(model, batches))
    report = quant.quant_report(model, scheme, ds.train)
    drop = (report["fp32"]["miou_drivable"] - report["ptsq"]["miou_drivable"]) * 100
    fp32_direct = evaluate(model, ds.train)
    bitwise = all(report["fp32"][k] == fp32_direct[k] for k in fp32_direct)
    ok = idem and half and drop <= 5.0 and bitwise
    assert _line(10, ok, f"idempotent {idem}, half-scale {half}, "
                         f"miou drop {drop:.2f} pts (<=5), fp32 column bitwise {bitwise}")


def test_c11_cli_determinism(tmp_path):
    ds = synth_dataset(6, seed=13, size=(64, 64))
    manifest = write_dataset(ds, tmp_path / "data")
    outs = []
    for tag in ("a", "b"):
        spec = tmp_path / f"run_{tag}.toml"
        out_dir = tmp_path / f"out_{tag}"
        spec.write_text(f'''config = "nano"
manifest = "{manifest}"
out_dir = "{out_dir}"
seed = 4
image_size = [64, 64]

[train]
epochs = 2
batch_size = 3
''')
        assert cli_main(["train", "--spec", str(spec)]) == 0
        outs.append(out_dir)
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
               for n in ("checkpoint.tlnp", "checkpoint_ema.tlnp", "metrics.csv"))
    assert _line(11, same, "two seeded CLI runs: checkpoints and metric CSVs byte-identical")
