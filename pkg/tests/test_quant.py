"""PTSQ contracts: qparam derivation, fake-quant properties, folding,
calibration bookkeeping and end-to-end quantized inference."""

import numpy as np
import pytest

from dualseg import quant
from dualseg.data import synth_dataset
from dualseg.errors import CalibrationError
from dualseg.model import build, get_config
from dualseg.tensor import Tensor


class TestActQparams:
    def test_symmetric_range_gives_a_over_127(self):
        scale, zp = quant.act_qparams(-3.0, 3.0)
        assert abs(scale - 3.0 / 127) < 1e-15
        assert zp == 0

    def test_asymmetric_range_covers_extremes(self):
        lo, hi = -0.5, 2.0
        scale, zp = quant.act_qparams(lo, hi)
        grid_lo = (-128 - zp) * scale
        grid_hi = (127 - zp) * scale
        assert grid_lo <= lo + 1e-12 and grid_hi >= hi - scale

    def test_degenerate_range(self):
        scale, zp = quant.act_qparams(0.0, 0.0)
        assert scale > 0 and zp == 0


class TestFakeQuantize:
    def test_idempotent(self, rng):
        t = rng.standard_normal(1000)
        a = quant.fake_quantize(t, 0.05, 3)
        b = quant.fake_quantize(a, 0.05, 3)
        np.testing.assert_array_equal(a, b)

    def test_grid_values_unchanged(self):
        scale = 0.25
        t = np.arange(-10, 10) * scale
        np.testing.assert_allclose(quant.fake_quantize(t, scale, 0), t, atol=1e-12)

    def test_half_scale_error_bound_in_range(self, rng):
        scale, zp = quant.act_qparams(-2.0, 2.0)
        t = rng.uniform(-2.0, 2.0, 5000)
        err = np.abs(quant.fake_quantize(t, scale, zp) - t)
        assert err.max() <= scale / 2 + 1e-12

    def test_zero_maps_to_zero(self):
        assert quant.fake_quantize(np.array([0.0]), 0.1, 0)[0] == 0.0

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError, match="scale"):
            quant.fake_quantize(np.zeros(3), 0.0)


class TestWeightQuant:
    def test_per_channel_error_le_per_tensor(self, rng):
        for _ in range(10):
            w = rng.standard_normal((8, 4, 3, 3)) * rng.uniform(0.1, 3.0, (8, 1, 1, 1))
            per_ch, _ = quant.quantize_weight_per_channel(w, 0)
            scale = np.abs(w).max() / 127
            per_tensor = quant.fake_quantize(w, scale, 0)
            e_ch = np.linalg.norm(per_ch - w)
            e_t = np.linalg.norm(per_tensor - w)
            assert e_ch <= e_t + 1e-12

    def test_zero_channel_survives(self):
        w = np.zeros((2, 1, 3, 3))
        w[1] = 1.0
        q, scales = quant.quantize_weight_per_channel(w, 0)
        np.testing.assert_array_equal(q[0], 0.0)
        assert scales[0] == 1.0


class TestFolding:
    def test_fold_matches_conv_then_bn(self, rng):
        from dualseg.layers import BatchNorm2d, Conv2d
        from dualseg import tensor as T
        conv = Conv2d(3, 4, 3, rng, np.float64)
        bn = BatchNorm2d(4, np.float64)
        bn.running_mean[...] = rng.standard_normal(4)
        bn.running_var[...] = rng.uniform(0.5, 2.0, 4)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 4)
        bn.beta.data[...] = rng.standard_normal(4)
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        want = bn.forward(conv.forward(x), training=False).data
        wf, bf = quant.fold_conv_bn(conv.weight.data, None, bn)
        got = T.conv2d(x, Tensor(wf), Tensor(bf), conv.p).data
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


class TestCalibration:
    def _model(self):
        # warm the BN running stats so eval-mode activations are sane
        m = build(get_config("nano"), seed=2)
        for batch in self._batches(2):
            m.forward(Tensor(batch), training=True)
        return m

    def _batches(self, n=2, bs=2):
        ds = synth_dataset(n * bs, seed=5, size=(64, 64))
        return [np.stack([s.image for s in ds.train[i * bs:(i + 1) * bs]])
                for i in range(n)]

    def test_empty_calibration_rejected(self):
        with pytest.raises(CalibrationError, match="empty"):
            quant.calibrate(self._model(), [])

    def test_minmax_merge_is_elementwise(self):
        m = self._model()
        b1, b2 = self._batches(2)
        r12 = quant.calibrate(m, [b1, b2])
        r1 = quant.calibrate(m, [b1])
        r2 = quant.calibrate(m, [b2])
        for k in r12:
            lo = min(r1[k][0], r2[k][0])
            hi = max(r1[k][1], r2[k][1])
            assert r12[k] == (lo, hi)

    def test_percentile_shrinks_range_under_outlier(self, rng):
        obs = quant._Observer(percentile=99.9)
        arr = rng.standard_normal(100_000)
        arr[0] = 1000.0
        obs.observe("p", arr)
        lo, hi = obs.ranges()["p"]
        mm_scale, _ = quant.act_qparams(arr.min(), arr.max())
        pct_scale, _ = quant.act_qparams(lo, hi)
        assert pct_scale < mm_scale

    def test_uncalibrated_point_named(self):
        m = self._model()
        ranges = quant.calibrate(m, self._batches(1))
        key = next(iter(ranges))
        del ranges[key]
        with pytest.raises(CalibrationError, match="uncalibrated"):
            quant.prepare(m, ranges)

    def test_applied_forward_runs_and_differs_slightly(self):
        m = self._model()
        batches = self._batches(1)
        scheme = quant.prepare(m, quant.calibrate(m, batches))
        x = Tensor(batches[0])
        plain = m.forward(x, training=False)
        qout = quant.quantized_forward(m, scheme, x)
        assert qout[0].shape == plain[0].shape
        assert not np.array_equal(qout[0].data, plain[0].data)
        rel = np.abs(qout[0].data - plain[0].data).max() / max(np.abs(plain[0].data).max(), 1e-9)
        assert rel < 0.6

    def test_grid_refinement_converges_monotonically(self):
        m = self._model()
        batches = self._batches(1)
        ranges = quant.calibrate(m, batches)
        x = Tensor(batches[0])
        plain = m.forward(x, training=False)[0].data
        errs = []
        for levels in (127, 2047, 32767):
            scheme = quant.prepare(m, ranges, levels=levels)
            q = quant.quantized_forward(m, scheme, x)[0].data
            errs.append(np.abs(q - plain).max())
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-2 * max(np.abs(plain).max(), 1e-9)

    def test_sidecar_roundtrip(self, tmp_path):
        m = self._model()
        scheme = quant.prepare(m, quant.calibrate(m, self._batches(1)))
        p = tmp_path / "q.quant"
        quant.save_scheme(p, scheme)
        act = quant.load_scheme_act(p)
        assert set(act) == set(scheme.act)
        for k, (s, z) in scheme.act.items():
            assert abs(act[k][0] - s) < 1e-6 * max(abs(s), 1e-12)
            assert act[k][1] == z

    def test_scheme_reconstructed_from_sidecar_matches(self, tmp_path):
        m = self._model()
        batches = self._batches(1)
        scheme = quant.prepare(m, quant.calibrate(m, batches))
        p = tmp_path / "q.quant"
        quant.save_scheme(p, scheme)
        rebuilt = quant.scheme_from_sidecar(m, p)
        x = Tensor(batches[0])
        a = quant.quantized_forward(m, scheme, x)[0].data
        b = quant.quantized_forward(m, rebuilt, x)[0].data
        # scales are stored as f32, so outputs agree only to that precision
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4 * np.abs(a).max())
