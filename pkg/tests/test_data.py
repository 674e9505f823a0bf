"""File formats, resizing, manifests and the synthetic dataset."""

import numpy as np
import pytest

from dualseg.data import (DEFAULT_SIZE, load_dataset, load_image, load_mask,
                          read_manifest, read_pnm, resize_bilinear, resize_nearest,
                          save_mask, synth_dataset, write_dataset, write_pnm)
from dualseg.errors import ManifestError


class TestPnm:
    def test_ppm_roundtrip(self, rng, tmp_path):
        img = rng.integers(0, 256, (10, 14, 3)).astype(np.uint8)
        p = tmp_path / "x.ppm"
        write_pnm(p, img)
        np.testing.assert_array_equal(read_pnm(p), img)

    def test_pgm_roundtrip(self, rng, tmp_path):
        img = rng.integers(0, 256, (6, 7)).astype(np.uint8)
        p = tmp_path / "x.pgm"
        write_pnm(p, img)
        np.testing.assert_array_equal(read_pnm(p), img)

    def test_comments_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        np.testing.assert_array_equal(read_pnm(p), [[0, 64], [128, 255]])

    def test_truncated_data_rejected(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(ValueError, match="truncated"):
            read_pnm(p)


class TestLoading:
    def test_pure_red_normalizes_to_one(self, tmp_path):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[:, :, 0] = 255
        p = tmp_path / "red.ppm"
        write_pnm(p, img)
        t = load_image(p, size=None)
        assert t.shape == (3, 2, 2)
        np.testing.assert_array_equal(t[0], 1.0)
        np.testing.assert_array_equal(t[1:], 0.0)

    def test_resize_to_default_dims(self, rng, tmp_path):
        img = rng.integers(0, 256, (720, 1280, 3)).astype(np.uint8)
        p = tmp_path / "big.ppm"
        write_pnm(p, img)
        t = load_image(p)
        assert t.shape == (3, *DEFAULT_SIZE) == (3, 384, 640)

    def test_mask_label_out_of_range_named(self, tmp_path):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1, 2] = 3
        p = tmp_path / "m.pgm"
        write_pnm(p, m)
        with pytest.raises(ValueError, match="label 3"):
            load_mask(p, num_classes=2, size=None)

    def test_mask_save_load_roundtrip(self, rng, tmp_path):
        m = rng.integers(0, 2, (8, 8)).astype(np.int64)
        p = tmp_path / "m.pgm"
        save_mask(p, m)
        np.testing.assert_array_equal(load_mask(p, 2, size=None), m)


class TestResize:
    def test_bilinear_constant_stays_constant(self):
        img = np.full((3, 10, 10), 0.37, dtype=np.float32)
        out = resize_bilinear(img, (7, 13))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_bilinear_identity_when_same_size(self, rng):
        img = rng.uniform(0, 1, (3, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(resize_bilinear(img, (5, 5)), img)

    def test_nearest_preserves_label_values(self, rng):
        m = rng.integers(0, 3, (9, 9))
        out = resize_nearest(m, (5, 7))
        assert set(np.unique(out)) <= set(np.unique(m))
        assert out.shape == (5, 7)


class TestSynth:
    def test_bitwise_reproducible(self):
        a = synth_dataset(5, seed=42, size=(64, 64))
        b = synth_dataset(5, seed=42, size=(64, 64))
        for sa, sb in zip(a.train, b.train):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.drivable, sb.drivable)
            np.testing.assert_array_equal(sa.lane, sb.lane)

    def test_drivable_region_connected(self):
        ds = synth_dataset(10, seed=9, size=(64, 64))
        for s in ds.train:
            fg = s.drivable > 0
            assert fg.any()
            # flood fill from the first foreground pixel
            from collections import deque
            seen = np.zeros_like(fg)
            ys, xs = np.nonzero(fg)
            q = deque([(ys[0], xs[0])])
            seen[ys[0], xs[0]] = True
            h, w = fg.shape
            while q:
                y, x = q.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        q.append((ny, nx))
            assert seen.sum() == fg.sum()

    def test_lane_pixels_below_ten_percent(self):
        for seed in (0, 1, 2, 3):
            ds = synth_dataset(8, seed=seed, size=(64, 64))
            for s in ds.train:
                assert s.lane.sum() <= 0.10 * s.lane.size

    def test_three_class_variant(self):
        ds = synth_dataset(4, seed=2, size=(64, 64), drivable_classes=3)
        labels = np.unique(np.stack([s.drivable for s in ds.train]))
        assert set(labels.tolist()) == {0, 1, 2}

    def test_size_must_divide_16(self):
        with pytest.raises(ValueError, match="divisible"):
            synth_dataset(1, seed=0, size=(60, 64))


class TestManifest:
    def test_all_missing_files_reported(self, tmp_path):
        man = tmp_path / "m.tsv"
        man.write_text("a.ppm\tb.pgm\tc.pgm\ttrain\nd.ppm\te.pgm\tf.pgm\tval\n")
        with pytest.raises(ManifestError) as exc:
            read_manifest(man)
        msg = str(exc.value)
        for name in ("a.ppm", "b.pgm", "c.pgm", "d.ppm", "e.pgm", "f.pgm"):
            assert name in msg

    def test_bad_split_rejected(self, tmp_path):
        man = tmp_path / "m.tsv"
        man.write_text("a.ppm\tb.pgm\tc.pgm\ttest\n")
        with pytest.raises(ManifestError, match="split"):
            read_manifest(man)

    def test_wrong_field_count_rejected(self, tmp_path):
        man = tmp_path / "m.tsv"
        man.write_text("a.ppm\tb.pgm\n")
        with pytest.raises(ManifestError, match="4 tab-separated"):
            read_manifest(man)

    def test_write_then_load_dataset(self, tmp_path):
        ds = synth_dataset(3, seed=1, size=(64, 64))
        man = write_dataset(ds, tmp_path / "data")
        loaded = load_dataset(man, size=(64, 64))
        assert len(loaded.train) == 3 and len(loaded.val) == 3
        for a, b in zip(ds.train, loaded.train):
            np.testing.assert_array_equal(a.drivable, b.drivable)
            np.testing.assert_array_equal(a.lane, b.lane)
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
