import collections
import json

import numpy as np
import pytest

from relfuse.synthmbu import (SPLITS, DatasetManifest, GeneratorConfig, apply_test_shift, build_dataset,
                              generate_scene, load_manifest, load_split, translate)
from relfuse.uta import ConfigError


class TestGenerateScene:
    def test_same_seed_bit_identical(self):
        a, b = generate_scene(123), generate_scene(123)
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.ir, b.ir)
        assert a.boxes == b.boxes and a.scene_tag == b.scene_tag
        assert np.array_equal(a.true_shift, b.true_shift)

    def test_layout(self):
        s = generate_scene(0)
        assert s.rgb.shape == s.ir.shape == (1, 3, 64, 64)
        assert s.rgb.dtype == np.float32
        assert 1 <= len(s.boxes) <= 3
        assert np.all(np.abs(s.true_shift) <= 8)

    @pytest.mark.parametrize("seed", range(20))
    def test_boxes_inside_image(self, seed):
        for cx, cy, w, h in generate_scene(seed).boxes:
            assert cx - w / 2 >= 0 and cx + w / 2 <= 64
            assert cy - h / 2 >= 0 and cy + h / 2 <= 64

    @pytest.mark.parametrize("seed", range(10))
    def test_ir_peak_at_box_center(self, seed):
        cfg = GeneratorConfig(max_targets=1, clutter_amplitude=0.0)
        s = generate_scene(seed, cfg)
        (cx, cy, _, _), = s.boxes
        py, px = np.unravel_index(np.argmax(s.ir[0, 0]), s.ir.shape[2:])
        assert abs(px - cx) <= 0.5 and abs(py - cy) <= 0.5

    def test_zero_shift_range_aligns_modalities(self):
        cfg = GeneratorConfig(shift_range=0.0, max_targets=1, clutter_amplitude=0.0)
        s = generate_scene(4, cfg, tag="daytime")
        assert np.all(s.true_shift == 0)
        (cx, cy, _, _), = s.boxes
        rgb = s.rgb[0].mean(axis=0)
        background = np.median(rgb)
        py, px = np.unravel_index(np.argmax(np.abs(rgb - background)), rgb.shape)
        assert abs(px - cx) <= 1.5 and abs(py - cy) <= 1.5

    @pytest.mark.parametrize("seed", [11, 12, 13])
    def test_rgb_target_follows_true_shift(self, seed):
        cfg = GeneratorConfig(max_targets=1, clutter_amplitude=0.0)
        s = generate_scene(seed, cfg, tag="daytime")
        # same draws without the visible target isolate its contribution
        bg = generate_scene(seed, GeneratorConfig(max_targets=1, clutter_amplitude=0.0, rgb_amplitude=0.0), tag="daytime")
        (cx, cy, _, _), = s.boxes
        wgt = (s.rgb[0] - bg.rgb[0]).astype(np.float64).mean(axis=0)
        yy, xx = np.mgrid[0:64, 0:64]
        mx, my = (wgt * xx).sum() / wgt.sum(), (wgt * yy).sum() / wgt.sum()
        if 6 < cx + s.true_shift[0] < 58 and 6 < cy + s.true_shift[1] < 58:
            assert abs(mx - (cx + s.true_shift[0])) < 0.5 and abs(my - (cy + s.true_shift[1])) < 0.5

    def test_dark_scene_ir_contrast_dominates(self):
        cfg = GeneratorConfig(max_targets=1)
        for seed in range(10):
            s = generate_scene(seed, cfg, tag="dark")
            (cx, cy, _, _), = s.boxes
            ix, iy = int(cx), int(cy)
            rx, ry = int(round(cx + s.true_shift[0])), int(round(cy + s.true_shift[1]))
            ir_c = s.ir[0, 0, iy, ix] - np.median(s.ir[0, 0])
            rgb = s.rgb[0].mean(axis=0)
            patch = rgb[max(ry - 1, 0):ry + 2, max(rx - 1, 0):rx + 2]
            rgb_c = patch.mean() - np.median(rgb)
            assert ir_c >= 3 * abs(rgb_c)

    @pytest.mark.parametrize("bad", [dict(size=16), dict(max_targets=4), dict(min_targets=0),
                                     dict(shift_range=17.0), dict(tag_mix=(0.5, 0.5, 0.5))])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            generate_scene(0, GeneratorConfig(**bad))

    def test_forced_tag(self):
        assert generate_scene(0, tag="backlight").scene_tag == "backlight"
        with pytest.raises(ConfigError):
            generate_scene(0, tag="foggy")


class TestTestShift:
    def test_zero_shift_identity(self):
        s = generate_scene(1)
        assert apply_test_shift(s, (0, 0)) is s

    def test_shift_and_back_leaves_border(self):
        s = generate_scene(2)
        back = apply_test_shift(apply_test_shift(s, (5, 0)), (-5, 0))
        assert np.array_equal(back.rgb[..., :, :59], s.rgb[..., :, :59])
        assert np.all(back.rgb[..., :, 59:] == 0)
        assert np.array_equal(back.ir, s.ir)
        assert back.boxes == s.boxes

    def test_labels_and_ir_unchanged(self):
        s = generate_scene(3)
        t = apply_test_shift(s, (0, -7))
        assert t.boxes == s.boxes and np.array_equal(t.ir, s.ir) and t.scene_tag == s.scene_tag
        np.testing.assert_array_equal(t.true_shift, s.true_shift + [0, -7])

    def test_translate_direction(self):
        img = np.zeros((1, 1, 4, 4))
        img[0, 0, 1, 1] = 1
        assert translate(img, 2, 1)[0, 0, 2, 3] == 1

    def test_oversized_shift_rejected(self):
        with pytest.raises(ConfigError):
            apply_test_shift(generate_scene(0), (65, 0))


class TestManifest:
    def test_default_counts(self):
        m = DatasetManifest()
        assert m.counts == {"train": 500, "val": 200, "test": 300}

    def test_splits_disjoint(self):
        m = DatasetManifest()
        seeds = [set(m.seeds(s)) for s in SPLITS]
        assert all(not (a & b) for i, a in enumerate(seeds) for b in seeds[i + 1:])

    def test_tag_counts_of_default_manifest(self):
        m = DatasetManifest()
        counts = collections.Counter(generate_scene(s, m.generator).scene_tag for sp in SPLITS for s in m.seeds(sp))
        # frozen exact counts; each lies within 4 sigma of its multinomial expectation
        assert counts == {"daytime": 833, "dark": 140, "backlight": 27}
        for tag, p in zip(("daytime", "dark", "backlight"), m.generator.tag_mix):
            assert abs(counts[tag] - 1000 * p) <= 4 * np.sqrt(1000 * p * (1 - p))

    def test_json_roundtrip(self):
        m = DatasetManifest(counts={"train": 3, "val": 0, "test": 2}, base_seed=9,
                            generator=GeneratorConfig(shift_range=4.0))
        back = DatasetManifest.from_json(json.loads(json.dumps(m.to_json())))
        assert back == m


class TestDatasetIO:
    def test_write_read_roundtrip(self, tmp_path):
        m = DatasetManifest(counts={"train": 3, "val": 1, "test": 2})
        build_dataset(m, tmp_path)
        assert load_manifest(tmp_path) == m
        scenes = load_split(tmp_path, "test")
        assert [s.seed for s in scenes] == m.seeds("test")
        for s in scenes:
            ref = generate_scene(s.seed, m.generator)
            assert np.array_equal(s.rgb, ref.rgb) and np.array_equal(s.ir, ref.ir)
            assert s.boxes == ref.boxes and s.scene_tag == ref.scene_tag
            np.testing.assert_array_equal(s.true_shift, ref.true_shift)

    def test_rebuild_is_byte_identical(self, tmp_path):
        m = DatasetManifest(counts={"train": 2, "val": 0, "test": 1})
        build_dataset(m, tmp_path / "a")
        build_dataset(m, tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_missing_root(self, tmp_path):
        with pytest.raises(OSError, match="nowhere"):
            load_split(tmp_path / "nowhere", "train")
