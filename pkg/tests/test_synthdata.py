"""Synthetic scene and dataset generation."""

import dataclasses
import json

import numpy as np
import pytest

from crowdcount.synthdata import (
    PRESETS,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
)


class TestGenerateScene:
    def test_zero_count_range(self):
        img, ann = generate_scene(SceneSpec(seed=1, count_range=(0, 0)))
        assert ann.count == 0
        assert img.shape == (128, 128, 3)
        assert img.dtype == np.float32

    def test_deterministic_under_seed(self):
        a_img, a_ann = generate_scene(SceneSpec(seed=42))
        b_img, b_ann = generate_scene(SceneSpec(seed=42))
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_ann.points, b_ann.points)

    def test_different_seeds_differ(self):
        a_img, _ = generate_scene(SceneSpec(seed=1))
        b_img, _ = generate_scene(SceneSpec(seed=2))
        assert not np.array_equal(a_img, b_img)

    def test_fixed_count_range_hits_exactly(self):
        for seed in range(30):
            _, ann = generate_scene(SceneSpec(seed=seed, count_range=(40, 40)))
            assert ann.count == 40

    def test_points_in_bounds(self):
        for seed in range(10):
            _, ann = generate_scene(SceneSpec(seed=seed, count_range=(50, 80)))
            ann.validate()

    def test_pixel_range(self):
        img, _ = generate_scene(SceneSpec(seed=3, count_range=(60, 60)))
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_backgrounds(self):
        for bg in ("flat", "gradient", "noise-texture"):
            img, _ = generate_scene(SceneSpec(seed=4, background=bg, count_range=(0, 0)))
            assert np.isfinite(img).all()

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            SceneSpec(count_range=(5, 2))
        with pytest.raises(ValueError):
            SceneSpec(background="checkerboard")


class TestGenerateDataset:
    def test_layout_and_reload(self, tmp_path):
        records = generate_dataset(tmp_path / "d", 4, PRESETS["source"], seed=0)
        assert (tmp_path / "d" / "images").is_dir()
        assert (tmp_path / "d" / "annotations.json").exists()
        assert (tmp_path / "d" / "labels.json").exists()
        assert (tmp_path / "d" / "manifest.json").exists()
        back = load_dataset(tmp_path / "d")
        assert [r.image_id for r in back] == [r.image_id for r in records]
        for a, b in zip(records, back):
            np.testing.assert_array_equal(a.annotation.points, b.annotation.points)
            assert a.class_index == b.class_index
            # images round-trip through 8-bit PNG
            assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-6

    def test_empty_dataset_has_manifest(self, tmp_path):
        generate_dataset(tmp_path / "d", 0, PRESETS["source"], seed=0)
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["n_images"] == 0
        assert load_dataset(tmp_path / "d") == []

    def test_regeneration_reproduces_hashes(self, tmp_path):
        generate_dataset(tmp_path / "a", 3, PRESETS["source"], seed=7)
        generate_dataset(tmp_path / "b", 3, PRESETS["source"], seed=7)
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["hashes"] == mb["hashes"]

    def test_shift_preset_changes_mean_count(self, tmp_path):
        src = generate_dataset(tmp_path / "s", 12, PRESETS["source"], seed=1)
        tgt = generate_dataset(tmp_path / "t", 12, PRESETS["shifted"], seed=1)
        mean_src = np.mean([r.annotation.count for r in src])
        mean_tgt = np.mean([r.annotation.count for r in tgt])
        assert mean_tgt > mean_src

    def test_labels_match_counts(self, tmp_path):
        from crowdcount.density import ClassBoundaries, assign_density_class

        b = ClassBoundaries()
        records = generate_dataset(tmp_path / "d", 5, PRESETS["source"], seed=2, boundaries=b)
        for r in records:
            assert r.class_index == assign_density_class(r.annotation.count, b).index
