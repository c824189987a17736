"""Losses, patch extraction, augmentation, and the optimization loop."""

import math

import numpy as np
import pytest
import torch

from crowdcount.density import ClassBoundaries, generate_density_map
from crowdcount.model import ModelConfig, ablation_config, build_model
from crowdcount.synthdata import PRESETS, DatasetRecord, SceneSpec, generate_scene
from crowdcount.training import (
    TrainConfig,
    TrainingDivergence,
    density_loss,
    load_train_config,
    make_training_patches,
    save_train_config,
    segmentation_loss,
    total_loss,
    train,
    write_history_csv,
)

import dataclasses


def make_records(n, spec=None, seed=100):
    spec = spec or PRESETS["source"]
    records = []
    for i in range(n):
        img, ann = generate_scene(dataclasses.replace(spec, seed=seed + i))
        ann.image_id = f"img_{i:05d}"
        records.append(DatasetRecord(ann.image_id, img, ann, 0))
    return records


class TestDensityLoss:
    def test_zero_at_perfect_prediction(self):
        x = torch.rand(2, 1, 8, 8)
        assert density_loss(x, x).item() == 0.0

    def test_constant_residual_closed_form(self):
        # P-pixel map with constant residual eps: squared loss is P * eps^2.
        eps = 0.25
        gt = torch.rand(1, 1, 6, 8, dtype=torch.float64)
        pred = gt + eps
        expected = 6 * 8 * eps**2
        assert abs(density_loss(pred, gt).item() - expected) < 1e-12

    def test_doubling_residual_quadruples_loss(self):
        gt = torch.rand(3, 1, 5, 5, dtype=torch.float64)
        delta = torch.rand_like(gt)
        l1 = density_loss(gt + delta, gt).item()
        l2 = density_loss(gt + 2 * delta, gt).item()
        assert abs(l2 - 4 * l1) < 1e-9 * max(1.0, l1)

    def test_unsquared_variant(self):
        eps = 0.5
        gt = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        pred = gt + eps
        expected = math.sqrt(16 * eps**2)
        assert abs(density_loss(pred, gt, squared=False).item() - expected) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            density_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class TestSegmentationLoss:
    def test_saturated_correct_logits(self):
        logits = torch.full((1, 1, 8, 8), 20.0)
        mask = torch.ones(1, 1, 8, 8)
        assert segmentation_loss(logits, mask).item() < 1e-6

    def test_zero_logits_give_ln2(self):
        logits = torch.zeros(1, 1, 8, 8)
        for mask in (torch.zeros(1, 1, 8, 8), torch.ones(1, 1, 8, 8)):
            assert abs(segmentation_loss(logits, mask).item() - math.log(2)) < 1e-6

    def test_matches_independent_bce(self):
        rng = np.random.default_rng(21)
        logits = rng.normal(0, 2, size=(2, 1, 6, 6))
        mask = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
        p = 1 / (1 + np.exp(-logits))
        expected = -(mask * np.log(p) + (1 - mask) * np.log(1 - p)).mean()
        got = segmentation_loss(torch.as_tensor(logits), torch.as_tensor(mask)).item()
        assert abs(got - expected) < 1e-6


class TestTotalLoss:
    def test_weight_zero_recovers_density_only(self):
        pred = torch.rand(1, 1, 4, 4)
        gt = torch.rand(1, 1, 4, 4)
        logits = torch.randn(1, 1, 4, 4)
        mask = torch.ones(1, 1, 4, 4)
        loss, d, s = total_loss(pred, gt, logits, mask, 0.0)
        assert loss.item() == density_loss(pred, gt).item()
        assert s == 0.0

    def test_both_zero(self):
        gt = torch.rand(1, 1, 4, 4)
        logits = torch.full((1, 1, 4, 4), 30.0)
        mask = torch.ones(1, 1, 4, 4)
        loss, _, _ = total_loss(gt, gt, logits, mask, 1.0)
        assert loss.item() < 1e-6

    def test_weight_difference_equals_seg_loss(self):
        torch.manual_seed(0)
        pred = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        gt = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        logits = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        mask = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        l1, _, s1 = total_loss(pred, gt, logits, mask, 1.0)
        l2, _, _ = total_loss(pred, gt, logits, mask, 2.0)
        assert abs((l2 - l1).item() - s1) < 1e-12


class TestPatchPipeline:
    CFG = TrainConfig(patch_size=96, patches_per_image=9, noise_std=0.0, seed=0)

    def test_nine_patches_per_image(self):
        records = make_records(10)
        samples = make_training_patches(records, self.CFG, np.random.default_rng(0))
        assert len(samples) == 90

    def test_supervision_shapes(self):
        records = make_records(1)
        s = make_training_patches(records, self.CFG, np.random.default_rng(0))[0]
        assert s.image.shape == (96, 96, 3)
        assert s.density.shape == (24, 24)
        assert s.mask.shape == (24, 24)

    def test_patch_mass_matches_points_in_window(self):
        # Kernels are truncated at 3*sigma, so only points within 3*sigma of
        # a crop edge can move mass across it; each such edge crossing costs
        # at most half the point's unit mass.
        records = make_records(6)
        samples = make_training_patches(records, self.CFG, np.random.default_rng(1))
        by_id = {r.image_id: r.annotation for r in records}
        reach = 3 * self.CFG.sigma
        for s in samples:
            pts = by_id[s.image_id].points
            x0, y0 = s.origin
            inside = (
                (pts[:, 0] >= x0) & (pts[:, 0] < x0 + 96)
                & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + 96)
            ).sum()
            edge_crossings = 0
            for px, py in pts:
                for e in (x0, x0 + 96):
                    edge_crossings += int(abs(px - e) <= reach and y0 - reach <= py <= y0 + 96 + reach)
                for e in (y0, y0 + 96):
                    edge_crossings += int(abs(py - e) <= reach and x0 - reach <= px <= x0 + 96 + reach)
            disc = abs(float(s.density.sum()) - float(inside))
            if edge_crossings == 0:
                assert disc <= 1e-5
            else:
                assert disc <= 0.5 * edge_crossings + 1e-5

    def test_single_border_point_within_half_person(self):
        # One point sitting right on the crop edge moves at most half its
        # mass across it; this pins the half-person figure in its sparse
        # regime. x = 96 lies outside the [0, 96) window, so everything the
        # crop picks up is leaked-in mass.
        from crowdcount.density import PointAnnotation

        ann = PointAnnotation("edge", 160, 160, [[96.0, 48.0]])
        full = generate_density_map(ann, 4.0)
        crop = full.values[0:96, 0:96]
        assert 0 < crop.sum() <= 0.5 + 1e-6

    def test_flip_equivariance_with_mirrored_dataset(self):
        # Cropping the mirrored ground truth at the mirrored origin equals
        # mirroring the cropped ground truth: flipping commutes with patch
        # generation.
        records = make_records(2)
        cfg = dataclasses.replace(self.CFG, flip=False)
        samples = make_training_patches(records, cfg, np.random.default_rng(2))
        by_id = {r.image_id: r for r in records}
        for s in samples[:6]:
            rec = by_id[s.image_id]
            w = rec.annotation.width
            mirrored_pts = rec.annotation.points.copy()
            mirrored_pts[:, 0] = (w - 1) - mirrored_pts[:, 0]
            from crowdcount.density import DensityMap, PointAnnotation, downsample_density_map

            m_ann = PointAnnotation("m", w, rec.annotation.height, mirrored_pts)
            m_full = generate_density_map(m_ann, cfg.sigma).values
            x0, y0 = s.origin
            mx0 = w - cfg.patch_size - x0
            m_crop = m_full[y0 : y0 + cfg.patch_size, mx0 : mx0 + cfg.patch_size]
            m_small = downsample_density_map(DensityMap(m_crop), 4).values
            np.testing.assert_allclose(m_small, s.density[:, ::-1], atol=1e-5)

    def test_flip_preserves_count(self):
        cfg = dataclasses.replace(self.CFG, flip=True)
        records = make_records(4)
        samples = make_training_patches(records, cfg, np.random.default_rng(2))
        flips = [s for s in samples if s.flipped]
        assert flips, "expected some flipped samples at p=0.5"
        for s in flips:
            assert abs(float(s.density.sum()) - float(s.density[:, ::-1].sum())) < 1e-4
            assert set(np.unique(s.mask)) <= {0, 1}

    def test_deterministic_under_seed(self):
        records = make_records(3)
        a = make_training_patches(records, self.CFG, np.random.default_rng(7))
        b = make_training_patches(records, self.CFG, np.random.default_rng(7))
        for sa, sb in zip(a, b):
            assert sa.origin == sb.origin and sa.flipped == sb.flipped
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.density, sb.density)

    def test_small_images_zero_padded(self):
        spec = dataclasses.replace(PRESETS["source"], size=64)
        records = make_records(1, spec=spec)
        samples = make_training_patches(records, self.CFG, np.random.default_rng(0))
        assert samples[0].image.shape == (96, 96, 3)
        # padded region contributes no density mass
        assert samples[0].density.sum() == pytest.approx(records[0].annotation.count, abs=0.5)

    def test_noise_applied_to_image_only(self):
        cfg = dataclasses.replace(self.CFG, noise_std=0.05, flip=False)
        records = make_records(1)
        noisy = make_training_patches(records, cfg, np.random.default_rng(3))
        clean = make_training_patches(
            records, dataclasses.replace(cfg, noise_std=0.0), np.random.default_rng(3)
        )
        assert not np.array_equal(noisy[0].image, clean[0].image)
        np.testing.assert_array_equal(noisy[0].density, clean[0].density)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_training_patches([], self.CFG, np.random.default_rng(0))


class TestTrainConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(learning_rate=1e-3, iterations=42, flip=False, patch_size=96)
        path = tmp_path / "train.cfg"
        save_train_config(path, cfg)
        assert load_train_config(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rate = 0.001\nwarmup = 10\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_train_config(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# comment\n\niterations = 7  # trailing\n")
        assert load_train_config(path).iterations == 7


class TestTrainLoop:
    TOY = ModelConfig(channel_scale=0.25)
    FAST = TrainConfig(
        learning_rate=1e-3, batch_size=2, iterations=5, patch_size=64,
        patches_per_image=2, val_fraction=0.0, seed=0, noise_std=0.0,
    )

    def test_zero_iterations_returns_initialization(self):
        records = make_records(2)
        cfg = dataclasses.replace(self.FAST, iterations=0)
        result = train(self.TOY, cfg, records)
        reference = build_model(self.TOY, seed=cfg.seed)
        for (na, pa), (nb, pb) in zip(
            sorted(result.model.named_parameters()), sorted(reference.named_parameters())
        ):
            assert na == nb and torch.equal(pa, pb)
        assert result.history == []

    def test_same_seed_identical_loss(self):
        records = make_records(2)
        r1 = train(self.TOY, self.FAST, records)
        r2 = train(self.TOY, self.FAST, records)
        assert [h.total_loss for h in r1.history] == [h.total_loss for h in r2.history]

    def test_loss_decreases_on_tiny_problem(self):
        records = make_records(3)
        cfg = dataclasses.replace(self.FAST, iterations=60, learning_rate=2e-3)
        result = train(self.TOY, cfg, records)
        first = np.mean([h.total_loss for h in result.history[:5]])
        last = np.mean([h.total_loss for h in result.history[-5:]])
        assert last < first

    def test_validation_rows_and_checkpoint(self, tmp_path):
        records = make_records(6)
        cfg = dataclasses.replace(self.FAST, iterations=10, val_fraction=0.34, val_every=5)
        result = train(self.TOY, cfg, records, out_dir=tmp_path)
        val_rows = [h for h in result.history if h.val_mae is not None]
        assert val_rows and result.best_val_mae is not None
        assert (tmp_path / "checkpoint.pt").exists()
        assert (tmp_path / "history.csv").exists()
        header = (tmp_path / "history.csv").read_text().splitlines()[0]
        assert header == "iteration,density_loss,seg_loss,total_loss,val_mae"

    def test_divergence_aborts_with_diagnostic(self):
        records = make_records(2)
        cfg = dataclasses.replace(self.FAST, learning_rate=1e18, iterations=400, grad_clip=0.0)
        with pytest.raises(TrainingDivergence):
            train(self.TOY, cfg, records)

    def test_lambda_zero_without_sam_is_baseline_regime(self):
        records = make_records(2)
        cfg = dataclasses.replace(self.FAST, seg_loss_weight=0.0, iterations=3)
        result = train(ablation_config("ms", channel_scale=0.25), cfg, records)
        assert all(h.seg_loss == 0.0 for h in result.history)
        assert all(h.total_loss == h.density_loss for h in result.history)
