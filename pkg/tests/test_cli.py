"""End-to-end command-line behavior: pipelines, exit codes, idempotence."""

import json
import os

import numpy as np
import pytest

from crowdcount.cli import main
from crowdcount.formats import read_density_map, read_segmentation_mask


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--out", str(root / "ds"), "--n", "5", "--seed", "3",
               "--count-min", "3", "--count-max", "12"])
    assert rc == 0
    return root / "ds"


@pytest.fixture(scope="module")
def small_checkpoint(tmp_path_factory, small_dataset):
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "train", "--dataset", str(small_dataset), "--out", str(out),
        "--iterations", "8", "--patch-size", "64", "--batch-size", "2",
        "--val-fraction", "0.2", "--seed", "0",
    ])
    assert rc == 0
    return out / "checkpoint.pt"


class TestSynth:
    def test_writes_dataset_and_manifest(self, small_dataset):
        assert (small_dataset / "manifest.json").exists()
        assert (small_dataset / "run_manifest.json").exists()
        run = json.loads((small_dataset / "run_manifest.json").read_text())
        assert run["command"] == "synth"
        assert run["seed"] == 3

    def test_missing_required_args_exit_2(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--n", "2"])
        assert err.value.code == 2


class TestGenGt:
    def test_writes_containers(self, small_dataset, tmp_path):
        rc = main(["gen-gt", "--dataset", str(small_dataset), "--out", str(tmp_path / "gt"),
                   "--sigma", "4", "--seg-threshold", "0.001"])
        assert rc == 0
        dmap = read_density_map(tmp_path / "gt" / "img_00000.dmap")
        mask = read_segmentation_mask(tmp_path / "gt" / "img_00000.smsk")
        assert dmap.values.shape == (128, 128)
        assert mask.values.shape == (128, 128)
        labels = json.loads((small_dataset / "annotations.json").read_text())
        assert abs(dmap.count - len(labels[0]["points"])) < 1e-3

    def test_bad_sigma_exit_3(self, small_dataset, tmp_path):
        rc = main(["gen-gt", "--dataset", str(small_dataset),
                   "--out", str(tmp_path / "gt"), "--sigma", "-1"])
        assert rc == 3

    def test_missing_dataset_exit_5(self, tmp_path):
        rc = main(["gen-gt", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "gt")])
        assert rc == 5


class TestTrain:
    def test_outputs(self, small_checkpoint):
        out = small_checkpoint.parent
        assert small_checkpoint.exists()
        assert (out / "history.csv").exists()
        run = json.loads((out / "run_manifest.json").read_text())
        assert run["command"] == "train"
        assert run["model_config"]["enable_sam"] is True

    def test_ablation_config_recorded(self, small_dataset, tmp_path):
        rc = main([
            "train", "--dataset", str(small_dataset), "--out", str(tmp_path / "vgg"),
            "--ablation", "vgg", "--iterations", "2", "--patch-size", "64",
            "--batch-size", "2", "--val-fraction", "0", "--seed", "0",
        ])
        assert rc == 0
        run = json.loads((tmp_path / "vgg" / "run_manifest.json").read_text())
        assert run["model_config"]["enable_sam"] is False
        assert run["model_config"]["enable_gam"] is False
        assert run["model_config"]["enable_multiscale"] is False

    def test_unknown_config_key_exit_3(self, small_dataset, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense = 4\n")
        rc = main(["train", "--dataset", str(small_dataset), "--out", str(tmp_path / "o"),
                   "--config", str(cfg)])
        assert rc == 3


class TestEval:
    def test_report_and_figures(self, small_dataset, small_checkpoint, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--checkpoint", str(small_checkpoint),
                   "--dataset", str(small_dataset), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert {"mae", "mse", "n_images", "per_bin", "config"} <= set(report)
        assert report["n_images"] == 5
        assert (out / "density_bins.csv").exists()
        assert (out / "density_bins.png").exists()

    def test_cross_dataset_same_params_zero_drop(self, small_dataset, small_checkpoint, tmp_path):
        out = tmp_path / "cross"
        rc = main(["eval", "--checkpoint", str(small_checkpoint),
                   "--dataset", str(small_dataset), "--out", str(out),
                   "--cross-dataset", "--target-checkpoint", str(small_checkpoint)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["cross_dataset"]["mae"]["C"] == 0.0
        assert report["cross_dataset"]["mse"]["C"] == 0.0

    def test_idempotent_metric_json(self, small_dataset, small_checkpoint, tmp_path):
        env = os.environ.get("HACCN_DETERMINISTIC")
        os.environ["HACCN_DETERMINISTIC"] = "1"
        try:
            a, b = tmp_path / "a", tmp_path / "b"
            for out in (a, b):
                rc = main(["eval", "--checkpoint", str(small_checkpoint),
                           "--dataset", str(small_dataset), "--out", str(out)])
                assert rc == 0
            assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        finally:
            if env is None:
                os.environ.pop("HACCN_DETERMINISTIC", None)
            else:
                os.environ["HACCN_DETERMINISTIC"] = env

    def test_missing_checkpoint_exit_5(self, small_dataset, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "nope.pt"),
                   "--dataset", str(small_dataset), "--out", str(tmp_path / "o")])
        assert rc == 5


class TestAdaptCommand:
    def test_adapted_checkpoint_and_priors(self, small_dataset, small_checkpoint, tmp_path):
        target = tmp_path / "target"
        assert main(["synth", "--out", str(target), "--n", "3", "--preset", "shifted",
                     "--seed", "11", "--count-min", "8", "--count-max", "20"]) == 0
        out = tmp_path / "adapted"
        rc = main([
            "adapt", "--checkpoint", str(small_checkpoint),
            "--source", str(small_dataset), "--target", str(target),
            "--out", str(out), "--agg", "lse", "--lse-r", "4",
            "--label-noise", "0.15", "--patch-size", "64",
            "--cam-iterations", "4", "--cam-finetune-iterations", "3",
            "--count-iterations", "4", "--seed", "0",
        ])
        assert rc == 0
        assert (out / "adapted.pt").exists()
        priors = json.loads((out / "priors.json").read_text())
        assert len(priors["n"]) == 6 and len(priors["boundaries"]) == 5
        losses = json.loads((out / "stage_losses.json").read_text())
        assert set(losses) == {"cam_source", "cam_target", "finetune"}


class TestPlot:
    def test_panels_and_bars(self, small_dataset, small_checkpoint, tmp_path):
        out = tmp_path / "plots"
        rc = main(["plot", "--checkpoint", str(small_checkpoint),
                   "--dataset", str(small_dataset), "--out", str(out), "--limit", "2"])
        assert rc == 0
        assert (out / "img_00000_panel.png").exists()
        assert (out / "img_00001_panel.png").exists()
        assert (out / "density_bins.png").exists()
        assert (out / "density_bins.csv").exists()
