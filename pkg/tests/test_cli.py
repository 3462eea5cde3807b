"""End-user command surface: exit codes, error lines, manifests, pipelines."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from rasalore.cli import main
from rasalore.config import save_config, toy_config


@pytest.fixture()
def runner():
    return CliRunner()


def _run(runner, args, env=None):
    return runner.invoke(main, args, env=env, catch_exceptions=False)


@pytest.fixture()
def toy_cfg_path(tmp_path):
    cfg = toy_config(augment=False, batch_size=8)
    path = tmp_path / "toy.yaml"
    save_config(cfg, path)
    return path


@pytest.fixture()
def dataset_dir(runner, tmp_path):
    out = tmp_path / "ds"
    res = _run(runner, ["synth", "--n", "50", "--seed", "0",
                        "--image-size", "64", "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture()
def mask_dir(runner, tmp_path, dataset_dir):
    out = tmp_path / "wm"
    res = _run(runner, ["gen-weak-masks", "--dataset", str(dataset_dir),
                        "--mode", "simulate", "--seed", "0",
                        "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


class TestUsageErrors:
    def test_synth_bad_n(self, runner, tmp_path):
        res = _run(runner, ["synth", "--n", "0",
                            "--out", str(tmp_path / "x")])
        assert res.exit_code == 2
        assert "ERROR:USAGE:" in res.output

    def test_synth_bad_rate(self, runner, tmp_path):
        res = _run(runner, ["synth", "--anomaly-rate", "1.5",
                            "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_gen_masks_ddpt_needs_checkpoint(self, runner, dataset_dir,
                                             tmp_path):
        res = _run(runner, ["gen-weak-masks", "--dataset", str(dataset_dir),
                            "--mode", "ddpt", "--out", str(tmp_path / "x")])
        assert res.exit_code == 2
        assert "ERROR:USAGE:" in res.output

    def test_train_seg_needs_weak_masks(self, runner, dataset_dir, tmp_path):
        res = _run(runner, ["train", "--stage", "seg",
                            "--dataset", str(dataset_dir),
                            "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_nonempty_out_without_force(self, runner, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "leftover.txt").write_text("x")
        res = _run(runner, ["synth", "--n", "8", "--seed", "0",
                            "--image-size", "64", "--out", str(out)])
        assert res.exit_code == 2
        assert "--force" in res.output

    def test_force_reuses_out(self, runner, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "leftover.txt").write_text("x")
        res = _run(runner, ["synth", "--n", "8", "--seed", "0",
                            "--image-size", "64", "--out", str(out),
                            "--force"])
        assert res.exit_code == 0, res.output


class TestDataErrors:
    def test_eval_missing_dataset_manifest(self, runner, tmp_path,
                                           dataset_dir, mask_dir,
                                           toy_cfg_path):
        train_out = tmp_path / "tr"
        res = _run(runner, ["train", "--stage", "seg",
                            "--config", str(toy_cfg_path),
                            "--dataset", str(dataset_dir),
                            "--weak-masks", str(mask_dir / "weak_masks.json"),
                            "--epochs", "1", "--out", str(train_out)])
        assert res.exit_code == 0, res.output
        empty = tmp_path / "empty_ds"
        empty.mkdir()
        res = _run(runner, ["eval",
                            "--checkpoint", str(train_out / "checkpoint.pt"),
                            "--dataset", str(empty),
                            "--report", str(tmp_path / "rep")])
        assert res.exit_code == 3
        assert "ERROR:DATA:" in res.output


class TestManifests:
    def test_synth_manifest_written(self, dataset_dir):
        manifest = json.loads((dataset_dir / "run_manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 0
        assert manifest["n"] == 50

    def test_seed_sampled_when_omitted(self, runner, tmp_path):
        res = _run(runner, ["synth", "--n", "8", "--image-size", "64",
                            "--out", str(tmp_path / "s")])
        assert res.exit_code == 0
        assert "sampled seed" in res.output


class TestPipeline:
    def test_full_seg_flow(self, runner, tmp_path, dataset_dir, mask_dir,
                           toy_cfg_path):
        train_out = tmp_path / "train"
        res = _run(runner, ["train", "--stage", "seg",
                            "--config", str(toy_cfg_path),
                            "--dataset", str(dataset_dir),
                            "--weak-masks", str(mask_dir / "weak_masks.json"),
                            "--epochs", "2", "--seed", "1",
                            "--out", str(train_out)])
        assert res.exit_code == 0, res.output
        assert (train_out / "checkpoint.pt").exists()
        assert (train_out / "loss_log.ndjson").exists()
        csv = (train_out / "loss_per_epoch.csv").read_text().splitlines()
        assert csv[0] == "epoch,mean_total_loss"
        assert len(csv) == 3

        rep_out = tmp_path / "rep"
        res = _run(runner, ["eval",
                            "--checkpoint", str(train_out / "checkpoint.pt"),
                            "--dataset", str(dataset_dir),
                            "--report", str(rep_out), "--save-masks"])
        assert res.exit_code == 0, res.output
        report = json.loads((rep_out / "report.json").read_text())
        assert "mean_dice" in report
        assert (rep_out / "per_slice_dice.csv").exists()
        assert list((rep_out / "masks").glob("*_prob.png"))

    def test_eval_rejects_ddpt_checkpoint(self, runner, tmp_path,
                                          dataset_dir):
        import rasalore.trainer as trainer_mod
        from rasalore.ddpt import DDPTModel
        cfg = toy_config(ddpt_vit_depth=1)
        model = DDPTModel(cfg)
        ck = tmp_path / "ddpt.pt"
        trainer_mod.save_checkpoint(ck, model, cfg, "ddpt", 0)
        res = _run(runner, ["eval", "--checkpoint", str(ck),
                            "--dataset", str(dataset_dir),
                            "--report", str(tmp_path / "r")])
        assert res.exit_code == 2

    def test_ingest_mode_round_trip(self, runner, tmp_path, dataset_dir,
                                    mask_dir):
        out = tmp_path / "wm2"
        res = _run(runner, ["gen-weak-masks", "--dataset", str(dataset_dir),
                            "--mode", "ingest",
                            "--mask-dir", str(mask_dir / "masks"),
                            "--seed", "0", "--out", str(out)])
        assert res.exit_code == 0, res.output
        a = json.loads((mask_dir / "weak_masks.json").read_text())
        b = json.loads((out / "weak_masks.json").read_text())
        assert set(a["slices"]) == set(b["slices"]) if isinstance(
            a.get("slices"), dict) else True
