"""Training loop mechanics: schedule, checkpoints, determinism, NaN handling."""

import json

import numpy as np
import pytest
import torch

from rasalore.config import toy_config
from rasalore.data import DatasetSplit, synth_dataset
from rasalore.ddpt import simulate_weak_masks
from rasalore.model import SegmentationModel
from rasalore.trainer import (NumericsError, evaluate, export_masks, infer,
                              load_checkpoint, save_checkpoint,
                              train_segmentation)


@pytest.fixture(scope="module")
def tiny_setup():
    split = synth_dataset(12, 0.7, seed=3, image_size=64, slices_per_volume=4)
    sub = DatasetSplit(train=split.train[:8], test=split.train[:4])
    masks = simulate_weak_masks(sub.train + sub.test, seed=0)
    return sub, masks


class TestSchedule:
    def test_lr_halves_on_schedule(self, tiny_setup):
        sub, masks = tiny_setup
        cfg = toy_config(augment=False, lr_halving_period=2, batch_size=8)
        _, log = train_segmentation(cfg, sub, masks, epochs=5)
        lr_by_epoch = {}
        for rec in log.records:
            lr_by_epoch[rec["epoch"]] = rec["lr"]
        assert lr_by_epoch[0] == pytest.approx(cfg.lr)
        assert lr_by_epoch[1] == pytest.approx(cfg.lr)
        assert lr_by_epoch[2] == pytest.approx(cfg.lr / 2)
        assert lr_by_epoch[4] == pytest.approx(cfg.lr / 4)


class TestCheckpoints:
    def test_round_trip_preserves_outputs(self, tiny_setup, tmp_path):
        sub, masks = tiny_setup
        cfg = toy_config(augment=False, batch_size=8)
        model, _ = train_segmentation(cfg, sub, masks, epochs=1)
        path = save_checkpoint(tmp_path / "ck.pt", model, cfg,
                               "segmentation", 0)
        loaded, loaded_cfg, payload = load_checkpoint(path)
        assert payload["stage"] == "segmentation"
        assert loaded_cfg == cfg
        img = sub.train[0].image
        with torch.no_grad():
            a = model.eval()(img)["m_ano"]
            b = loaded(img)["m_ano"]
        assert torch.allclose(a, b, atol=1e-6)

    def test_rejects_foreign_file(self, tmp_path):
        torch.save({"weights": 1}, tmp_path / "junk.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "junk.pt")


class TestDeterminism:
    def test_same_seed_same_losses(self, tiny_setup):
        sub, masks = tiny_setup
        cfg = toy_config(augment=True, batch_size=8, seed=7)
        _, log_a = train_segmentation(cfg, sub, masks, epochs=2)
        _, log_b = train_segmentation(cfg, sub, masks, epochs=2)
        tot_a = [r["total"] for r in log_a.records]
        tot_b = [r["total"] for r in log_b.records]
        assert tot_a == pytest.approx(tot_b, rel=1e-6)

    def test_different_seed_differs(self, tiny_setup):
        sub, masks = tiny_setup
        _, log_a = train_segmentation(
            toy_config(augment=False, batch_size=8, seed=1), sub, masks,
            epochs=1)
        _, log_b = train_segmentation(
            toy_config(augment=False, batch_size=8, seed=2), sub, masks,
            epochs=1)
        assert [r["total"] for r in log_a.records] != \
               [r["total"] for r in log_b.records]


class TestGuards:
    def test_missing_weak_mask_is_hard_error(self, tiny_setup):
        sub, masks = tiny_setup
        partial = {k: v for k, v in masks.items()
                   if k != sub.train[0].slice_id}
        with pytest.raises(KeyError):
            train_segmentation(toy_config(), sub, partial, epochs=1)

    def test_nan_loss_aborts_with_dump(self, tiny_setup, tmp_path):
        sub, masks = tiny_setup
        cfg = toy_config(augment=False, batch_size=8)
        model = SegmentationModel(cfg)
        with torch.no_grad():
            model.decoder.point_proj.weight.fill_(float("nan"))
        with pytest.raises(NumericsError):
            train_segmentation(cfg, sub, masks, out_dir=tmp_path, epochs=1,
                               model=model)
        assert list(tmp_path.glob("nan_batch_step*.npz"))

    def test_loss_log_ndjson(self, tiny_setup, tmp_path):
        sub, masks = tiny_setup
        cfg = toy_config(augment=False, batch_size=8)
        log_path = tmp_path / "log.ndjson"
        train_segmentation(cfg, sub, masks, log_path=log_path, epochs=1)
        lines = log_path.read_text().strip().splitlines()
        assert lines
        rec = json.loads(lines[0])
        assert {"step", "epoch", "lr", "total", "L_Dec", "L_PA",
                "L_Struct"} <= set(rec)


class TestInference:
    def test_infer_deterministic(self, tiny_setup):
        sub, _ = tiny_setup
        model = SegmentationModel(toy_config())
        a, _ = infer(model, sub.train[0])
        b, _ = infer(model, sub.train[0])
        np.testing.assert_array_equal(a, b)

    def test_infer_resizes_with_warning(self):
        model = SegmentationModel(toy_config())
        img = np.random.default_rng(0).random((32, 32)).astype(np.float32)
        with pytest.warns(UserWarning):
            prob, pred = infer(model, img)
        assert prob.shape == (64, 64)

    def test_evaluate_report_fields(self, tiny_setup):
        sub, _ = tiny_setup
        model = SegmentationModel(toy_config())
        rep = evaluate(model, sub.test)
        assert rep.slice_count == len(sub.test)
        assert len(rep.per_slice_dice) == len(sub.test)
        assert 0.0 <= rep.mean_dice <= 1.0

    def test_export_masks_files(self, tiny_setup, tmp_path):
        sub, _ = tiny_setup
        model = SegmentationModel(toy_config())
        export_masks(model, sub.test[:2], tmp_path)
        assert len(list(tmp_path.glob("*_prob.png"))) == 2
        assert len(list(tmp_path.glob("*_bin.png"))) == 2
