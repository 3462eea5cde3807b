"""Command-line surface for batch runs.

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure. Every failure prints a
single machine-parseable line `ERROR:<CODE>: message` to stderr. Each command
writes a run manifest into its output directory before doing any work.
"""

from __future__ import annotations

import datetime
import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import ddpt as ddpt_mod
from . import trainer as trainer_mod
from .config import ConfigError, TrainConfig, load_config
from .nifti import NiftiFormatError

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageFailure(click.ClickException):
    exit_code = EXIT_USAGE


def _fail(code: int, tag: str, message: str):
    click.echo(f"ERROR:{tag}: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, UsageFailure, ValueError) as exc:
            _fail(EXIT_USAGE, "USAGE", str(exc))
        except (NiftiFormatError, FileNotFoundError, KeyError) as exc:
            _fail(EXIT_DATA, "DATA", str(exc))
        except trainer_mod.NumericsError as exc:
            _fail(EXIT_NUMERIC, "NUMERIC", str(exc))
    return wrapper


def _out_root() -> Path:
    return Path(os.environ.get("RASALORE_OUT_ROOT", "."))


def _resolve_out(out, default_name: str, force: bool) -> Path:
    path = Path(out) if out else _out_root() / default_name
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageFailure(
            f"output directory {path} is not empty (use --force to reuse)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_seed(seed):
    if seed is None:
        seed = int.from_bytes(os.urandom(4), "little")
        click.echo(f"sampled seed {seed}")
    return seed


def _dataset_fingerprint(dataset_dir) -> str:
    manifest = Path(dataset_dir) / "manifest.json"
    if not manifest.exists():
        return "unavailable"
    return hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, seed, config_path=None,
                   resolved_config: dict | None = None, dataset=None,
                   **extra) -> Path:
    manifest = {
        "command": command,
        "seed": seed,
        "config_path": str(config_path) if config_path else None,
        "config": resolved_config,
        "dataset": str(dataset) if dataset else None,
        "dataset_fingerprint": _dataset_fingerprint(dataset) if dataset else None,
        "output_dir": str(out_dir),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    manifest.update(extra)
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _load_cfg(config_path, seed=None) -> TrainConfig:
    cfg = load_config(config_path) if config_path else TrainConfig()
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


@click.group()
def main():
    """Weakly supervised anomaly segmentation pipeline."""


@main.command("synth")
@click.option("--n", default=1000, show_default=True, help="Slice count.")
@click.option("--anomaly-rate", default=0.5, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--image-size", default=256, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--force", is_flag=True)
@handle_errors
def cmd_synth(n, anomaly_rate, seed, image_size, out, force):
    """Generate a synthetic slice dataset."""
    if n <= 0:
        raise UsageFailure("--n must be positive")
    if not 0.0 <= anomaly_rate <= 1.0:
        raise UsageFailure("--anomaly-rate must be in [0, 1]")
    seed = _resolve_seed(seed)
    out_dir = _resolve_out(out, "synth_dataset", force)
    write_manifest(out_dir, "synth", seed,
                   n=n, anomaly_rate=anomaly_rate, image_size=image_size)
    split = data_mod.synth_dataset(n, anomaly_rate, seed, image_size)
    data_mod.save_dataset(split, out_dir)
    click.echo(f"wrote {len(split.train)} train / {len(split.test)} test "
               f"slices to {out_dir}")


@main.command("gen-weak-masks")
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice(["simulate", "ddpt", "ingest"]),
              required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--mask-dir", type=click.Path(exists=True), default=None,
              help="Source directory for ingest mode.")
@click.option("--with-sam/--no-sam", default=True, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--force", is_flag=True)
@handle_errors
def cmd_gen_weak_masks(dataset, mode, checkpoint, mask_dir, with_sam, seed,
                       out, force):
    """Produce the weak-mask manifest for second-stage training."""
    if mode == "ddpt" and checkpoint is None:
        raise UsageFailure("--mode ddpt requires --checkpoint")
    if mode == "ingest" and mask_dir is None:
        raise UsageFailure("--mode ingest requires --mask-dir")
    seed = _resolve_seed(seed)
    out_dir = _resolve_out(out, "weak_masks", force)
    write_manifest(out_dir, "gen-weak-masks", seed, dataset=dataset,
                   mode=mode, with_sam=with_sam)
    split = data_mod.load_dataset(dataset)
    slices = split.train + split.test
    if mode == "simulate":
        table = ddpt_mod.simulate_weak_masks(slices, seed, with_sam=with_sam)
    elif mode == "ddpt":
        model, _, payload = trainer_mod.load_checkpoint(checkpoint)
        if payload["stage"] != "ddpt":
            raise UsageFailure(f"{checkpoint} is not a DDPT checkpoint")
        table = ddpt_mod.extract_weak_masks(model, slices)
    else:
        table = ddpt_mod.ingest_weak_masks(mask_dir, slices, with_sam=with_sam)
    manifest = ddpt_mod.save_weak_masks(table, out_dir)
    click.echo(f"wrote weak masks for {len(table)} slices to {manifest}")


@main.command("train")
@click.option("--stage", type=click.Choice(["ddpt", "seg", "multimodal"]),
              required=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--weak-masks", type=click.Path(exists=True), default=None,
              help="Weak-mask manifest JSON (seg/multimodal stages).")
@click.option("--bridge-checkpoint", type=click.Path(exists=True), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--force", is_flag=True)
@handle_errors
def cmd_train(stage, config_path, dataset, weak_masks, bridge_checkpoint,
              epochs, seed, out, force):
    """Train one pipeline stage."""
    cfg = _load_cfg(config_path, seed)
    if stage in ("seg", "multimodal") and weak_masks is None:
        raise UsageFailure(
            f"--stage {stage} requires --weak-masks (manifest of per-slice "
            "weak masks)")
    if stage == "multimodal" and bridge_checkpoint is None:
        raise UsageFailure("--stage multimodal requires --bridge-checkpoint")
    out_dir = _resolve_out(out, f"train_{stage}", force)
    write_manifest(out_dir, f"train:{stage}", cfg.seed, config_path,
                   cfg.to_dict(), dataset, weak_masks=weak_masks)
    split = data_mod.load_dataset(dataset)
    log_path = out_dir / "loss_log.ndjson"
    if stage == "ddpt":
        trainer_mod.train_ddpt(cfg, split, out_dir, log_path, epochs, epochs)
    elif stage == "seg":
        table = ddpt_mod.load_weak_masks(weak_masks)
        trainer_mod.train_segmentation(cfg, split, table, out_dir, log_path,
                                       epochs)
    else:
        bridge_model, bridge_cfg, _ = trainer_mod.load_checkpoint(
            bridge_checkpoint)
        table = {trainer_mod._anatomy_key(k): v
                 for k, v in ddpt_mod.load_weak_masks(weak_masks).items()}
        splits = {m: data_mod.load_dataset(Path(dataset) / m)
                  for m in cfg.modalities}
        trainer_mod.train_multimodal(cfg, splits, bridge_model, table,
                                     out_dir, log_path, epochs)
    _write_loss_csv(log_path, out_dir / "loss_per_epoch.csv")
    click.echo(f"checkpoint written to {out_dir / 'checkpoint.pt'}")


def _write_loss_csv(log_path: Path, csv_path: Path):
    if not log_path.exists():
        return
    per_epoch = {}
    for line in log_path.read_text().splitlines():
        rec = json.loads(line)
        if "total" not in rec:
            continue
        per_epoch.setdefault(rec["epoch"], []).append(rec["total"])
    with open(csv_path, "w") as fh:
        fh.write("epoch,mean_total_loss\n")
        for epoch in sorted(per_epoch):
            fh.write(f"{epoch},{np.mean(per_epoch[epoch]):.6f}\n")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--modality", default=None)
@click.option("--report", type=click.Path(), default=None,
              help="Output directory for the report files.")
@click.option("--save-masks", is_flag=True)
@click.option("--force", is_flag=True)
@handle_errors
def cmd_eval(checkpoint, dataset, threshold, modality, report, save_masks,
             force):
    """Evaluate a checkpoint on a dataset's test split."""
    model, cfg, payload = trainer_mod.load_checkpoint(checkpoint)
    if payload["stage"] != "segmentation":
        raise UsageFailure(f"{checkpoint} is not a segmentation checkpoint")
    split = data_mod.load_dataset(dataset)
    if split.test and split.test[0].image.shape[0] != cfg.image_size:
        raise UsageFailure(
            f"checkpoint expects {cfg.image_size}x{cfg.image_size} slices, "
            f"dataset has {split.test[0].image.shape}")
    out_dir = _resolve_out(report, "eval_report", force)
    write_manifest(out_dir, "eval", cfg.seed, dataset=dataset,
                   checkpoint=str(checkpoint), threshold=threshold)
    result = trainer_mod.evaluate(model, split.test, threshold, modality)
    result.save(out_dir / "report.json", out_dir / "per_slice_dice.csv")
    if save_masks:
        trainer_mod.export_masks(model, split.test, out_dir / "masks",
                                 threshold, modality)
    auprc_txt = "n/a" if result.auprc is None else f"{result.auprc:.4f}"
    click.echo(f"mean Dice {result.mean_dice:.4f}  AUPRC {auprc_txt}  "
               f"({result.slice_count} slices)")


if __name__ == "__main__":
    main()
