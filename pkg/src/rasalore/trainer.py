"""Optimization loops, checkpointing and inference."""

from __future__ import annotations

import json
import warnings
import zlib
from pathlib import Path

import cv2
import numpy as np
import torch
from torch.optim import SGD
from torch.optim.lr_scheduler import LambdaLR

from . import losses
from .config import TrainConfig, config_from_dict
from .data import UNHEALTHY, augment
from .ddpt import CLASS_NAMES, DDPTModel, WeakMaskPair, ddpt_loss
from .metrics import EvalReport, auprc, binarize, derive_point_activation, dice
from .model import SegmentationModel

CHECKPOINT_FORMAT = "rasalore-checkpoint"
CHECKPOINT_VERSION = 1


class NumericsError(RuntimeError):
    """Raised when training hits a non-finite loss."""


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 31))


def _slice_rng(seed: int, epoch: int, slice_id: str) -> np.random.Generator:
    return np.random.default_rng((seed, epoch, zlib.crc32(slice_id.encode())))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, cfg: TrainConfig, stage: str, epoch: int):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config_json": cfg.to_json(),
        "model_state": model.state_dict(),
        "epoch": epoch,
        "rng_torch": torch.get_rng_state(),
    }
    torch.save(payload, path)
    return Path(path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognised checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = config_from_dict(json.loads(payload["config_json"]))
    if payload["stage"] == "ddpt":
        model = DDPTModel(cfg)
    else:
        model = SegmentationModel(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, payload


class LossLog:
    """Per-step structured records, optionally mirrored to an NDJSON file."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def append(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# segmentation training


def _prepare_sample(s, pair: WeakMaskPair, cfg: TrainConfig, epoch: int):
    masks = {"ddpt": pair.m_ddpt}
    if pair.m_sam is not None:
        masks["sam"] = pair.m_sam
    if cfg.augment:
        rng = _slice_rng(cfg.seed, epoch, s.slice_id)
        img, masks = augment(s.image, masks, rng)
    else:
        img = s.image
        masks = {k: (np.asarray(m) > 0).astype(np.uint8)
                 for k, m in masks.items()}
    return img, masks


def segmentation_step_losses(model, images, masks_list, grid, cfg: TrainConfig,
                             modality: str, align_targets=None):
    """Forward one batch and return per-term means plus the total."""
    out = model(images, modality=modality, training_noise=True)
    w = cfg.loss
    n = len(masks_list)
    l_dec = l_pa = l_struct = l_align = 0.0
    gamma_sum = 0.0
    for i, masks in enumerate(masks_list):
        terms = losses.decoder_loss(out["m_ano"][i], masks["ddpt"],
                                    masks.get("sam"), w, return_terms=True)
        m_pa = derive_point_activation(masks["ddpt"], grid)
        l_dec = l_dec + terms.total
        gamma_sum += terms.gamma
        l_pa = l_pa + losses.point_activation_loss(out["m_ffn"][i], m_pa, w)
        l_struct = l_struct + losses.structural_loss(out["xi"].xi_espe[i], m_pa)
        if align_targets is not None:
            target = torch.from_numpy(align_targets[i])
            l_align = l_align + ((out["xi"].xi_espe[i] - target) ** 2).sum()
    l_dec, l_pa, l_struct = l_dec / n, l_pa / n, l_struct / n
    multimodal = align_targets is not None
    if multimodal:
        l_align = l_align / n
    total = losses.total_loss(l_dec, l_pa, l_struct,
                              l_align if multimodal else None,
                              lambda_align=w.lambda_align,
                              multimodal=multimodal)
    def scalar(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)

    return {
        "total": total, "L_Dec": scalar(l_dec), "L_PA": scalar(l_pa),
        "L_Struct": scalar(l_struct),
        "L_align": scalar(l_align) if multimodal else None,
        "gamma_mean": gamma_sum / n,
    }


def _dump_batch(out_dir, images, masks_list, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_batch_step{step}.npz"
    arrays = {"images": images.detach().cpu().numpy()}
    for i, masks in enumerate(masks_list):
        for key, m in masks.items():
            arrays[f"{key}_{i}"] = m
    np.savez_compressed(path, **arrays)
    return path


def train_segmentation(cfg: TrainConfig, split, weak_masks: dict,
                       out_dir=None, log_path=None, epochs=None,
                       model: SegmentationModel | None = None,
                       modality: str | None = None):
    """Second-stage training from weak masks. Returns (model, log)."""
    cfg.validate()
    _seed_everything(cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    if model is None:
        model = SegmentationModel(cfg)
    modality = modality or model.default_modality
    for s in split.train:
        if s.slice_id not in weak_masks:
            raise KeyError(f"no weak mask for training slice {s.slice_id}")
    grid = model.registry.codebooks[modality].grid
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    sched = LambdaLR(opt, lambda epoch: 0.5 ** (epoch // cfg.lr_halving_period))
    log = LossLog(log_path)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    order_rng = np.random.default_rng(cfg.seed + 2)
    step = 0
    model.train()
    for epoch in range(epochs):
        idx = order_rng.permutation(len(split.train))
        for start in range(0, len(idx), cfg.batch_size):
            batch = [split.train[i] for i in idx[start:start + cfg.batch_size]]
            prepared = [_prepare_sample(s, weak_masks[s.slice_id], cfg, epoch)
                        for s in batch]
            images = torch.from_numpy(
                np.stack([img for img, _ in prepared])[:, None, :, :])
            masks_list = [m for _, m in prepared]
            stats = segmentation_step_losses(model, images, masks_list, grid,
                                             cfg, modality)
            loss = stats["total"]
            if not torch.isfinite(loss):
                dump = _dump_batch(out_dir, images, masks_list, step)
                raise NumericsError(
                    f"non-finite loss at step {step}"
                    + (f"; offending batch dumped to {dump}" if dump else ""))
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            log.append(step=step, epoch=epoch, lr=opt.param_groups[0]["lr"],
                       total=float(loss.detach()), L_Dec=stats["L_Dec"],
                       L_PA=stats["L_PA"], L_Struct=stats["L_Struct"],
                       L_align=stats["L_align"],
                       gamma_mean=stats["gamma_mean"])
            step += 1
        sched.step()
        if out_dir:
            save_checkpoint(out_dir / "checkpoint.pt", model, cfg,
                            "segmentation", epoch)
    model.eval()
    if out_dir:
        save_checkpoint(out_dir / "checkpoint.pt", model, cfg,
                        "segmentation", epochs - 1)
    return model, log


# ---------------------------------------------------------------------------
# DDPT training


def _label_tensor(batch):
    return torch.tensor([CLASS_NAMES.index(s.slice_label) for s in batch])


def _image_tensor(batch, cfg, rng=None):
    imgs = []
    for s in batch:
        img = s.image
        if rng is not None:
            img, _ = augment(img, {}, rng)
        imgs.append(img)
    return torch.from_numpy(np.stack(imgs)[:, None, :, :])


def train_ddpt(cfg: TrainConfig, split, out_dir=None, log_path=None,
               backbone_epochs=None, prompt_epochs=None):
    """Backbone pretraining followed by frozen-backbone prompt tuning."""
    cfg.validate()
    _seed_everything(cfg.seed + 11)
    labels = {s.slice_label for s in split.train}
    if len(labels) < 2:
        raise ValueError("DDPT training needs both healthy and unhealthy slices")
    backbone_epochs = cfg.ddpt_backbone_epochs if backbone_epochs is None \
        else backbone_epochs
    prompt_epochs = cfg.ddpt_epochs if prompt_epochs is None else prompt_epochs
    model = DDPTModel(cfg)
    log = LossLog(log_path)
    order_rng = np.random.default_rng(cfg.seed + 12)

    def run_phase(phase, epochs, params, loss_fn):
        opt = SGD(params, lr=cfg.ddpt_lr, momentum=cfg.ddpt_momentum,
                  weight_decay=cfg.ddpt_weight_decay)
        step = 0
        for epoch in range(epochs):
            idx = order_rng.permutation(len(split.train))
            for start in range(0, len(idx), cfg.batch_size):
                batch = [split.train[i] for i in idx[start:start + cfg.batch_size]]
                images = _image_tensor(batch, cfg)
                loss = loss_fn(images, _label_tensor(batch))
                if not torch.isfinite(loss):
                    raise NumericsError(f"non-finite {phase} loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.append(phase=phase, step=step, epoch=epoch,
                           loss=float(loss.detach()))
                step += 1

    model.train()
    run_phase("backbone", backbone_epochs,
              [p for p in model.vit.parameters()]
              + [p for p in model.backbone_head.parameters()],
              lambda images, labels: torch.nn.functional.cross_entropy(
                  model.backbone_logits(images), labels))

    model.freeze_backbone()

    def prompt_loss(images, labels):
        main_logits, aux_logits, _ = model(images)
        return ddpt_loss(main_logits, aux_logits, labels, cfg.loss.eta)

    run_phase("prompt", prompt_epochs, list(model.prompt_parameters()),
              prompt_loss)
    model.eval()
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(out_dir) / "checkpoint.pt", model, cfg, "ddpt",
                        backbone_epochs + prompt_epochs - 1)
    return model, log


def ddpt_accuracy(model: DDPTModel, slices) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for s in slices:
            x = torch.from_numpy(s.image[None, None].astype(np.float32))
            pred = int(model(x)[0].argmax())
            correct += pred == CLASS_NAMES.index(s.slice_label)
    return correct / max(len(slices), 1)


# ---------------------------------------------------------------------------
# multimodal training


def _anatomy_key(slice_id: str) -> str:
    return slice_id.rsplit("_", 1)[0]


def train_multimodal(cfg: TrainConfig, splits_by_modality: dict,
                     bridge_model: SegmentationModel, weak_masks: dict,
                     out_dir=None, log_path=None, epochs=None):
    """Joint training of per-modality attention around a shared backbone.

    The bridge model must already be trained on cfg.bridge_modality; its
    noise-free embeddings anchor the alignment loss. Weak masks are shared
    across modalities via the anatomy key (volume + slice index).
    """
    cfg.validate()
    _seed_everything(cfg.seed + 21)
    epochs = cfg.epochs if epochs is None else epochs
    bridge = cfg.bridge_modality
    for m in splits_by_modality:
        if m not in cfg.modalities:
            raise KeyError(f"modality {m!r} has no registered attention block")

    bridge_table = {}
    bridge_model.eval()
    with torch.no_grad():
        for s in splits_by_modality[bridge].train:
            xi = bridge_model.enrich_slice(s.image, modality=bridge)
            bridge_table[_anatomy_key(s.slice_id)] = \
                xi.squeeze(0).numpy().astype(np.float32)

    model = SegmentationModel(cfg)
    # shared components start from the bridge model
    model.refiner.load_state_dict(bridge_model.refiner.state_dict())
    model.encoder.load_state_dict(bridge_model.encoder.state_dict())
    model.decoder.load_state_dict(bridge_model.decoder.state_dict())
    model.point_head.load_state_dict(bridge_model.point_head.state_dict())
    model.registry.rasa[bridge].load_state_dict(
        bridge_model.registry.rasa[bridge].state_dict())

    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    sched = LambdaLR(opt, lambda epoch: 0.5 ** (epoch // cfg.lr_halving_period))
    log = LossLog(log_path)
    order_rng = np.random.default_rng(cfg.seed + 22)
    modalities = list(splits_by_modality)
    step = 0
    model.train()
    for epoch in range(epochs):
        for modality in modalities:
            split = splits_by_modality[modality]
            grid = model.registry.codebooks[modality].grid
            idx = order_rng.permutation(len(split.train))
            for start in range(0, len(idx), cfg.batch_size):
                batch = [split.train[i] for i in idx[start:start + cfg.batch_size]]
                prepared, targets = [], []
                for s in batch:
                    key = _anatomy_key(s.slice_id)
                    if key not in bridge_table:
                        raise KeyError(f"slice {key} missing from bridge table")
                    pair = weak_masks[key]
                    prepared.append(_prepare_sample(s, pair, cfg, epoch))
                    targets.append(bridge_table[key])
                images = torch.from_numpy(
                    np.stack([img for img, _ in prepared])[:, None, :, :])
                masks_list = [m for _, m in prepared]
                stats = segmentation_step_losses(
                    model, images, masks_list, grid, cfg, modality,
                    align_targets=targets)
                loss = stats["total"]
                if not torch.isfinite(loss):
                    raise NumericsError(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(),
                                                   cfg.grad_clip)
                opt.step()
                log.append(step=step, epoch=epoch, modality=modality,
                           lr=opt.param_groups[0]["lr"], total=float(loss.detach()),
                           L_Dec=stats["L_Dec"], L_PA=stats["L_PA"],
                           L_Struct=stats["L_Struct"],
                           L_align=stats["L_align"],
                           gamma_mean=stats["gamma_mean"])
                step += 1
        sched.step()
    model.eval()
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(out_dir) / "checkpoint.pt", model, cfg,
                        "segmentation", epochs - 1)
    return model, log, bridge_table


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(model: SegmentationModel, slice_or_image, threshold: float = 0.5,
          modality: str | None = None):
    """Deterministic forward pass. Returns (probability map, binary mask)."""
    model.eval()
    img = slice_or_image.image if hasattr(slice_or_image, "image") \
        else np.asarray(slice_or_image)
    size = model.cfg.image_size
    if img.shape != (size, size):
        warnings.warn(f"resizing slice {img.shape} to model size {size}")
        img = cv2.resize(img.astype(np.float32), (size, size),
                         interpolation=cv2.INTER_LINEAR)
    with torch.no_grad():
        out = model(img.astype(np.float32), modality=modality,
                    training_noise=False)
    prob = out["m_ano"].squeeze(0).numpy()
    return prob, binarize(prob, threshold)


def evaluate(model: SegmentationModel, slices, threshold: float = 0.5,
             modality: str | None = None) -> EvalReport:
    """Dice per slice vs ground truth plus pixel-pooled AUPRC."""
    report = EvalReport(threshold=threshold, slice_count=len(slices))
    all_scores, all_gt = [], []
    healthy_fp = []
    for s in slices:
        prob, pred = infer(model, s, threshold, modality)
        gt = s.gt_mask if s.gt_mask is not None else np.zeros_like(pred)
        report.per_slice_dice.append(dice(pred, gt))
        report.slice_ids.append(s.slice_id)
        all_scores.append(prob.ravel())
        all_gt.append(gt.ravel())
        if s.slice_label != UNHEALTHY:
            healthy_fp.append(pred.mean())
    report.mean_dice = float(np.mean(report.per_slice_dice)) if slices else 0.0
    report.auprc = auprc(np.concatenate(all_scores), np.concatenate(all_gt)) \
        if slices else None
    report.healthy_fp_area = float(np.mean(healthy_fp)) if healthy_fp else None
    return report


def export_masks(model, slices, out_dir, threshold: float = 0.5,
                 modality: str | None = None):
    """PNG export: `<volume>_<slice>_{prob|bin}.png`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in slices:
        prob, pred = infer(model, s, threshold, modality)
        stem = f"{s.volume_id}_{s.slice_index:04d}"
        cv2.imwrite(str(out / f"{stem}_prob.png"),
                    np.round(prob * 255).astype(np.uint8))
        cv2.imwrite(str(out / f"{stem}_bin.png"), pred * 255)
