"""Data ingestion, preprocessing, augmentation and the synthetic generator.

The synthetic slices are desk-scale stand-ins for real T2 volumes: a textured
brain-shaped background with optional bright blobby lesions whose exact masks
double as evaluation ground truth.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .nifti import NiftiVolume, read_nifti

HEALTHY = "healthy"
UNHEALTHY = "unhealthy"


@dataclass
class Slice2D:
    image: np.ndarray                 # (H, W) float32 in [0, 1]
    slice_label: str                  # healthy | unhealthy
    modality: str = "T2"
    volume_id: str = "vol000"
    slice_index: int = 0
    gt_mask: np.ndarray | None = None

    @property
    def slice_id(self) -> str:
        return f"{self.volume_id}_{self.slice_index:04d}_{self.modality}"

    def validate(self):
        if self.gt_mask is not None:
            nonempty = bool(self.gt_mask.any())
            expected = UNHEALTHY if nonempty else HEALTHY
            if self.slice_label != expected:
                raise ValueError(
                    f"{self.slice_id}: label {self.slice_label!r} inconsistent "
                    f"with ground-truth mask")


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    split_unit: str = "volume"

    def volume_ids(self, part) -> set:
        return {s.volume_id for s in part}


def load_volume(path, label_path=None):
    """Read a NIfTI volume (plus optional label volume of the same shape)."""
    vol = read_nifti(path)
    data = vol.data
    if data.ndim > 3:
        data = data[..., 0]
    labels = None
    if label_path is not None:
        lab = read_nifti(label_path)
        ldata = lab.data
        if ldata.ndim > 3:
            ldata = ldata[..., 0]
        if ldata.shape != data.shape:
            raise ValueError(
                f"label volume {label_path} shape {ldata.shape} does not match "
                f"image volume shape {data.shape}")
        labels = ldata
    return data, labels, vol.affine


def _crop_box(img: np.ndarray, rel_threshold: float = 0.02, pad: int = 4):
    peak = img.max()
    if peak <= 0:
        return 0, img.shape[0], 0, img.shape[1]
    rows = np.nonzero((img > rel_threshold * peak).any(axis=1))[0]
    cols = np.nonzero((img > rel_threshold * peak).any(axis=0))[0]
    if rows.size == 0 or cols.size == 0:
        return 0, img.shape[0], 0, img.shape[1]
    r0 = max(int(rows[0]) - pad, 0)
    r1 = min(int(rows[-1]) + 1 + pad, img.shape[0])
    c0 = max(int(cols[0]) - pad, 0)
    c1 = min(int(cols[-1]) + 1 + pad, img.shape[1])
    return r0, r1, c0, c1


def preprocess_slice(img: np.ndarray, image_size: int = 256,
                     mask: np.ndarray | None = None):
    """Crop away dark borders, resize, min-max normalize to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    r0, r1, c0, c1 = _crop_box(img)
    img = img[r0:r1, c0:c1]
    out = cv2.resize(img, (image_size, image_size), interpolation=cv2.INTER_LINEAR)
    lo, hi = out.min(), out.max()
    if hi > lo:
        out = (out - lo) / (hi - lo)
    else:
        out = np.zeros_like(out)
    out_mask = None
    if mask is not None:
        m = (np.asarray(mask)[r0:r1, c0:c1] > 0).astype(np.uint8)
        out_mask = cv2.resize(m, (image_size, image_size),
                              interpolation=cv2.INTER_NEAREST)
    return out.astype(np.float32), out_mask


def extract_slices(volume, labels=None, skip: int = 15, image_size: int = 256,
                   volume_id: str = "vol000", modality: str = "T2") -> list:
    """Axial slices skip .. D-skip-1, cropped, resized, normalized."""
    depth = volume.shape[2]
    if depth <= 2 * skip:
        warnings.warn(f"{volume_id}: depth {depth} leaves no slices after "
                      f"skipping {skip} frames at each end")
        return []
    slices = []
    for z in range(skip, depth - skip):
        plane = volume[:, :, z]
        mask_plane = labels[:, :, z] if labels is not None else None
        img, mask = preprocess_slice(plane, image_size, mask_plane)
        label = HEALTHY
        if mask is not None and mask.any():
            label = UNHEALTHY
        slices.append(Slice2D(image=img, slice_label=label, modality=modality,
                              volume_id=volume_id, slice_index=z, gt_mask=mask))
    return slices


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, masks: dict, rng: np.random.Generator,
            apply_gamma: bool = True):
    """Paper-style training augmentation.

    Gamma correction (square + renormalize) always; then a random rotation in
    [-90, 90] degrees and random h/v flips applied jointly to the image and
    every mask; brightness/contrast factor in [0.8, 1.2] and Gaussian noise
    N(0, 10) in 0-255 units, image only.
    """
    img = np.asarray(image, dtype=np.float32)
    out_masks = {k: (np.asarray(m) > 0).astype(np.uint8)
                 for k, m in masks.items() if m is not None}
    if apply_gamma:
        img = img * img
        peak = img.max()
        if peak > 0:
            img = img / peak

    angle = float(rng.uniform(-90.0, 90.0))
    h, w = img.shape
    rot = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, 1.0)
    img = cv2.warpAffine(img, rot, (w, h), flags=cv2.INTER_LINEAR)
    out_masks = {k: cv2.warpAffine(m, rot, (w, h), flags=cv2.INTER_NEAREST)
                 for k, m in out_masks.items()}
    if rng.random() < 0.5:
        img = img[:, ::-1]
        out_masks = {k: m[:, ::-1] for k, m in out_masks.items()}
    if rng.random() < 0.5:
        img = img[::-1, :]
        out_masks = {k: m[::-1, :] for k, m in out_masks.items()}

    factor = float(rng.uniform(0.8, 1.2))
    img = img * factor
    noise = rng.normal(0.0, np.sqrt(10.0), size=img.shape) / 255.0
    img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)
    out_masks = {k: np.ascontiguousarray(m) for k, m in out_masks.items()}
    return np.ascontiguousarray(img), out_masks


# ---------------------------------------------------------------------------
# synthetic data

_MODALITY_STYLE = {
    # (background level, background texture amp, lesion level, lesion contrast)
    "T2": (0.30, 0.12, 0.88, 0.08),
    "T1": (0.45, 0.10, 0.78, 0.08),
    "T1ce": (0.40, 0.10, 0.82, 0.08),
    "FLAIR": (0.35, 0.12, 0.85, 0.08),
}


def _smooth_noise(rng, size, sigma):
    n = gaussian_filter(rng.standard_normal((size, size)), sigma)
    n = n / (np.abs(n).max() + 1e-9)
    return n


def _brain_background(rng, size, level, amp):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.02, 0.02) * size
    cx = size / 2 + rng.uniform(-0.02, 0.02) * size
    ry = size * rng.uniform(0.36, 0.44)
    rx = size * rng.uniform(0.32, 0.40)
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    tex = _smooth_noise(rng, size, sigma=size / 16.0)
    img = np.where(inside, level + amp * tex, 0.0)
    return np.clip(img, 0.0, 1.0), inside, (cy, cx, ry, rx)


def _blob_mask(rng, size, center, radius):
    """Ellipse with a low-frequency radial perturbation (blobby boundary)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    theta = np.arctan2(yy - cy, xx - cx)
    n_lobes = rng.integers(3, 6)
    phase = rng.uniform(0, 2 * np.pi)
    wobble = 1.0 + 0.25 * np.sin(n_lobes * theta + phase)
    aspect = rng.uniform(0.7, 1.3)
    rr = np.sqrt(((yy - cy) * aspect) ** 2 + ((xx - cx) / aspect) ** 2)
    return rr <= radius * wobble


def make_synthetic_slice(rng: np.random.Generator, image_size: int = 256,
                         anomalous: bool = True, modality: str = "T2",
                         geometry=None):
    """One synthetic slice; pass `geometry` to re-render the same anatomy in
    another modality."""
    level, amp, lesion_level, lesion_amp = _MODALITY_STYLE.get(
        modality, _MODALITY_STYLE["T2"])
    if geometry is None:
        geometry = {"bg_seed": int(rng.integers(0, 2 ** 31)),
                    "blobs": []}
        bg_rng = np.random.default_rng(geometry["bg_seed"])
        img, inside, ellipse = _brain_background(bg_rng, image_size, level, amp)
        if anomalous:
            cy, cx, ry, rx = ellipse
            n_blobs = int(rng.integers(1, 3))
            for _ in range(n_blobs):
                radius = float(rng.uniform(8.0, 40.0) * image_size / 256.0)
                radius = max(radius, 2.0)
                ang = rng.uniform(0, 2 * np.pi)
                rad = rng.uniform(0.1, 0.55)
                geometry["blobs"].append({
                    "center": (float(cy + rad * ry * np.sin(ang)),
                               float(cx + rad * rx * np.cos(ang))),
                    "radius": radius,
                    "seed": int(rng.integers(0, 2 ** 31)),
                })
    else:
        bg_rng = np.random.default_rng(geometry["bg_seed"])
        img, inside, _ = _brain_background(bg_rng, image_size, level, amp)

    gt = np.zeros((image_size, image_size), dtype=np.uint8)
    for blob in geometry["blobs"]:
        blob_rng = np.random.default_rng(blob["seed"])
        mask = _blob_mask(blob_rng, image_size, blob["center"], blob["radius"])
        mask &= inside
        gt |= mask.astype(np.uint8)
    if gt.any():
        tex = _smooth_noise(np.random.default_rng(geometry["bg_seed"] + 1),
                            image_size, sigma=image_size / 32.0)
        img = np.where(gt > 0, lesion_level + lesion_amp * tex, img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, gt, geometry


def synth_dataset(n_slices: int = 1000, anomaly_rate: float = 0.5,
                  seed: int = 0, image_size: int = 256,
                  modality: str = "T2", slices_per_volume: int = 25,
                  train_fraction: float = 0.8) -> DatasetSplit:
    """Deterministic synthetic dataset, grouped into volumes and split
    volume-wise 80/20."""
    if n_slices < 8:
        raise ValueError("need at least 8 slices")
    rng = np.random.default_rng(seed)
    slices = []
    for i in range(n_slices):
        vol = i // slices_per_volume
        anomalous = bool(rng.random() < anomaly_rate)
        img, gt, _ = make_synthetic_slice(rng, image_size, anomalous, modality)
        label = UNHEALTHY if gt.any() else HEALTHY
        s = Slice2D(image=img, slice_label=label, modality=modality,
                    volume_id=f"vol{vol:03d}", slice_index=i % slices_per_volume,
                    gt_mask=gt)
        s.validate()
        slices.append(s)
    return split_by_volume(slices, train_fraction, seed)


def synth_multimodal_dataset(n_slices: int, anomaly_rate: float, seed: int,
                             modalities=("T2", "T1"), image_size: int = 256,
                             slices_per_volume: int = 25,
                             train_fraction: float = 0.8) -> dict:
    """Correlated per-modality renderings of the same anatomy.

    Returns {modality: DatasetSplit}; matching slices share volume id and
    slice index (slice ids differ only by the modality suffix).
    """
    rng = np.random.default_rng(seed)
    per_mod = {m: [] for m in modalities}
    for i in range(n_slices):
        vol = i // slices_per_volume
        anomalous = bool(rng.random() < anomaly_rate)
        geometry = None
        for m in modalities:
            img, gt, geometry = make_synthetic_slice(
                rng, image_size, anomalous, m, geometry=geometry)
            label = UNHEALTHY if gt.any() else HEALTHY
            per_mod[m].append(Slice2D(
                image=img, slice_label=label, modality=m,
                volume_id=f"vol{vol:03d}", slice_index=i % slices_per_volume,
                gt_mask=gt))
    return {m: split_by_volume(sl, train_fraction, seed)
            for m, sl in per_mod.items()}


def split_by_volume(slices, train_fraction: float = 0.8,
                    seed: int = 0) -> DatasetSplit:
    vols = sorted({s.volume_id for s in slices})
    rng = np.random.default_rng(seed + 1)
    rng.shuffle(vols)
    n_train = max(int(round(len(vols) * train_fraction)), 1)
    if n_train == len(vols) and len(vols) > 1:
        n_train -= 1
    train_vols = set(vols[:n_train])
    split = DatasetSplit()
    for s in slices:
        (split.train if s.volume_id in train_vols else split.test).append(s)
    return split


# ---------------------------------------------------------------------------
# dataset persistence (PNG slices + manifest)


def save_dataset(split: DatasetSplit, out_dir, manifest_name="manifest.json"):
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    entries = []
    for part, slices in (("train", split.train), ("test", split.test)):
        for s in slices:
            img_rel = f"slices/{s.slice_id}.png"
            cv2.imwrite(str(out / img_rel),
                        np.round(s.image * 255).astype(np.uint8))
            gt_rel = None
            if s.gt_mask is not None:
                gt_rel = f"slices/{s.slice_id}_gt.png"
                cv2.imwrite(str(out / gt_rel),
                            (s.gt_mask > 0).astype(np.uint8) * 255)
            entries.append({
                "slice_id": s.slice_id, "part": part, "label": s.slice_label,
                "modality": s.modality, "volume_id": s.volume_id,
                "slice_index": s.slice_index, "image": img_rel, "gt": gt_rel,
            })
    manifest = {"split_unit": split.split_unit, "slices": entries}
    with open(out / manifest_name, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out / manifest_name


def load_dataset(dataset_dir, manifest_name="manifest.json") -> DatasetSplit:
    root = Path(dataset_dir)
    with open(root / manifest_name) as fh:
        manifest = json.load(fh)
    split = DatasetSplit(split_unit=manifest.get("split_unit", "volume"))
    for e in manifest["slices"]:
        img = cv2.imread(str(root / e["image"]), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise FileNotFoundError(f"missing slice image {e['image']}")
        gt = None
        if e.get("gt"):
            gt_img = cv2.imread(str(root / e["gt"]), cv2.IMREAD_GRAYSCALE)
            if gt_img is None:
                raise FileNotFoundError(f"missing mask image {e['gt']}")
            gt = (gt_img > 127).astype(np.uint8)
        s = Slice2D(image=(img.astype(np.float32) / 255.0),
                    slice_label=e["label"], modality=e["modality"],
                    volume_id=e["volume_id"], slice_index=e["slice_index"],
                    gt_mask=gt)
        (split.train if e["part"] == "train" else split.test).append(s)
    return split
