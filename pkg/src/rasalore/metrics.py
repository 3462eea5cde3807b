"""Evaluation metrics and supervision-mask derivation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .lore import CandidatePromptGrid


def _as_bool(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if hasattr(mask, "detach"):
        arr = mask.detach().cpu().numpy()
    return arr > 0.5


def dice(pred, gt) -> float:
    """2|P&G| / (|P|+|G|); both-empty pairs score 1 so healthy slices with
    empty predictions are perfect."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Strict > rule: a value of exactly `threshold` stays background."""
    arr = np.asarray(mask)
    if hasattr(mask, "detach"):
        arr = mask.detach().cpu().numpy()
    return (arr > threshold).astype(np.uint8)


def auprc(scores, gt) -> float | None:
    """Area under the precision-recall curve, threshold sweep over all
    distinct scores with trapezoidal integration over recall.

    Scores and gt are pooled over whatever set the caller evaluates.
    Returns None when gt has no positives (undefined).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = _as_bool(gt).ravel()
    if s.shape != g.shape:
        raise ValueError("scores and gt must have the same number of elements")
    n_pos = int(g.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    g_sorted = g[order].astype(np.int64)
    tp = np.cumsum(g_sorted)
    fp = np.cumsum(1 - g_sorted)
    # keep only the last index of each tied score block
    last = np.nonzero(np.diff(s_sorted))[0]
    idx = np.concatenate([last, [len(s_sorted) - 1]])
    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / n_pos
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    return float(np.trapezoid(precision, recall))


def derive_point_activation(m_ddpt, grid: CandidatePromptGrid) -> np.ndarray:
    """Binary sqrt(k) x sqrt(k) mask: a cell is active iff the weak mask has
    any positive pixel inside that cell (max-pool rule)."""
    m = _as_bool(m_ddpt)
    h, w = grid.image_size
    if m.shape != (h, w):
        raise ValueError(f"mask shape {m.shape} does not match grid image "
                         f"size {(h, w)}")
    side = grid.side
    ch, cw = h // side, w // side
    blocks = m.reshape(side, ch, side, cw)
    return blocks.any(axis=(1, 3)).astype(np.uint8)


@dataclass
class EvalReport:
    per_slice_dice: list = field(default_factory=list)
    mean_dice: float = 0.0
    auprc: float | None = None
    threshold: float = 0.5
    slice_count: int = 0
    healthy_fp_area: float | None = None   # mean predicted-positive fraction
    slice_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_dice": self.mean_dice,
            "auprc": self.auprc,
            "threshold": self.threshold,
            "slice_count": self.slice_count,
            "healthy_fp_area": self.healthy_fp_area,
            "per_slice_dice": self.per_slice_dice,
            "slice_ids": self.slice_ids,
        }

    def save(self, report_path, csv_path=None):
        with open(report_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["slice_id", "dice"])
                for sid, d in zip(self.slice_ids, self.per_slice_dice):
                    writer.writerow([sid, f"{d:.6f}"])
