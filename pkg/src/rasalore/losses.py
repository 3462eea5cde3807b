"""Training objectives.

All functions take 2-D (H, W) tensors per slice (or (k, d) embeddings) and
return scalars. Supervision masks are binary constants; only predictions
carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .config import LossWeights
from .metrics import dice

_TINY = 1e-12


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    return x


def _check_mask_pair(pred: torch.Tensor, gt: torch.Tensor):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    for name, m in (("pred", pred), ("gt", gt)):
        lo, hi = float(m.detach().min()), float(m.detach().max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"{name} values outside [0,1]: [{lo}, {hi}]")


def eldice(pred, gt, eps: float = 1e-5, phi: float = 0.3) -> torch.Tensor:
    """Exponential-logarithmic Dice: (-ln((2I+eps)/(U+eps)))^phi.

    I, U are soft counts; the ratio is clamped to (0, 1] so the loss is
    always nonnegative and exactly 0 at perfect overlap.
    """
    pred, gt = _to_tensor(pred), _to_tensor(gt)
    _check_mask_pair(pred, gt)
    inter = (pred * gt).sum()
    union = pred.sum() + gt.sum()
    ratio = ((2.0 * inter + eps) / (union + eps)).clamp(_TINY, 1.0)
    neg_log = -torch.log(ratio)
    # 0^phi has an unbounded derivative; select the exact-zero branch safely
    safe = neg_log.clamp_min(_TINY)
    return torch.where(neg_log > _TINY, safe ** phi, neg_log * 0.0)


def _blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(mask.astype(np.float64), sigma=sigma, mode="reflect")


def gaussian_weight(mask, sigma: float) -> torch.Tensor:
    """Center-heavy soft weights on the support of a binary mask.

    Blur the mask, keep values only on the support, renormalize so the
    support maximum is 1. Empty mask -> all zeros.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = np.asarray(_to_tensor(mask).detach().cpu().numpy() > 0.5, dtype=np.float64)
    if m.sum() == 0:
        return torch.zeros(m.shape, dtype=torch.float32)
    blurred = _blur(m, sigma) * m
    return torch.from_numpy((blurred / blurred.max()).astype(np.float32))


def inverse_gaussian_weight(mask, sigma: float) -> torch.Tensor:
    """Boundary-heavy complement of gaussian_weight inside the support."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = np.asarray(_to_tensor(mask).detach().cpu().numpy() > 0.5, dtype=np.float64)
    if m.sum() == 0:
        return torch.zeros(m.shape, dtype=torch.float32)
    blurred = _blur(m, sigma) * m
    inv = m * (1.0 - blurred / blurred.max())
    peak = inv.max()
    if peak <= 0:   # single-pixel support: no boundary ring to weight
        return torch.zeros(m.shape, dtype=torch.float32)
    return torch.from_numpy((inv / peak).astype(np.float32))


def _require_binary(mask: torch.Tensor, name: str):
    bad = ((mask != 0) & (mask != 1)).any()
    if bool(bad):
        raise ValueError(f"{name} must be binary")


@dataclass
class DecoderLossTerms:
    total: torch.Tensor
    center: torch.Tensor       # ELDice vs center-weighted weak mask
    boundary: torch.Tensor     # gamma-gated ELDice vs boundary-weighted mask
    false_positive: torch.Tensor
    true_negative: torch.Tensor
    gamma: float


def decoder_loss(m_ano, m_ddpt, m_sam=None, weights: LossWeights | None = None,
                 return_terms: bool = False):
    """Four-term decoder objective.

    ELDice(M_ANO, G(M_DDPT)) + gamma * ELDice(M_ANO, Ginv(M_SAM))
    + (alpha/p) * sum(M_ANO * (1 - M_DDPT))
    + beta * ELDice((1-M_ANO)*(1-M_DDPT), G(1-M_DDPT)),
    gamma = Dice(M_SAM, M_DDPT), no gradient. The gamma term is dropped
    entirely when no boundary mask is supplied.
    """
    w = weights or LossWeights()
    m_ano, m_ddpt = _to_tensor(m_ano), _to_tensor(m_ddpt)
    _check_mask_pair(m_ano, m_ddpt)
    _require_binary(m_ddpt, "m_ddpt")
    p = m_ano.numel()

    center = eldice(m_ano, gaussian_weight(m_ddpt, w.sigma).to(m_ano.dtype),
                    w.eps, w.phi)
    if m_sam is not None:
        m_sam = _to_tensor(m_sam)
        _require_binary(m_sam, "m_sam")
        gamma = dice(m_sam.detach().cpu().numpy() > 0.5,
                     m_ddpt.detach().cpu().numpy() > 0.5)
        boundary = gamma * eldice(
            m_ano, inverse_gaussian_weight(m_sam, w.sigma).to(m_ano.dtype),
            w.eps, w.phi)
    else:
        gamma = 0.0
        boundary = m_ano.sum() * 0.0
    false_positive = (w.alpha / p) * (m_ano * (1.0 - m_ddpt)).sum()
    true_negative = w.beta * eldice(
        (1.0 - m_ano) * (1.0 - m_ddpt),
        gaussian_weight(1.0 - m_ddpt, w.sigma).to(m_ano.dtype), w.eps, w.phi)
    total = center + boundary + false_positive + true_negative
    if return_terms:
        return DecoderLossTerms(total=total, center=center, boundary=boundary,
                                false_positive=false_positive,
                                true_negative=true_negative, gamma=float(gamma))
    return total


def point_activation_loss(m_ffn, m_pa, weights: LossWeights | None = None
                          ) -> torch.Tensor:
    """ELDice between the point head output and the point activation mask."""
    w = weights or LossWeights()
    m_ffn, m_pa = _to_tensor(m_ffn), _to_tensor(m_pa)
    if m_ffn.shape != m_pa.shape:
        raise ValueError(f"shape mismatch {tuple(m_ffn.shape)} vs {tuple(m_pa.shape)}")
    return eldice(m_ffn, m_pa.to(m_ffn.dtype), w.eps, w.phi)


def structural_loss(xi, m_pa) -> torch.Tensor:
    """Push active-point embedding rows to +1 and inactive rows to -1.

    xi: (k, d); m_pa: binary mask with k cells. Each MSE averages over its
    own set's elements; an empty set contributes 0.
    """
    xi = _to_tensor(xi)
    active = _to_tensor(m_pa).reshape(-1) > 0.5
    if active.numel() != xi.shape[0]:
        raise ValueError("point activation mask does not match embedding rows")
    loss = xi.sum() * 0.0
    if bool(active.any()):
        loss = loss + ((xi[active] - 1.0) ** 2).mean()
    if bool((~active).any()):
        loss = loss + ((xi[~active] + 1.0) ** 2).mean()
    return loss


def alignment_loss(xi_by_modality: dict, xi_bridge) -> torch.Tensor:
    """Sum of squared L2 distances from each modality's embeddings to the
    frozen bridge embeddings."""
    xi_bridge = _to_tensor(xi_bridge)
    total = None
    for modality, xi in xi_by_modality.items():
        xi = _to_tensor(xi)
        if xi.shape != xi_bridge.shape:
            raise ValueError(f"modality {modality!r} embedding shape "
                             f"{tuple(xi.shape)} != bridge {tuple(xi_bridge.shape)}")
        term = ((xi - xi_bridge) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return xi_bridge.sum() * 0.0
    return total


def total_loss(l_dec, l_pa, l_struct, l_align=None, lambda_align: float = 0.1,
               multimodal: bool = False) -> torch.Tensor:
    """Unweighted sum of the three terms, plus weighted alignment when
    training the multimodal variant."""
    total = l_dec + l_pa + l_struct
    if multimodal and l_align is not None:
        total = total + lambda_align * l_align
    return total
