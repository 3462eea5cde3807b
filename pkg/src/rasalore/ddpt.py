"""Discriminative dual prompt tuning at desk scale.

A tiny vision transformer trained from scratch stands in for a pretrained
vision-language backbone: it is first trained on the slice-label task, then
frozen while the text/visual prompts and their attention bridge are tuned.
The module also hosts the weak-mask simulators and the PNG ingestion path
that substitute for external pretrained mask generators.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .config import ConfigError, TrainConfig

CLASS_NAMES = ("healthy", "unhealthy")


# ---------------------------------------------------------------------------
# prompts and text side


class PromptTemplate(nn.Module):
    """[V]_1 .. [V]_{M/2}, [CLASS], [V]_{M/2+1} .. [V]_M with shared
    learnable tokens and fixed class-token embeddings."""

    def __init__(self, length: int, text_dim: int,
                 class_names=CLASS_NAMES, seed: int = 0):
        super().__init__()
        if length % 2:
            raise ConfigError(f"prompt length {length} must be even")
        self.length = length
        self.class_names = tuple(class_names)
        gen = torch.Generator().manual_seed(seed)
        self.learnable_tokens = nn.Parameter(
            0.02 * torch.randn(length, text_dim, generator=gen))
        class_emb = torch.randn(len(self.class_names), text_dim, generator=gen)
        self.register_buffer("class_embeddings", class_emb)

    @property
    def class_position(self) -> int:
        return self.length // 2

    def class_index(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise KeyError(f"unknown class {class_name!r}") from None


def assemble_prompt(template: PromptTemplate, class_name: str) -> torch.Tensor:
    """(M+1, d_text) sequence with the class token inserted mid-prompt."""
    idx = template.class_index(class_name)
    half = template.class_position
    return torch.cat([
        template.learnable_tokens[:half],
        template.class_embeddings[idx:idx + 1],
        template.learnable_tokens[half:],
    ], dim=0)


class TextEncoder(nn.Module):
    """Small frozen transformer over prompt sequences; mean-pooled output."""

    def __init__(self, text_dim: int, out_dim: int, depth: int = 2,
                 num_heads: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed + 17)
        layer = nn.TransformerEncoderLayer(
            d_model=text_dim, nhead=num_heads, dim_feedforward=2 * text_dim,
            batch_first=True, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth)
        self.proj = nn.Linear(text_dim, out_dim)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out = self.encoder(tokens.unsqueeze(0)).mean(dim=1)
        return self.proj(out).squeeze(0)


# ---------------------------------------------------------------------------
# vision side


class ViTBlock(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        dim = cfg.ddpt_vit_dim
        patch = cfg.ddpt_patch_size
        if cfg.image_size % patch:
            raise ConfigError("image_size must be divisible by the patch size")
        self.grid = cfg.image_size // patch
        self.patch_embed = nn.Conv2d(1, dim, patch, stride=patch)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(self.grid ** 2, dim))
        self.blocks = nn.ModuleList(
            [ViTBlock(dim, 4) for _ in range(cfg.ddpt_vit_depth)])
        self.norm = nn.LayerNorm(dim)

    def embed_patches(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        return tokens + self.pos_embed


class CAVPT(nn.Module):
    """Class-aware visual prompt refinement.

    Visual prompts query the concatenation of (projected) text embeddings and
    patch tokens; an embedded classifier maps each refined prompt to class
    logits.
    """

    def __init__(self, vit_dim: int, shared_dim: int, n_classes: int):
        super().__init__()
        self.text_to_vision = nn.Linear(shared_dim, vit_dim)
        self.attn = nn.MultiheadAttention(vit_dim, 4, batch_first=True)
        self.classifier = nn.Linear(vit_dim, n_classes)

    def forward(self, visual_prompts, text_embs, patch_tokens):
        """visual_prompts: (B, P, dv); text_embs: (C, shared);
        patch_tokens: (B, n, dv) -> refined (B, P, dv), aux logits (B, P, C)."""
        b = patch_tokens.shape[0]
        text = self.text_to_vision(text_embs).unsqueeze(0).expand(b, -1, -1)
        context = torch.cat([text, patch_tokens], dim=1)
        out, _ = self.attn(visual_prompts, context, context, need_weights=False)
        refined = visual_prompts + out
        return refined, self.classifier(refined)


def cavpt_refine(cavpt: CAVPT, visual_prompts, text_embs, patch_tokens):
    return cavpt(visual_prompts, text_embs, patch_tokens)


# ---------------------------------------------------------------------------
# classification


def classify(image_emb: torch.Tensor, text_embs: torch.Tensor,
             tau: float = 0.07) -> torch.Tensor:
    """Cosine-similarity softmax over classes.

    image_emb: (dim,) or (B, dim); text_embs: (C, dim). Returns (C,) or
    (B, C) probabilities summing to 1.
    """
    single = image_emb.dim() == 1
    f = image_emb.unsqueeze(0) if single else image_emb
    if float(text_embs.detach().norm(dim=-1).min()) < 1e-12 or \
            float(f.norm(dim=-1).min()) < 1e-12:
        raise ValueError("zero-norm embedding in cosine classifier")
    logits = cosine_logits(f, text_embs, tau)
    probs = torch.softmax(logits, dim=-1)
    return probs.squeeze(0) if single else probs


def cosine_logits(f: torch.Tensor, text_embs: torch.Tensor,
                  tau: float) -> torch.Tensor:
    fn = F.normalize(f, dim=-1)
    tn = F.normalize(text_embs, dim=-1)
    return fn @ tn.T / tau


def ddpt_loss(main_logits: torch.Tensor, aux_logits: torch.Tensor | None,
              labels: torch.Tensor, eta: float = 0.3) -> torch.Tensor:
    """CE(main) + eta * CE(aux restricted to the ground-truth-class query)."""
    labels = torch.as_tensor(labels)
    if labels.dim() == 0:
        labels = labels.unsqueeze(0)
        main_logits = main_logits.reshape(1, -1)
        if aux_logits is not None:
            aux_logits = aux_logits.reshape(1, *aux_logits.shape[-2:])
    n_classes = main_logits.shape[-1]
    if int(labels.min()) < 0 or int(labels.max()) >= n_classes:
        raise ValueError("labels outside the class range")
    loss = F.cross_entropy(main_logits, labels)
    if aux_logits is not None and eta > 0:
        gt_queries = aux_logits[torch.arange(len(labels)), labels]
        loss = loss + eta * F.cross_entropy(gt_queries, labels)
    return loss


# ---------------------------------------------------------------------------
# full model


class DDPTModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.ddpt_vit_dim
        shared = cfg.ddpt_shared_dim
        n_classes = len(CLASS_NAMES)
        self.vit = TinyViT(cfg)
        self.backbone_head = nn.Linear(2 * dim, n_classes)  # phase-1 only
        self.template = PromptTemplate(cfg.prompt_length, cfg.ddpt_text_dim,
                                       seed=cfg.seed)
        self.text_encoder = TextEncoder(cfg.ddpt_text_dim, shared,
                                        seed=cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed + 5)
        self.visual_prompts = nn.Parameter(
            0.02 * torch.randn(n_classes, dim, generator=gen))
        self.cavpt = CAVPT(dim, shared, n_classes)
        self.vision_proj = nn.Linear(dim, shared)
        self.tau = cfg.tau

    @property
    def n_prompts(self) -> int:
        return self.visual_prompts.shape[0]

    def text_embeddings(self) -> torch.Tensor:
        return torch.stack(
            [self.text_encoder(assemble_prompt(self.template, c))
             for c in CLASS_NAMES])

    def backbone_logits(self, images: torch.Tensor) -> torch.Tensor:
        """Phase-1 classifier: plain ViT + linear head, no prompts."""
        tokens = self.vit.embed_patches(images)
        for block in self.vit.blocks:
            tokens = block(tokens)
        tokens = self.vit.norm(tokens)
        # anomalies are local: plain mean pooling drowns the handful of
        # lesion tokens, so the head sees mean and max together
        f = torch.cat([tokens.mean(dim=1), tokens.amax(dim=1)], dim=-1)
        return self.backbone_head(f)

    def forward(self, images: torch.Tensor):
        """Returns main logits (B, C), aux logits (B, P, C) and per-patch
        embeddings in the shared space (B, n, shared)."""
        b = images.shape[0]
        patches = self.vit.embed_patches(images)
        tokens = torch.cat(
            [self.visual_prompts.unsqueeze(0).expand(b, -1, -1), patches], dim=1)
        p = self.n_prompts
        text_embs = self.text_embeddings()
        aux_logits = None
        for i, block in enumerate(self.vit.blocks):
            tokens = block(tokens)
            if i == len(self.vit.blocks) - 1:
                refined, aux_logits = self.cavpt(
                    tokens[:, :p], text_embs, tokens[:, p:])
                tokens = torch.cat([refined, tokens[:, p:]], dim=1)
        tokens = self.vit.norm(tokens)
        patch_embs = self.vision_proj(tokens[:, p:])
        f = patch_embs.mean(dim=1) + patch_embs.amax(dim=1)
        main_logits = cosine_logits(f, text_embs, self.tau)
        return main_logits, aux_logits, patch_embs

    def freeze_backbone(self):
        for p in self.vit.parameters():
            p.requires_grad_(False)
        for p in self.backbone_head.parameters():
            p.requires_grad_(False)

    def prompt_parameters(self):
        yield self.template.learnable_tokens
        yield self.visual_prompts
        yield from self.cavpt.parameters()
        yield from self.vision_proj.parameters()


def extract_pseudo_mask(model: DDPTModel, image, threshold: float = 0.5
                        ) -> np.ndarray:
    """Binary H x W pseudo-mask from patch-to-unhealthy-text similarity.

    A slice classified healthy yields an empty mask; so does a degenerate
    score map (all patches equal), with a warning.
    """
    model.eval()
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    x = image.reshape(1, 1, *image.shape[-2:])
    size = x.shape[-1]
    with torch.no_grad():
        main_logits, _, patch_embs = model(x)
        probs = torch.softmax(main_logits, dim=-1)[0]
        if int(probs.argmax()) == CLASS_NAMES.index("healthy"):
            return np.zeros((x.shape[-2], size), dtype=np.uint8)
        q_unhealthy = model.text_embeddings()[CLASS_NAMES.index("unhealthy")]
        scores = F.normalize(patch_embs[0], dim=-1) @ F.normalize(q_unhealthy, dim=0)
    scores = scores.numpy()
    lo, hi = scores.min(), scores.max()
    if hi - lo < 1e-9:
        warnings.warn("degenerate patch scores; returning empty pseudo-mask")
        return np.zeros((x.shape[-2], size), dtype=np.uint8)
    norm = (scores - lo) / (hi - lo)
    grid = model.vit.grid
    patch_mask = (norm > threshold).reshape(grid, grid).astype(np.uint8)
    patch = size // grid
    return np.kron(patch_mask, np.ones((patch, patch), dtype=np.uint8))


# ---------------------------------------------------------------------------
# weak-mask pairs, simulators, ingestion


@dataclass
class WeakMaskPair:
    m_ddpt: np.ndarray
    m_sam: np.ndarray | None = None
    provenance: str = "simulated"      # extracted | simulated | ingested


def _threshold_for_area(blurred: np.ndarray, target_area: int) -> float:
    vals = np.sort(blurred[blurred > 1e-6].ravel())[::-1]
    if len(vals) == 0:
        return 1.0
    target_area = int(np.clip(target_area, 1, len(vals)))
    return float(vals[target_area - 1])


def simulate_ddpt_mask(gt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth-boundary, interior-faithful degradation of the true mask."""
    gt = (np.asarray(gt) > 0).astype(np.float64)
    area = gt.sum()
    if area == 0:
        return np.zeros(gt.shape, dtype=np.uint8)
    sigma = max(1.5, 0.08 * np.sqrt(area))
    blurred = gaussian_filter(gt, sigma)
    target_dice = rng.uniform(0.72, 0.90)
    target_area = int(round(area * (2.0 - target_dice) / target_dice))
    t = _threshold_for_area(blurred, target_area)
    return (blurred >= t).astype(np.uint8)


def simulate_sam_mask(gt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boundary-faithful variant: small smooth warp plus occasional tiny
    interior holes."""
    gt = (np.asarray(gt) > 0).astype(np.uint8)
    if gt.sum() == 0:
        return np.zeros(gt.shape, dtype=np.uint8)
    h, w = gt.shape
    amp = rng.uniform(0.8, 1.8)
    dx = gaussian_filter(rng.standard_normal((h, w)), 6.0)
    dy = gaussian_filter(rng.standard_normal((h, w)), 6.0)
    dx = amp * dx / (np.abs(dx).max() + 1e-9)
    dy = amp * dy / (np.abs(dy).max() + 1e-9)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    warped = cv2.remap(gt, (xx + dx).astype(np.float32),
                       (yy + dy).astype(np.float32),
                       interpolation=cv2.INTER_NEAREST,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if rng.random() < 0.3:
        inner = cv2.erode(warped, np.ones((5, 5), np.uint8))
        inner_pts = np.argwhere(inner > 0)
        if len(inner_pts):
            cy, cx = inner_pts[rng.integers(len(inner_pts))]
            hole_r = int(rng.integers(1, 3))
            cv2.circle(warped, (int(cx), int(cy)), hole_r, 0, -1)
    return warped.astype(np.uint8)


def simulate_weak_masks(slices, seed: int = 0, with_sam: bool = True) -> dict:
    """{slice_id: WeakMaskPair} from ground-truth masks; healthy slices get
    empty masks."""
    table = {}
    for s in slices:
        rng = np.random.default_rng((seed, zlib.crc32(s.slice_id.encode())))
        gt = s.gt_mask if s.gt_mask is not None else np.zeros(
            s.image.shape, dtype=np.uint8)
        m_ddpt = simulate_ddpt_mask(gt, rng)
        m_sam = simulate_sam_mask(gt, rng) if with_sam else None
        table[s.slice_id] = WeakMaskPair(m_ddpt=m_ddpt, m_sam=m_sam,
                                         provenance="simulated")
    return table


def extract_weak_masks(model: DDPTModel, slices, threshold: float = 0.5) -> dict:
    table = {}
    for s in slices:
        m = extract_pseudo_mask(model, s.image, threshold)
        table[s.slice_id] = WeakMaskPair(m_ddpt=m, m_sam=None,
                                         provenance="extracted")
    return table


def save_weak_masks(table: dict, out_dir) -> Path:
    """Masks as 8-bit PNGs (0 background / 255 anomaly) plus a manifest
    mapping slice id to paths and provenance."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = {}
    for slice_id, pair in table.items():
        ddpt_rel = f"masks/{slice_id}_ddpt.png"
        cv2.imwrite(str(out / ddpt_rel),
                    (pair.m_ddpt > 0).astype(np.uint8) * 255)
        sam_rel = None
        if pair.m_sam is not None:
            sam_rel = f"masks/{slice_id}_sam.png"
            cv2.imwrite(str(out / sam_rel),
                        (pair.m_sam > 0).astype(np.uint8) * 255)
        entries[slice_id] = {"ddpt": ddpt_rel, "sam": sam_rel,
                             "provenance": pair.provenance}
    manifest = out / "weak_masks.json"
    with open(manifest, "w") as fh:
        json.dump(entries, fh, indent=2)
    return manifest


def _read_binary_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise FileNotFoundError(f"missing weak-mask file {path}")
    values = np.unique(img)
    if not np.isin(values, (0, 255)).all():
        raise ValueError(f"{path}: weak mask must be binary 0/255, "
                         f"found values {values[:8].tolist()}")
    return (img == 255).astype(np.uint8)


def load_weak_masks(manifest_path) -> dict:
    root = Path(manifest_path).parent
    with open(manifest_path) as fh:
        entries = json.load(fh)
    table = {}
    for slice_id, e in entries.items():
        m_sam = _read_binary_png(root / e["sam"]) if e.get("sam") else None
        table[slice_id] = WeakMaskPair(
            m_ddpt=_read_binary_png(root / e["ddpt"]), m_sam=m_sam,
            provenance=e.get("provenance", "ingested"))
    return table


def ingest_weak_masks(mask_dir, slices, with_sam: bool = False) -> dict:
    """File-ingestion path for externally produced masks.

    Expects `<slice_id>_ddpt.png` (and optionally `<slice_id>_sam.png`)
    under mask_dir; strict 0/255 binary PNGs.
    """
    root = Path(mask_dir)
    table = {}
    for s in slices:
        ddpt_path = root / f"{s.slice_id}_ddpt.png"
        m_ddpt = _read_binary_png(ddpt_path)
        sam_path = root / f"{s.slice_id}_sam.png"
        m_sam = _read_binary_png(sam_path) if (with_sam and sam_path.exists()) \
            else None
        table[s.slice_id] = WeakMaskPair(m_ddpt=m_ddpt, m_sam=m_sam,
                                         provenance="ingested")
    return table
