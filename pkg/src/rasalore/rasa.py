"""Region aware spatial attention.

Fixed point embeddings query the refiner's region features through multi-head
attention; values are noise-perturbed during training and a residual path
keeps the original embedding in the output. The per-modality registry for the
multimodal variant also lives here: one codebook + one attention block per
modality, everything else shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .lore import LoRECodebook, build_codebook


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention with separate q/k/v/out projections.

    Exposed here (rather than nn.MultiheadAttention) so tests can reach the
    projection weights and the softmax rows directly.
    """

    def __init__(self, dim: int, num_heads: int, out_gain: float = 0.2,
                 locality_bias: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"{num_heads} heads do not divide dim {dim}")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        # small output init keeps the residual path dominant at step 0
        with torch.no_grad():
            self.out_proj.weight.mul_(out_gain)
            self.out_proj.bias.zero_()
        # Queries and keys both live on the same spatially-flattened grid, so
        # a diagonal logit bias starts attention near-identity (each point
        # reads its own location). Random q/k projections alone give uniform
        # softmax rows at init, which erases all spatial structure and makes
        # early training extremely slow. Learnable so it can anneal away.
        self.locality_bias = nn.Parameter(torch.tensor(float(locality_bias)))
        self.last_attention = None   # (B, heads, Lq, Lk) from the last call

    def forward(self, q, k, v):
        b, lq, d = q.shape
        lk = k.shape[1]
        hd = d // self.num_heads

        def split(x, length):
            return x.reshape(b, length, self.num_heads, hd).transpose(1, 2)

        qh = split(self.q_proj(q), lq)
        kh = split(self.k_proj(k), lk)
        vh = split(self.v_proj(v), lk)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(hd)
        if lq == lk:
            eye = torch.eye(lq, dtype=logits.dtype, device=logits.device)
            logits = logits + self.locality_bias * eye
        attn = torch.softmax(logits, dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ vh).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out)


@dataclass
class EnrichedPointEmbeddings:
    xi_espe: torch.Tensor     # (B, k, d)
    modality_id: str
    noise_applied: bool


class RASA(nn.Module):
    """One attention block enriching E_cpp with region features."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads, out_gain=0.6,
                                       locality_bias=6.0)

    def forward(self, e_cpp: torch.Tensor, region_tokens: torch.Tensor,
                training: bool, generator: torch.Generator | None = None,
                modality: str = "T2") -> EnrichedPointEmbeddings:
        """e_cpp: (k, d) or (B, k, d); region_tokens: (B, k, d)."""
        if e_cpp.dim() == 2:
            e_cpp = e_cpp.unsqueeze(0).expand(region_tokens.shape[0], -1, -1)
        if e_cpp.shape[-1] != region_tokens.shape[-1]:
            raise ValueError("embedding width mismatch between queries and keys")
        values = region_tokens
        if training:
            noise = torch.empty_like(region_tokens).normal_(generator=generator)
            values = region_tokens + noise
        xi = e_cpp + self.attn(e_cpp, region_tokens, values)
        return EnrichedPointEmbeddings(xi_espe=xi, modality_id=modality,
                                       noise_applied=training)


class ModalityRegistry(nn.Module):
    """Per-modality codebooks and RASA blocks around shared everything-else."""

    def __init__(self, k: int, image_size: int, dim: int, num_heads: int,
                 base_seed: int = 0):
        super().__init__()
        self.k = k
        self.image_size = image_size
        self.dim = dim
        self.num_heads = num_heads
        self.base_seed = base_seed
        self.rasa = nn.ModuleDict()
        self.codebooks: dict[str, LoRECodebook] = {}
        self.bridge_modality: str | None = None

    @property
    def modalities(self):
        return list(self.rasa.keys())

    def register_modality(self, modality: str, seed: int) -> "ModalityRegistry":
        if modality in self.rasa:
            raise ValueError(f"modality {modality!r} already registered")
        self.codebooks[modality] = build_codebook(
            self.k, self.image_size, self.dim, seed)
        self.rasa[modality] = RASA(self.dim, self.num_heads)
        buf = torch.from_numpy(self.codebooks[modality].E_cpp).float()
        self.register_buffer(f"e_cpp_{modality}", buf)
        return self

    def e_cpp(self, modality: str) -> torch.Tensor:
        if modality not in self.rasa:
            raise KeyError(f"modality {modality!r} not registered")
        return getattr(self, f"e_cpp_{modality}")

    def enrich(self, modality: str, region_tokens: torch.Tensor,
               training: bool, generator=None) -> EnrichedPointEmbeddings:
        if modality not in self.rasa:
            raise KeyError(f"modality {modality!r} not registered")
        e = self.e_cpp(modality).to(region_tokens.dtype)
        return self.rasa[modality](e, region_tokens, training,
                                   generator=generator, modality=modality)


def extract_bridge_embeddings(model, slices, modality: str | None = None) -> dict:
    """Frozen-model, noise-free embeddings for every training slice.

    Returns {slice_id: (k, d) float32 array}; persisted with
    save_bridge_table/load_bridge_table for reuse as alignment targets.
    """
    model.eval()
    table = {}
    with torch.no_grad():
        for s in slices:
            xi = model.enrich_slice(s.image, modality=modality)
            table[s.slice_id] = xi.squeeze(0).cpu().numpy().astype(np.float32)
    return table


def save_bridge_table(table: dict, path):
    np.savez_compressed(path, **table)


def load_bridge_table(path) -> dict:
    with np.load(path) as data:
        return {key: data[key] for key in data.files}


def lookup_bridge(table: dict, slice_id: str) -> np.ndarray:
    if slice_id not in table:
        raise KeyError(f"slice {slice_id!r} missing from bridge table")
    return table[slice_id]
