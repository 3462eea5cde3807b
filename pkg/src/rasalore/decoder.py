"""Mask decoder and the point head.

The decoder cross-attends enriched point embeddings over image tokens,
projects each point to a logit, reshapes to the CPP grid and upsamples with
learned transposed convolutions back to full resolution. The point head is a
two-layer FFN producing the grid-structured point mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import TrainConfig
from .rasa import EnrichedPointEmbeddings, MultiHeadAttention


@dataclass
class AnomalyMask:
    m_ano: torch.Tensor    # (B, H, W) in (0, 1)
    logits: torch.Tensor   # (B, H, W) pre-activation


@dataclass
class PointMask:
    m_ffn: torch.Tensor    # (B, side, side) in (0, 1)


class MaskDecoder(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.attn = MultiHeadAttention(dim, cfg.num_heads, out_gain=1.0,
                                       locality_bias=6.0)
        self.point_proj = nn.Linear(dim, 1)
        self.grid_side = cfg.grid_side
        n_up = int(math.log2(cfg.downsample_factor))
        widths = list(cfg.upsampler_channels) + [1]
        ups = []
        cin = 1
        for i, w in enumerate(widths[:n_up]):
            conv = nn.ConvTranspose2d(cin, w, 4, stride=2, padding=1)
            # Variance-preserving init. With stride 2 each output pixel sees
            # roughly cin * 4 taps; the default fan-in init assumes cin * 16
            # and attenuates the signal ~5x per layer, leaving near-flat
            # logits and vanishing gradients through the stack.
            nn.init.normal_(conv.weight, std=math.sqrt(2.0 / (cin * 4)))
            nn.init.zeros_(conv.bias)
            ups.append(conv)
            if i < n_up - 1:
                ups.append(nn.ReLU(inplace=True))
            cin = w
        self.upsampler = nn.Sequential(*ups)
        nn.init.normal_(self.point_proj.weight, std=2.5 / math.sqrt(dim))
        nn.init.zeros_(self.point_proj.bias)

    def forward(self, xi: EnrichedPointEmbeddings, img_tokens: torch.Tensor,
                training: bool, generator: torch.Generator | None = None
                ) -> AnomalyMask:
        """xi: (B, k, d); img_tokens: (B, n, d) flattened encoder output."""
        q = xi.xi_espe
        if q.shape[-1] != img_tokens.shape[-1]:
            raise ValueError("token width mismatch between queries and keys")
        values = img_tokens
        if training:
            noise = torch.empty_like(img_tokens).normal_(generator=generator)
            values = img_tokens + noise
        dec = self.attn(q, img_tokens, values)           # (B, k, d)
        b, k, _ = dec.shape
        side = self.grid_side
        if side * side != k:
            raise ValueError(f"{k} points do not form a square grid")
        grid = self.point_proj(dec).reshape(b, 1, side, side)
        logits = self.upsampler(grid).squeeze(1)
        return AnomalyMask(m_ano=torch.sigmoid(logits), logits=logits)


class PointHead(nn.Module):
    """d -> d/2 -> 1 per point, logistic output on the CPP grid."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.net = nn.Sequential(nn.Linear(dim, dim // 2), nn.ReLU(inplace=True),
                                 nn.Linear(dim // 2, 1))
        self.grid_side = cfg.grid_side

    def forward(self, xi: EnrichedPointEmbeddings) -> PointMask:
        b, k, _ = xi.xi_espe.shape
        side = self.grid_side
        logits = self.net(xi.xi_espe).reshape(b, side, side)
        return PointMask(m_ffn=torch.sigmoid(logits))
