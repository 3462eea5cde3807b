"""Full segmentation network assembly."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import ImageEncoder, Refiner, flatten_tokens
from .config import TrainConfig
from .decoder import MaskDecoder, PointHead
from .rasa import ModalityRegistry


class SegmentationModel(nn.Module):
    """Shared refiner/encoder/decoder/point-head plus per-modality RASA."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.refiner = Refiner(cfg)
        self.encoder = ImageEncoder(cfg)
        self.registry = ModalityRegistry(cfg.k, cfg.image_size, cfg.embed_dim,
                                         cfg.num_heads, base_seed=cfg.seed)
        for i, modality in enumerate(cfg.modalities):
            self.registry.register_modality(modality, seed=cfg.seed + i)
        self.registry.bridge_modality = cfg.bridge_modality
        self.decoder = MaskDecoder(cfg)
        self.point_head = PointHead(cfg)
        self.noise_generator = torch.Generator().manual_seed(cfg.seed)

    @property
    def default_modality(self) -> str:
        return self.cfg.modalities[0]

    def _as_batch(self, images) -> torch.Tensor:
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        if not images.is_floating_point():
            images = images.float()
        if images.dim() == 2:
            images = images.unsqueeze(0)
        if images.dim() == 3:
            images = images.unsqueeze(1)
        return images

    def forward(self, images, modality: str | None = None,
                training_noise: bool = False):
        """images: (B, 1, H, W), (B, H, W) or (H, W) in [0, 1].

        Returns dict with m_ano, logits, m_ffn, xi (EnrichedPointEmbeddings).
        """
        modality = modality or self.default_modality
        x = self._as_batch(images)
        regions = self.refiner(x)
        region_tokens = flatten_tokens(regions)
        xi = self.registry.enrich(modality, region_tokens, training_noise,
                                  generator=self.noise_generator)
        img_tokens = flatten_tokens(self.encoder(x))
        mask = self.decoder(xi, img_tokens, training_noise,
                            generator=self.noise_generator)
        points = self.point_head(xi)
        return {"m_ano": mask.m_ano, "logits": mask.logits,
                "m_ffn": points.m_ffn, "xi": xi}

    def enrich_slice(self, image, modality: str | None = None) -> torch.Tensor:
        """Noise-free (1, k, d) enriched embeddings for one slice."""
        modality = modality or self.default_modality
        x = self._as_batch(image)
        region_tokens = flatten_tokens(self.refiner(x))
        xi = self.registry.enrich(modality, region_tokens, training=False)
        return xi.xi_espe

    def single_modality_parameters(self, modality: str | None = None):
        """Parameters engaged when inferring with one modality."""
        modality = modality or self.default_modality
        mods = [self.refiner, self.encoder, self.decoder, self.point_head,
                self.registry.rasa[modality]]
        for m in mods:
            yield from m.parameters()
