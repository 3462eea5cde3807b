"""Weakly supervised brain-slice anomaly segmentation with fixed
location-based random embeddings and region-aware spatial attention."""

from .config import LossWeights, TrainConfig, load_config, toy_config
from .lore import build_codebook, build_grid, embed_points
from .model import SegmentationModel

__all__ = [
    "LossWeights", "TrainConfig", "load_config", "toy_config",
    "build_codebook", "build_grid", "embed_points", "SegmentationModel",
]

__version__ = "0.1.0"
