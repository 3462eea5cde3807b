"""Candidate prompt point grid and its fixed location-based random embeddings.

The grid and the embedding codebook are built once per (k, d, seed) and shared
by every image of the same size. Nothing in here is trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError


@dataclass(frozen=True)
class CandidatePromptGrid:
    k: int
    image_size: tuple          # (H, W)
    coords_px: np.ndarray      # (k, 2) integer pixel coordinates, (row, col)
    coords_norm: np.ndarray    # (k, 2) in [-1, 1]

    @property
    def side(self) -> int:
        return int(round(math.sqrt(self.k)))

    @property
    def cell_size(self) -> tuple:
        return (self.image_size[0] // self.side, self.image_size[1] // self.side)


@dataclass(frozen=True)
class LoRECodebook:
    grid: CandidatePromptGrid
    embed_dim: int
    E_cpp: np.ndarray          # (k, d), entries in [-1, 1], never trained
    seed: int


def build_grid(k: int, image_size) -> CandidatePromptGrid:
    """Lay out k points as a sqrt(k) x sqrt(k) grid of cell centers.

    Pixel coordinates snap to floor((i + 0.5) * cell); normalized coordinates
    use pixel centers: 2 * (p + 0.5) / size - 1.
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    h, w = image_size
    side = int(round(math.sqrt(k)))
    if side * side != k or k < 4:
        raise ConfigError(f"k={k} must be a perfect square >= 4")
    if side > h or side > w:
        raise ConfigError(f"k={k} exceeds the {h}x{w} pixel budget")
    rows = np.floor((np.arange(side) + 0.5) * (h / side)).astype(np.int64)
    cols = np.floor((np.arange(side) + 0.5) * (w / side)).astype(np.int64)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords_px = np.stack([rr.ravel(), cc.ravel()], axis=1)
    sizes = np.array([h, w], dtype=np.float64)
    coords_norm = 2.0 * (coords_px + 0.5) / sizes - 1.0
    return CandidatePromptGrid(k=k, image_size=(h, w),
                               coords_px=coords_px, coords_norm=coords_norm)


def embed_points(grid: CandidatePromptGrid, d: int, seed: int) -> LoRECodebook:
    """Random Fourier features of the normalized grid coordinates.

    E_cpp[i] = concat(sin(2*pi*c_i @ B), cos(2*pi*c_i @ B)) with B a fixed
    2 x (d/2) unit-Gaussian frequency matrix drawn from `seed`. Deterministic:
    the same (k, d, seed) always yields the bitwise-identical matrix.
    """
    if d % 2:
        raise ConfigError(f"embed dim d={d} must be even")
    rng = np.random.default_rng(seed)
    freq = rng.standard_normal((2, d // 2))
    phase = 2.0 * np.pi * grid.coords_norm @ freq
    e_cpp = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return LoRECodebook(grid=grid, embed_dim=d, E_cpp=e_cpp, seed=seed)


def build_codebook(k: int, image_size, d: int, seed: int) -> LoRECodebook:
    return embed_points(build_grid(k, image_size), d, seed)
