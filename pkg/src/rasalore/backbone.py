"""Convolutional feature extractors.

Refiner: maps a slice to a sqrt(k) x sqrt(k) x d region feature map, one cell
per candidate prompt point. ImageEncoder: four UNet-style encoder blocks whose
final map is flattened into tokens for the mask decoder. Both are deliberately
narrow so the whole model stays inside the parameter budget.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import TrainConfig


def count_parameters(model: nn.Module) -> int:
    """Exact number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _ResBlock(nn.Module):
    """Conv block with a projection shortcut.

    A plain stack of randomly initialised conv+BN+ReLU layers scrambles the
    input beyond linear recovery, so the heads downstream see no usable
    signal until the whole stack has been trained. The shortcut keeps a
    linear image of the block input in every layer's output from step 0.
    """

    def __init__(self, cin, cout, stride, double=False):
        super().__init__()
        path = [_conv_block(cin, cout, stride)]
        if double:
            path.append(nn.Sequential(
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.BatchNorm2d(cout)))
        else:
            # strip the trailing ReLU; it is applied after the sum
            path[0] = path[0][:2]
        self.path = nn.Sequential(*path)
        if cin == cout and stride == 1:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.path(x) + self.skip(x))


class Refiner(nn.Module):
    """Stride-2 conv stack ending in a 1x1 projection to d channels.

    Output spatial size is exactly sqrt(k) x sqrt(k); each output cell only
    sees a local neighborhood of its source region (no global pooling/norm
    over space in eval mode).
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        factor = cfg.downsample_factor
        n_down = max(int(math.log2(factor)), 0)
        widths = list(cfg.refiner_channels)
        blocks = []
        cin = 1
        if n_down == 0:
            blocks.append(_ResBlock(cin, widths[0], 1))
            cin = widths[0]
        for w in widths[:n_down]:
            blocks.append(_ResBlock(cin, w, 2))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        # the extra channel is the average-pooled input itself, so raw
        # intensity stays linearly readable from the region features
        self.proj = nn.Conv2d(cin + 1, cfg.embed_dim, 1)
        with torch.no_grad():
            # boost token scale; unit-variance value noise during training
            # would otherwise drown the default-init activations
            self.proj.weight.mul_(3.0)
        self.pool_factor = 2 ** n_down
        self.grid_side = cfg.grid_side

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 1, H, W) in [0, 1] -> (B, d, sqrt(k), sqrt(k))."""
        if x.shape[-1] % self.grid_side or x.shape[-2] % self.grid_side:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by grid side "
                f"{self.grid_side}")
        feats = self.blocks(x)
        pooled = nn.functional.avg_pool2d(x, self.pool_factor) \
            if self.pool_factor > 1 else x
        out = self.proj(torch.cat([feats, pooled], dim=1))
        if out.shape[-1] != self.grid_side:
            raise ValueError(
                f"refiner produced {tuple(out.shape[-2:])}, expected "
                f"{self.grid_side}x{self.grid_side}")
        return out


class ImageEncoder(nn.Module):
    """Four encoder blocks (double conv each); the last log2(H/sqrt(k))
    blocks downsample so the token grid lines up with the CPP cells."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        factor = cfg.downsample_factor
        n_down = int(math.log2(factor))
        if n_down > 4:
            raise ValueError("downsample factor above 16 is unsupported")
        widths = list(cfg.encoder_channels)
        strides = [1] * (4 - n_down) + [2] * n_down
        blocks = []
        cin = 1
        for w, s in zip(widths, strides):
            blocks.append(_ResBlock(cin, w, s, double=True))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Conv2d(cin + 1, cfg.embed_dim, 1)
        with torch.no_grad():
            self.proj.weight.mul_(3.0)
        self.grid_side = cfg.grid_side
        self.downsample_factor = factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 1, H, W) -> (B, d, h', w') with h' = H / factor."""
        if x.shape[-1] % self.grid_side or x.shape[-2] % self.grid_side:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by grid side "
                f"{self.grid_side}")
        feats = self.blocks(x)
        pooled = nn.functional.avg_pool2d(x, self.downsample_factor) \
            if self.downsample_factor > 1 else x
        return self.proj(torch.cat([feats, pooled], dim=1))


def flatten_tokens(feats: torch.Tensor) -> torch.Tensor:
    """(B, d, h, w) -> (B, h*w, d) token sequence."""
    b, d, h, w = feats.shape
    return feats.reshape(b, d, h * w).transpose(1, 2)
