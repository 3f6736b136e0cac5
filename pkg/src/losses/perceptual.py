"""
Perceptual distances between images (H, W, 3) in [0, 1].

A feature-network archive is a NumPy ``.npz`` with, for i = 0, 1, ...:

- ``conv{i}.weight`` (out, in, k, k) and ``conv{i}.bias`` (out,): a 3x3 or
  other odd-sized convolution followed by ReLU; every layer after the first
  halves the resolution first (2x2 average pooling);
- ``lin{i}.weight`` (out,), optional: nonnegative per-channel weights of the
  layer's normalized feature difference (uniform when absent).

Inputs are mapped to [-1, 1] before the first layer.
"""

from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from core.logger import logger

PYRAMID_LEVELS = 4


class PerceptualDistance(Protocol):
    def __call__(self, a: Tensor, b: Tensor) -> Tensor: ...


def _to_batch(image: Tensor) -> Tensor:
    return image.permute(2, 0, 1)[None]


class PyramidDistance:
    """Mean absolute difference averaged over a 4-level x2 average-pooling pyramid."""

    def __init__(self, levels: int = PYRAMID_LEVELS):
        self.levels = levels

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        x, y = _to_batch(a), _to_batch(b)
        total = (x - y).abs().mean()
        used = 1
        for _ in range(self.levels - 1):
            if min(x.shape[-2:]) < 2:
                break
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
            total = total + (x - y).abs().mean()
            used += 1
        return total / used


class FeatureNetworkDistance:
    def __init__(self, convs: list[tuple[Tensor, Tensor]], lins: list[Tensor | None]):
        if not convs:
            raise ValueError("feature network needs at least one convolution")
        self.convs = convs
        self.lins = lins

    @classmethod
    def load(cls, path: str | Path) -> "FeatureNetworkDistance":
        archive = np.load(path)
        convs: list[tuple[Tensor, Tensor]] = []
        lins: list[Tensor | None] = []
        i = 0
        while f"conv{i}.weight" in archive:
            weight = torch.from_numpy(archive[f"conv{i}.weight"]).float()
            bias = torch.from_numpy(archive[f"conv{i}.bias"]).float()
            convs.append((weight, bias))
            lin = archive[f"lin{i}.weight"] if f"lin{i}.weight" in archive else None
            lins.append(None if lin is None else torch.from_numpy(lin).float().reshape(-1).clamp_min(0))
            i += 1
        return cls(convs, lins)

    def _features(self, image: Tensor) -> list[Tensor]:
        x = _to_batch(image) * 2.0 - 1.0
        features = []
        for i, (weight, bias) in enumerate(self.convs):
            if i > 0 and min(x.shape[-2:]) >= 2:
                x = F.avg_pool2d(x, 2)
            x = F.relu(F.conv2d(x, weight.to(x.dtype), bias.to(x.dtype), padding=weight.shape[-1] // 2))
            features.append(x)
        return features

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        total = a.new_zeros(())
        for fa, fb, lin in zip(self._features(a), self._features(b), self.lins):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            diff = (na - nb) ** 2
            if lin is None:
                per_pixel = diff.mean(1)
            else:
                per_pixel = (diff * lin.to(diff.dtype)[None, :, None, None]).sum(1)
            total = total + per_pixel.mean()
        return total


def load_perceptual(path: str | Path | None) -> PerceptualDistance:
    if path is None:
        logger.info("No perceptual weights configured; using the pyramid distance")
        return PyramidDistance()
    if not Path(path).exists():
        logger.warning(f"Perceptual weights {path} not found; falling back to the pyramid distance")
        return PyramidDistance()
    logger.info(f"Loaded perceptual feature network from {path}")
    return FeatureNetworkDistance.load(path)
