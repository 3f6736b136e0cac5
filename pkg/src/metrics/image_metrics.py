"""
Image quality metrics on (H, W, C) images in [0, 1], optionally restricted
to a boolean (H, W) region.
"""

import math

import torch
from torch import Tensor

from core.logger import logger
from losses.image import restrict, ssim
from losses.perceptual import PerceptualDistance
from surfels.cloud import SurfelCloud

PSNR_IDENTICAL = math.inf


def _region(region: Tensor | None, image: Tensor) -> Tensor:
    if region is None:
        return torch.ones(image.shape[:2], dtype=torch.bool)
    region = region.reshape(image.shape[0], image.shape[1])
    return region.bool() if region.dtype == torch.bool else region > 0.5


def psnr(target: Tensor, render: Tensor, region: Tensor | None = None) -> float:
    """
    10 log10(1 / MSE) over the pixels in ``region``. Identical images give
    ``inf``; an empty region is undefined and gives ``nan`` with a warning.
    """
    if target.shape != render.shape:
        raise ValueError(f"image shapes differ: {tuple(target.shape)} vs {tuple(render.shape)}")
    selected = _region(region, target)
    count = int(selected.sum())
    if count == 0:
        logger.warning("PSNR requested over an empty region")
        return math.nan
    diff = (target.to(torch.float64) - render.to(torch.float64))[selected]
    mse = float((diff**2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def masked_perceptual(
    target: Tensor, render: Tensor, perceptual: PerceptualDistance, region: Tensor | None = None
) -> float:
    """Perceptual distance with pixels outside ``region`` replaced by the target's."""
    if region is None:
        return float(perceptual(target, render))
    selected = _region(region, target)
    if not bool(selected.any()):
        return math.nan
    return float(perceptual(target, restrict(render, target, selected)))


def masked_region_masks(
    occlusion: Tensor, subject_mask: Tensor, threshold: float = 0.5
) -> tuple[Tensor, Tensor]:
    """Split the subject into (visible, occluded) by the rendered occlusion map."""
    occlusion = occlusion.reshape(occlusion.shape[0], occlusion.shape[1])
    subject = _region(subject_mask, occlusion[..., None])
    occluded = subject & (occlusion > threshold)
    visible = subject & ~occluded
    return visible, occluded


def image_ssim(target: Tensor, render: Tensor) -> float:
    return float(ssim(target.to(torch.float64), render.to(torch.float64)))


def bor(cloud: SurfelCloud) -> float:
    """Body occlusion ratio: the mean per-surfel occlusion."""
    return float(cloud.occlusion.detach().to(torch.float64).mean())
