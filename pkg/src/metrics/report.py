"""
Evaluation report for held-out views.

Serialized as JSON. Per view: full-frame PSNR, SSIM and perceptual distance,
the same PSNR and perceptual distance over the visible and the occluded
body regions, and pixel counts per region. Aggregates weight every view by
its pixel count in the region. An undefined value (empty region) is null;
identical images give a PSNR of Infinity.
"""

import math
from pathlib import Path

import torch
from pydantic import BaseModel, ConfigDict, Field

from assets.io import atomic_write_text
from assets.scene import FrameObservation, PoseSequence
from body.template import BodyTemplate
from core.config import MetricsConfig
from core.logger import logger
from losses.perceptual import PerceptualDistance, PyramidDistance
from metrics.image_metrics import bor, image_ssim, masked_perceptual, masked_region_masks, psnr
from optim.occlusion import OCCLUSION_REQUEST
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud

EVAL_REQUEST = RenderRequest(channels=("rgb", "mask"))
REGIONS = ("full", "visible", "occluded")


class _Report(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")


class RegionScores(_Report):
    psnr: float | None = None
    ssim: float | None = None
    perceptual: float | None = None
    pixels: int = 0


class ViewMetrics(_Report):
    frame: int
    full: RegionScores
    visible: RegionScores
    occluded: RegionScores


class EvalReport(_Report):
    views: list[ViewMetrics] = Field(default_factory=list)
    aggregate: dict[str, RegionScores] = Field(default_factory=dict)
    bor: float = Field(ge=0, le=1)
    full_region: str = "frame"

    def write(self, path: str | Path) -> None:
        atomic_write_text(path, self.model_dump_json(indent=2))


def _defined(value: float) -> float | None:
    return None if math.isnan(value) else value


def aggregate(views: list[ViewMetrics]) -> dict[str, RegionScores]:
    """Pixel-count weighted means of the per-view scores, per region."""
    result = {}
    for name in REGIONS:
        scores = [getattr(view, name) for view in views]
        pixels = sum(s.pixels for s in scores)
        merged = RegionScores(pixels=pixels)
        for metric in ("psnr", "ssim", "perceptual"):
            pairs = [(getattr(s, metric), s.pixels) for s in scores if getattr(s, metric) is not None]
            weight = sum(w for _, w in pairs)
            if weight > 0:
                setattr(merged, metric, sum(v * w for v, w in pairs) / weight)
        result[name] = merged
    return result


def evaluate_view(
    cloud: SurfelCloud,
    template: BodyTemplate,
    sequence: PoseSequence,
    observation: FrameObservation,
    frame: int,
    config: MetricsConfig,
    perceptual: PerceptualDistance,
) -> ViewMetrics:
    with torch.no_grad():
        bones = sequence.bones(template, frame).to(cloud.dtype)
        camera = sequence.cameras[frame].to(cloud.dtype)
        output = render(cloud, bones, camera, EVAL_REQUEST)
        occlusion = render(cloud, bones, camera, OCCLUSION_REQUEST)["occlusion"]
        target = observation.image.to(cloud.dtype)
        image = output["rgb"]
        subject = observation.mask[..., 0] > 0.5
        visible, occluded = masked_region_masks(occlusion, subject, config.occlusion_threshold)

        full_region = None if config.full_region == "frame" else subject
        full_pixels = target.shape[0] * target.shape[1] if full_region is None else int(subject.sum())
        full = RegionScores(
            psnr=_defined(psnr(target, image, full_region)),
            ssim=image_ssim(target, image),
            perceptual=_defined(masked_perceptual(target, image, perceptual, full_region)),
            pixels=full_pixels,
        )
        regions = {}
        for name, region in (("visible", visible), ("occluded", occluded)):
            count = int(region.sum())
            regions[name] = RegionScores(
                psnr=_defined(psnr(target, image, region)) if count else None,
                perceptual=_defined(masked_perceptual(target, image, perceptual, region)) if count else None,
                pixels=count,
            )
    return ViewMetrics(frame=observation.index, full=full, **regions)


def evaluate(
    cloud: SurfelCloud,
    template: BodyTemplate,
    sequence: PoseSequence,
    observations: list[FrameObservation],
    config: MetricsConfig | None = None,
    perceptual: PerceptualDistance | None = None,
) -> EvalReport:
    """Score held-out frames (every frame when none is marked as test)."""
    config = config or MetricsConfig()
    perceptual = perceptual or PyramidDistance()
    frames = [i for i, obs in enumerate(observations) if obs.split == "test"] or list(range(len(observations)))
    views = [
        evaluate_view(cloud, template, sequence, observations[i], i, config, perceptual) for i in frames
    ]
    report = EvalReport(views=views, aggregate=aggregate(views), bor=bor(cloud), full_region=config.full_region)
    full = report.aggregate["full"]
    logger.info(
        f"Evaluated {len(views)} view(s): PSNR {full.psnr}, SSIM {full.ssim}, BOR {report.bor:.4f}"
    )
    return report
