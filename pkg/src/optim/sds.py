"""
Refinement of a reconstructed avatar with a denoiser prior.

Each step keeps the reconstruction objective on a sampled training frame and
adds a distillation term on renders from novel orbit views: the denoised
render is a constant target, so the render receives the gradient
``weight * (render - denoised)``. The schedule has a shape phase (normal
maps) followed by a texture phase (colors).
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import torch
from torch import Tensor
from tqdm import tqdm

from assets.scene import FrameObservation, PoseSequence
from body.template import BodyTemplate
from core.config import SdsConfig, SdsPhaseConfig
from core.errors import NonFiniteLossError
from core.logger import logger
from losses.image import encode_normals
from losses.perceptual import PerceptualDistance
from optim.denoiser import Denoiser, denoise_checked
from optim.occlusion import OCCLUSION_REQUEST
from optim.reconstruction import Reconstructor
from render.camera import Camera, orbit_camera
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud

ViewSampler = Callable[[int], list[Camera]]

RGB_REQUEST = RenderRequest(channels=("rgb",))
NORMAL_REQUEST = RenderRequest(channels=("normal",))


@dataclass
class SdsResult:
    cloud: SurfelCloud
    history: list[dict[str, Any]] = field(default_factory=list)


def novel_views(
    center: Tensor,
    radius: float,
    reference: Camera,
    count: int,
    generator: torch.Generator,
    elevation_range: tuple[float, float] = (-10.0, 30.0),
) -> list[Camera]:
    """
    ``count`` orbit cameras around ``center`` at evenly spaced azimuths from a
    random start, sharing one random elevation and the reference intrinsics.
    """
    draws = torch.rand(2, generator=generator, dtype=torch.float64)
    start = 360.0 * float(draws[0])
    low, high = elevation_range
    elevation = low + (high - low) * float(draws[1])
    intrinsics = reference.intrinsics.to(torch.float64)
    return [
        orbit_camera(
            center.detach().to(torch.float64), radius, start + k * 360.0 / count, elevation,
            intrinsics, reference.width, reference.height,
        ).to(reference.dtype)
        for k in range(count)
    ]


def sample_timestep(config: SdsConfig, progress: float, generator: torch.Generator) -> float:
    """Uniform in [min, upper], the upper bound annealed linearly from max to floor over a phase."""
    upper = config.timestep_max + (config.timestep_floor - config.timestep_max) * progress
    upper = max(upper, config.timestep_min)
    u = float(torch.rand(1, generator=generator, dtype=torch.float64))
    return config.timestep_min + (upper - config.timestep_min) * u


class SdsRefiner:
    def __init__(
        self,
        cloud: SurfelCloud,
        template: BodyTemplate,
        sequence: PoseSequence,
        observations: list[FrameObservation],
        denoiser: Denoiser,
        config: SdsConfig | None = None,
        seed: int = 0,
        prompt: str = "",
        perceptual: PerceptualDistance | None = None,
        view_sampler: ViewSampler | None = None,
    ):
        self.config = config or SdsConfig()
        self.reconstructor = Reconstructor(
            cloud, template, sequence, observations, self.config.reconstruction, seed, perceptual
        )
        self.reconstructor.stage = "sds-refine"
        self.cloud = cloud
        self.denoiser = denoiser
        self.prompt = self.config.prompt if self.config.prompt is not None else prompt
        self.view_generator = torch.Generator().manual_seed(seed + 1)
        self.view_sampler = view_sampler or self._orbit_views
        with torch.no_grad():
            self._rest_pelvis = template.shaped_joints(sequence.shape.to(template.dtype))[0]

    def _orbit_views(self, frame: int) -> list[Camera]:
        bones = self.reconstructor.bones[frame]
        camera = self.reconstructor.cameras[frame]
        center = bones.joint_position(self._rest_pelvis)
        radius = float((camera.center - center).norm())
        return novel_views(
            center,
            radius,
            camera,
            self.config.views_per_step,
            self.view_generator,
            (self.config.elevation_min, self.config.elevation_max),
        )

    def distillation(self, frame: int, phase: SdsPhaseConfig, progress: float) -> tuple[Tensor | None, float]:
        """Sum of the distillation terms over novel views; None when both weights are zero."""
        active = [
            (channel, weight)
            for channel, weight in (("normal", phase.normal_weight), ("rgb", phase.rgb_weight))
            if weight > 0
        ]
        if not active:
            return None, 0.0
        bones = self.reconstructor.bones[frame]
        condition = self.reconstructor.targets[frame].image
        timestep = sample_timestep(self.config, progress, self.view_generator)
        total: Tensor | None = None
        for camera in self.view_sampler(frame):
            occlusion = None
            if self.config.occlusion_masking:
                with torch.no_grad():
                    occlusion = render(self.cloud, bones, camera, OCCLUSION_REQUEST)["occlusion"]
            for channel, weight in active:
                request = NORMAL_REQUEST if channel == "normal" else RGB_REQUEST
                image = render(self.cloud, bones, camera, request)[channel]
                if channel == "normal":
                    image = encode_normals(image)
                noise = torch.randn(image.shape, generator=self.view_generator, dtype=torch.float64).to(image.dtype)
                target = denoise_checked(self.denoiser, image, condition, self.prompt, timestep, noise)
                squared = (image - target) ** 2
                if occlusion is not None:
                    squared = squared * occlusion
                term = 0.5 * weight * squared.sum()
                total = term if total is None else total + term
        return total, timestep

    def step(self, phase: SdsPhaseConfig, phase_step: int) -> dict[str, Any]:
        recon = self.reconstructor
        frame = recon.sample_frame()
        recon.optimizer.zero_grad(set_to_none=True)
        losses = recon.losses(frame)
        recon.check_finite(losses)
        progress = phase_step / phase.steps if phase.steps else 0.0
        distill, timestep = self.distillation(frame, phase, progress)
        objective = losses.total if distill is None else losses.total + distill
        if distill is not None and not torch.isfinite(distill):
            raise NonFiniteLossError(recon.stage, recon.step_index, {**losses.terms, "sds": float(distill.detach())})
        objective.backward()
        occlusion_loss = recon.apply(frame)
        record: dict[str, Any] = {
            "step": recon.step_index - 1,
            "frame": frame,
            "total": float(losses.total.detach()),
            **losses.terms,
        }
        if occlusion_loss is not None:
            record["occlusion"] = occlusion_loss
        if distill is not None:
            record.update(phase=phase.name, sds=float(distill.detach()), timestep=timestep)
        return record

    def run(self, history: list[dict[str, Any]] | None = None) -> list[dict[str, Any]]:
        history = [] if history is None else history
        for phase in self.config.phases:
            if phase.steps == 0:
                continue
            logger.info(
                f"SDS {phase.name} phase: {phase.steps} steps, rgb weight {phase.rgb_weight:g}, "
                f"normal weight {phase.normal_weight:g}"
            )
            for phase_step in tqdm(range(phase.steps), desc=f"sds {phase.name}", leave=False, disable=None):
                record = self.step(phase, phase_step)
                history.append(record)
                if record["step"] % self.reconstructor.config.log_every == 0:
                    logger.info(
                        f"sds-refine step {record['step']} ({phase.name}): total loss {record['total']:.6g}, "
                        f"distillation {record.get('sds', 0.0):.6g}"
                    )
        return history

    def state_dict(self) -> dict[str, Any]:
        return {**self.reconstructor.state_dict(), "view_generator": self.view_generator.get_state()}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.reconstructor.load_state_dict(state)
        self.view_generator.set_state(state["view_generator"])


def sds_refine(
    cloud: SurfelCloud,
    sequence: PoseSequence,
    observations: list[FrameObservation],
    template: BodyTemplate,
    denoiser: Denoiser,
    config: SdsConfig | None = None,
    seed: int = 0,
    prompt: str = "",
    perceptual: PerceptualDistance | None = None,
    view_sampler: ViewSampler | None = None,
) -> SdsResult:
    refiner = SdsRefiner(
        cloud, template, sequence, observations, denoiser, config, seed, prompt, perceptual, view_sampler
    )
    total_steps = sum(phase.steps for phase in refiner.config.phases)
    logger.info(f"Refining {cloud.num_surfels} surfels with {type(denoiser).__name__} for {total_steps} steps")
    history = refiner.run()
    return SdsResult(cloud, history)
