"""
Initial reconstruction of the surfel avatar from posed training frames.

Every step samples one training frame, poses the cloud with that frame's
bone transforms, renders the front channels in ascending depth order and
the back normal map in descending order, and takes one Adam step on the
canonical positions, orientations and the attribute field. Occlusion
estimation is interleaved with the same frame when configured.
"""

from dataclasses import dataclass, field
from typing import Any

import torch
from torch import Tensor
from tqdm import tqdm

from assets.scene import FrameObservation, PoseSequence
from body.kinematics import BoneTransforms
from body.template import BodyTemplate
from core.config import ReconstructionConfig
from core.errors import NonFiniteLossError
from core.logger import logger
from losses.image import loss_region, mask_loss, normal_loss, restrict, rgb_loss
from losses.perceptual import PerceptualDistance, load_perceptual
from losses.regularizers import regularizers
from optim.adam import Adam
from optim.occlusion import OcclusionEstimator
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud

FRONT_REQUEST = RenderRequest(channels=("rgb", "mask", "normal", "depth"), order="ascending")
BACK_REQUEST = RenderRequest(channels=("back_normal",), order="descending")


@dataclass(slots=True)
class StepLosses:
    total: Tensor
    terms: dict[str, float]


@dataclass
class ReconstructionResult:
    cloud: SurfelCloud
    history: list[dict[str, Any]] = field(default_factory=list)


def training_frames(observations: list[FrameObservation]) -> list[int]:
    """Indices of frames marked for training; every frame when none are marked."""
    frames = [i for i, obs in enumerate(observations) if obs.split == "train"]
    return frames or list(range(len(observations)))


def frame_bones(
    template: BodyTemplate, sequence: PoseSequence, dtype: torch.dtype
) -> list[BoneTransforms]:
    with torch.no_grad():
        return [sequence.bones(template, t).to(dtype) for t in range(sequence.num_frames)]


class Reconstructor:
    """
    Stateful optimizer for the reconstruction objective. ``state_dict`` and
    ``load_state_dict`` cover everything needed to resume bitwise: step
    counter, optimizer moments and the frame-sampling generator.
    """

    stage = "reconstruct"

    def __init__(
        self,
        cloud: SurfelCloud,
        template: BodyTemplate,
        sequence: PoseSequence,
        observations: list[FrameObservation],
        config: ReconstructionConfig | None = None,
        seed: int = 0,
        perceptual: PerceptualDistance | None = None,
    ):
        if len(observations) != sequence.num_frames:
            raise ValueError(f"{len(observations)} observations for {sequence.num_frames} frames")
        self.cloud = cloud
        self.observations = observations
        self.sequence = sequence
        self.config = config or ReconstructionConfig()
        self.perceptual = perceptual or load_perceptual(self.config.perceptual_weights)
        self.frames = training_frames(observations)
        self.bones = frame_bones(template, sequence, cloud.dtype)
        self.cameras = [camera.to(cloud.dtype) for camera in sequence.cameras]
        self.targets = [_cast_observation(obs, cloud.dtype) for obs in observations]
        self.generator = torch.Generator().manual_seed(seed)
        self.step_index = 0

        rates = self.config.learning_rates
        adam = self.config.adam
        self.optimizer = Adam(
            [
                {"params": [cloud.positions], "lr": rates.positions * cloud.extent, "name": "positions"},
                {"params": [cloud.quaternions], "lr": rates.rotations, "name": "rotations"},
                {"params": cloud.field_parameters(), "lr": rates.field, "name": "field"},
            ],
            betas=(adam.beta1, adam.beta2),
            eps=adam.eps,
        )
        self.occlusion = (
            OcclusionEstimator(cloud, self.config.occlusion) if self.config.occlusion.interleaved else None
        )

    def sample_frame(self) -> int:
        pick = int(torch.randint(len(self.frames), (1,), generator=self.generator))
        return self.frames[pick]

    def losses(self, frame: int) -> StepLosses:
        """Reconstruction objective for one frame: photometric, mask, normal and regularizers."""
        weights = self.config.loss_weights
        target = self.targets[frame]
        camera = self.cameras[frame]
        bones = self.bones[frame]

        front = render(self.cloud, bones, camera, FRONT_REQUEST)
        region = loss_region(target.mask, front["mask"], weights.region_dilation)
        rgb = rgb_loss(target.image, restrict(front["rgb"], target.image, region), self.perceptual)
        mask = mask_loss(target.mask, front["mask"])

        back_target = back_render = back_valid = None
        if target.back_normal is not None:
            back = render(self.cloud, bones, camera, BACK_REQUEST)
            back_target = target.back_normal
            back_render = restrict(back["back_normal"], back_target, region)
            back_valid = target.back_normal_valid() & region
        normal = normal_loss(
            target.normal,
            restrict(front["normal"], target.normal, region),
            target.normal_valid() & region,
            back_target,
            back_render,
            back_valid,
            self.perceptual,
        )
        regular = regularizers(self.cloud, front["normal"], front["depth"], front.alpha, camera)

        total = rgb + weights.mask * mask + weights.normal * normal + regular.weighted(weights)
        terms = {
            "rgb": float(rgb.detach()),
            "mask": float(mask.detach()),
            "normal": float(normal.detach()),
            **regular.as_dict(),
        }
        return StepLosses(total, terms)

    def apply(self, frame: int) -> float | None:
        """Optimizer step after gradients are in place; then the interleaved occlusion step."""
        self.optimizer.step()
        self.cloud.normalize_orientations_()
        occlusion_loss = None
        if self.occlusion is not None:
            occlusion_loss = self.occlusion.step(self.bones[frame], self.cameras[frame])
        self.step_index += 1
        return occlusion_loss

    def check_finite(self, losses: StepLosses) -> None:
        if not torch.isfinite(losses.total):
            raise NonFiniteLossError(self.stage, self.step_index, losses.terms)

    def step(self) -> dict[str, Any]:
        frame = self.sample_frame()
        self.optimizer.zero_grad(set_to_none=True)
        losses = self.losses(frame)
        self.check_finite(losses)
        losses.total.backward()
        occlusion_loss = self.apply(frame)
        record: dict[str, Any] = {
            "step": self.step_index - 1,
            "frame": frame,
            "total": float(losses.total.detach()),
            **losses.terms,
        }
        if occlusion_loss is not None:
            record["occlusion"] = occlusion_loss
        return record

    def run(self, steps: int | None = None, history: list[dict[str, Any]] | None = None) -> list[dict[str, Any]]:
        """Run ``steps`` steps, appending one record per step to ``history``."""
        steps = self.config.steps if steps is None else steps
        history = [] if history is None else history
        for _ in tqdm(range(steps), desc=self.stage, leave=False, disable=None):
            record = self.step()
            history.append(record)
            if record["step"] % self.config.log_every == 0:
                logger.info(f"{self.stage} step {record['step']}: total loss {record['total']:.6g}")
        return history

    def state_dict(self) -> dict[str, Any]:
        return {
            "step": self.step_index,
            "optimizer": self.optimizer.state_dict(),
            "occlusion_optimizer": self.occlusion.state_dict() if self.occlusion else None,
            "generator": self.generator.get_state(),
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.step_index = int(state["step"])
        self.optimizer.load_state_dict(state["optimizer"])
        if self.occlusion is not None and state.get("occlusion_optimizer") is not None:
            self.occlusion.load_state_dict(state["occlusion_optimizer"])
        self.generator.set_state(state["generator"])


def _cast_observation(obs: FrameObservation, dtype: torch.dtype) -> FrameObservation:
    return FrameObservation(
        index=obs.index,
        camera=obs.camera,
        image=obs.image.to(dtype),
        mask=obs.mask.to(dtype),
        normal=obs.normal.to(dtype),
        back_normal=None if obs.back_normal is None else obs.back_normal.to(dtype),
        keypoints=obs.keypoints,
        confidences=obs.confidences,
        split=obs.split,
    )


def reconstruct(
    cloud: SurfelCloud,
    sequence: PoseSequence,
    observations: list[FrameObservation],
    template: BodyTemplate,
    config: ReconstructionConfig | None = None,
    seed: int = 0,
    perceptual: PerceptualDistance | None = None,
) -> ReconstructionResult:
    reconstructor = Reconstructor(cloud, template, sequence, observations, config, seed, perceptual)
    logger.info(
        f"Reconstructing {cloud.num_surfels} surfels from {len(reconstructor.frames)} training frame(s) "
        f"for {reconstructor.config.steps} steps"
    )
    history = reconstructor.run()
    if history:
        logger.info(f"Reconstruction finished: total loss {history[0]['total']:.6g} -> {history[-1]['total']:.6g}")
    return ReconstructionResult(cloud, history)
