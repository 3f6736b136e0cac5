"""
Per-surfel occlusion estimation.

Occlusion maps are rendered front to back with back-face culling, and their
L1 norm is minimized with respect to the occlusion values only. Surfels seen
by some training camera are driven to zero; surfels never seen keep their
initial value of one.
"""

from dataclasses import dataclass, field

import torch
from torch import Tensor

from body.kinematics import BoneTransforms
from core.config import OcclusionConfig
from core.logger import logger
from optim.adam import Adam
from render.camera import Camera
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud

OCCLUSION_REQUEST = RenderRequest(channels=("occlusion",), order="ascending", culling=True)


@dataclass
class OcclusionResult:
    occlusion: Tensor
    losses: list[float] = field(default_factory=list)


class OcclusionEstimator:
    """Owns the occlusion optimizer; geometry and field parameters are never touched."""

    def __init__(self, cloud: SurfelCloud, config: OcclusionConfig | None = None):
        self.cloud = cloud
        self.config = config or OcclusionConfig()
        self.optimizer = Adam([{"params": [cloud.occlusion], "name": "occlusion"}], lr=self.config.learning_rate)

    def loss(self, bones: BoneTransforms | None, camera: Camera) -> Tensor:
        output = render(self.cloud, bones, camera, OCCLUSION_REQUEST, detach_geometry=True)
        return output["occlusion"].abs().mean()

    def step(self, bones: BoneTransforms | None, camera: Camera) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.loss(bones, camera)
        loss.backward()
        self.optimizer.step()
        self.cloud.clamp_occlusion_()
        return float(loss.detach())

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state)


def estimate_occlusion(
    cloud: SurfelCloud,
    views: list[tuple[BoneTransforms | None, Camera]],
    config: OcclusionConfig | None = None,
) -> OcclusionResult:
    """
    Post-hoc mode for fixed geometry: cycle through ``views`` (bones and
    camera per training frame) for ``config.steps`` steps.
    """
    config = config or OcclusionConfig()
    result = OcclusionResult(cloud.occlusion.detach().clone())
    if not views or config.steps == 0:
        return result
    estimator = OcclusionEstimator(cloud, config)
    for step in range(config.steps):
        bones, camera = views[step % len(views)]
        result.losses.append(estimator.step(bones, camera))
    result.occlusion = cloud.occlusion.detach().clone()
    logger.info(
        f"Occlusion estimated over {len(views)} view(s) in {config.steps} steps: "
        f"mean occlusion {float(result.occlusion.mean()):.4f}"
    )
    return result
