"""Small builders shared by the test modules."""

import torch

from assets.scene import FrameObservation, PoseSequence
from assets.synthetic import front_camera, random_poses
from body.template import SHAPE_DIM, BodyTemplate
from core.config import FieldConfig
from optim.reconstruction import BACK_REQUEST, FRONT_REQUEST
from render.camera import Camera
from render.rasterizer import render
from surfels.cloud import SurfelCloud


def small_field_config(**overrides) -> FieldConfig:
    """A hash grid small enough to train in a unit test."""
    values = dict(
        levels=4,
        log2_table_size=12,
        features_per_level=2,
        base_resolution=4,
        max_resolution=32,
        hidden_width=16,
        hidden_layers=1,
    )
    values.update(overrides)
    return FieldConfig(**values)


def identity_camera(width: int = 64, height: int = 64, focal: float = 60.0) -> Camera:
    """Camera at the origin looking down +z, principal point at the image center."""
    intrinsics = torch.tensor(
        [[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]],
        dtype=torch.float64,
    )
    return Camera(intrinsics, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), width, height)


def rendered_scene(
    cloud: SurfelCloud,
    template: BodyTemplate,
    frames: int = 2,
    size: int = 32,
    back_normals: bool = False,
    seed: int = 0,
) -> tuple[PoseSequence, list[FrameObservation]]:
    """Observations rendered in memory from ``cloud``, without image quantization."""
    center = template.vertices.mean(0)
    poses = random_poses(template, frames, 0.2, seed)
    cameras = [front_camera(center, 3.0, 20.0 * t, size, size) for t in range(frames)]
    sequence = PoseSequence(torch.zeros(SHAPE_DIM, dtype=torch.float64), poses, cameras)
    observations = []
    with torch.no_grad():
        for t in range(frames):
            bones = sequence.bones(template, t)
            front = render(cloud, bones, cameras[t], FRONT_REQUEST)
            back = render(cloud, bones, cameras[t], BACK_REQUEST)["back_normal"] if back_normals else None
            observations.append(
                FrameObservation(
                    index=t,
                    camera=cameras[t],
                    image=front["rgb"].clone(),
                    mask=front["mask"].clone(),
                    normal=front["normal"].clone(),
                    back_normal=back,
                )
            )
    return sequence, observations
