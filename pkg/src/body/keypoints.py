from dataclasses import dataclass

import torch
from torch import Tensor

from body.kinematics import Pose, bone_transforms, skin_points
from body.template import BodyTemplate
from render.camera import Camera

NEAR_PLANE = 1e-6


@dataclass(slots=True)
class KeypointProjection:
    pixels: Tensor  # (K, 2)
    depth: Tensor  # (K,) camera-space z
    valid: Tensor  # (K,) bool, False behind the camera


def project_points(points: Tensor, camera: Camera) -> KeypointProjection:
    camera_points = camera.world_to_camera(points)
    depth = camera_points[:, 2]
    valid = depth > NEAR_PLANE
    # keep the division finite for invalid points; their residuals are masked out
    safe = torch.where(valid[:, None], camera_points, torch.ones_like(camera_points))
    return KeypointProjection(camera.project(safe), depth, valid)


def posed_keypoints(template: BodyTemplate, shape: Tensor, pose: Pose) -> Tensor:
    """3D keypoints (K, 3) after shaping and posing the template."""
    bones = bone_transforms(template, shape, pose)
    used = template.regressor.abs().sum(0) > 0
    vertices = template.shaped_vertices(shape)[used]
    posed = skin_points(vertices, template.weights[used], bones)
    return template.regressor[:, used] @ posed


def regress_keypoints(
    template: BodyTemplate,
    shape: Tensor,
    pose: Pose,
    camera: Camera,
) -> KeypointProjection:
    """
    Pixel locations of the template's keypoints for one frame.
    Differentiable w.r.t. ``shape`` and ``pose``.
    """
    return project_points(posed_keypoints(template, shape, pose), camera.to(template.dtype))
