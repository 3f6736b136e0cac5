"""Geometric regularizers on the surfel cloud and its renders."""

from dataclasses import dataclass

import torch
from torch import Tensor

from core.config import LossWeights
from render.camera import Camera
from surfels.cloud import SurfelCloud
from surfels.field import FieldOutput

COVERED = 0.5


def depth_normals(depth: Tensor, camera: Camera) -> tuple[Tensor, Tensor]:
    """
    Camera-space normals (H-1, W-1, 3) from forward differences of the
    back-projected depth map, oriented toward the camera for front-facing
    surfaces, and the (unnormalized) result's validity.
    """
    depth = depth.reshape(depth.shape[0], depth.shape[1])
    points = camera.pixel_rays(depth.dtype) * depth[..., None]
    dx = points[:-1, 1:] - points[:-1, :-1]
    dy = points[1:, :-1] - points[:-1, :-1]
    normals = torch.linalg.cross(dy, dx, dim=-1)
    length = normals.norm(dim=-1, keepdim=True)
    nonzero = length[..., 0] > 0
    return normals / torch.where(length > 0, length, torch.ones_like(length)), nonzero


def normal_depth_consistency(normal: Tensor, depth: Tensor, alpha: Tensor, camera: Camera) -> Tensor:
    """Mean 1 - cos between rendered normals and depth-derived normals over covered pixels."""
    derived, nonzero = depth_normals(depth, camera)
    covered = alpha > COVERED
    valid = covered[:-1, :-1] & covered[1:, :-1] & covered[:-1, 1:] & nonzero
    count = valid.sum()
    if int(count) == 0:
        return depth.new_zeros(())
    rendered = normal[:-1, :-1]
    cosine = (rendered * derived).sum(-1)
    return (1.0 - cosine)[valid].sum() / count


def curvature_loss(normals: Tensor, neighbor_index: Tensor) -> Tensor:
    """Mean 1 - cos between each surfel normal and its canonical neighbours' normals."""
    if neighbor_index.shape[1] == 0:
        return normals.new_zeros(())
    cosine = (normals[:, None, :] * normals[neighbor_index]).sum(-1)
    return (1.0 - cosine).mean()


def offset_loss(positions: Tensor, init_positions: Tensor) -> Tensor:
    return ((positions - init_positions) ** 2).sum(-1).mean()


def scale_loss(scale: Tensor, labels: Tensor) -> Tensor:
    return ((scale - labels) ** 2).mean()


@dataclass(slots=True)
class RegularizerTerms:
    normal_depth: Tensor
    curvature: Tensor
    offset: Tensor
    scale: Tensor

    def weighted(self, weights: LossWeights) -> Tensor:
        return (
            weights.normal_depth * self.normal_depth
            + weights.curvature * self.curvature
            + weights.offset * self.offset
            + weights.scale * self.scale
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "normal_depth": float(self.normal_depth.detach()),
            "curvature": float(self.curvature.detach()),
            "offset": float(self.offset.detach()),
            "scale": float(self.scale.detach()),
        }


def regularizers(
    cloud: SurfelCloud,
    normal: Tensor,
    depth: Tensor,
    alpha: Tensor,
    camera: Camera,
    attributes: FieldOutput | None = None,
) -> RegularizerTerms:
    """All four regularizers for one rendered view; ``normal`` and ``depth`` are (H, W, C) renders."""
    attributes = attributes or cloud.attributes()
    return RegularizerTerms(
        normal_depth=normal_depth_consistency(normal, depth, alpha, camera.to(depth.dtype)),
        curvature=curvature_loss(cloud.normals(), cloud.neighbor_index),
        offset=offset_loss(cloud.positions, cloud.init_positions),
        scale=scale_loss(attributes.scale, cloud.scale_labels),
    )
