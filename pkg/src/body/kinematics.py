"""
Forward kinematics and linear blend skinning.

Bone transforms map canonical (rest) coordinates to posed coordinates, so a
rest pose yields identity bones and skinning is the identity on the cloud.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from body.rotations import gram_schmidt, rodrigues
from body.template import BodyTemplate

BIND_NEIGHBORS = 30
BIND_EPSILON = 1e-8


@dataclass(slots=True)
class Pose:
    """Per-joint axis-angle rotations (J, 3) in radians and a root translation (3,)."""

    axis_angle: Tensor
    translation: Tensor

    def __post_init__(self) -> None:
        if self.axis_angle.ndim != 2 or self.axis_angle.shape[1] != 3:
            raise ValueError(f"axis_angle must be (J, 3), got {tuple(self.axis_angle.shape)}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {tuple(self.translation.shape)}")
        if not (torch.isfinite(self.axis_angle).all() and torch.isfinite(self.translation).all()):
            raise ValueError("pose contains non-finite values")

    @classmethod
    def rest(cls, num_joints: int, dtype: torch.dtype = torch.float64) -> "Pose":
        return cls(torch.zeros(num_joints, 3, dtype=dtype), torch.zeros(3, dtype=dtype))

    @property
    def num_joints(self) -> int:
        return self.axis_angle.shape[0]

    def detach(self) -> "Pose":
        return Pose(self.axis_angle.detach().clone(), self.translation.detach().clone())


@dataclass(slots=True)
class BoneTransforms:
    """Rigid transforms x -> R x + t, one per joint."""

    rotations: Tensor  # (J, 3, 3)
    translations: Tensor  # (J, 3)

    @classmethod
    def identity(cls, num_joints: int, dtype: torch.dtype = torch.float64) -> "BoneTransforms":
        return cls(
            torch.eye(3, dtype=dtype).expand(num_joints, 3, 3).clone(),
            torch.zeros(num_joints, 3, dtype=dtype),
        )

    @property
    def num_joints(self) -> int:
        return self.rotations.shape[0]

    def matrices(self) -> Tensor:
        """Homogeneous (J, 4, 4) form."""
        J = self.num_joints
        top = torch.cat([self.rotations, self.translations[:, :, None]], dim=2)
        bottom = torch.zeros(J, 1, 4, dtype=top.dtype)
        bottom[:, 0, 3] = 1.0
        return torch.cat([top, bottom], dim=1)

    def then(self, rotation: Tensor, translation: Tensor) -> "BoneTransforms":
        """Apply a rigid transform after every bone."""
        return BoneTransforms(
            rotation @ self.rotations,
            self.translations @ rotation.T + translation,
        )

    def detach(self) -> "BoneTransforms":
        return BoneTransforms(self.rotations.detach(), self.translations.detach())

    def to(self, dtype: torch.dtype) -> "BoneTransforms":
        return BoneTransforms(self.rotations.to(dtype), self.translations.to(dtype))

    def joint_position(self, rest_joint: Tensor, joint: int = 0) -> Tensor:
        """Posed location of a joint given its rest (shaped) location."""
        return self.rotations[joint] @ rest_joint.to(self.rotations.dtype) + self.translations[joint]


@dataclass(slots=True)
class PosedSurfels:
    positions: Tensor  # (N, 3)
    rotations: Tensor  # (N, 3, 3)

    @property
    def normals(self) -> Tensor:
        return self.rotations[..., 2]


def bone_transforms(template: BodyTemplate, shape: Tensor, pose: Pose) -> BoneTransforms:
    """
    Compose local joint rotations down the kinematic tree.

    Joint ``j`` rotates about its shape-adjusted rest location; the root
    additionally carries the pose translation. The returned transforms are
    relative to the canonical pose.
    """
    if pose.num_joints != template.num_joints:
        raise ValueError(f"pose has {pose.num_joints} joints, template has {template.num_joints}")
    dtype = template.dtype
    joints = template.shaped_joints(shape)
    local = rodrigues(pose.axis_angle.to(dtype))
    parents = template.parents.tolist()

    world_rotations: list[Tensor | None] = [None] * template.num_joints
    world_origins: list[Tensor | None] = [None] * template.num_joints
    for j in template.joint_order:
        parent = parents[j]
        if parent == -1:
            world_rotations[j] = local[j]
            world_origins[j] = joints[j] + pose.translation.to(dtype)
        else:
            parent_rotation = world_rotations[parent]
            world_rotations[j] = parent_rotation @ local[j]
            world_origins[j] = parent_rotation @ (joints[j] - joints[parent]) + world_origins[parent]

    rotations = torch.stack(world_rotations)  # type: ignore[arg-type]
    origins = torch.stack(world_origins)  # type: ignore[arg-type]
    translations = origins - (rotations @ joints[:, :, None])[..., 0]
    return BoneTransforms(rotations, translations)


def blend(weights: Tensor, bones: BoneTransforms) -> tuple[Tensor, Tensor]:
    """Weighted sums of the bone matrices: (N, 3, 3) and (N, 3)."""
    rotation = torch.einsum("nj,jab->nab", weights, bones.rotations)
    translation = weights @ bones.translations
    return rotation, translation


def skin_points(points: Tensor, weights: Tensor, bones: BoneTransforms) -> Tensor:
    rotation, translation = blend(weights, bones)
    return (rotation @ points[:, :, None])[..., 0] + translation


def skin_surfels(
    positions: Tensor,
    rotations: Tensor,
    weights: Tensor,
    bones: BoneTransforms,
) -> PosedSurfels:
    """
    Pose canonical surfels with their blended bone transform. Positions use
    the blended matrix as is; orientations use its projection onto SO(3).
    """
    blended, translation = blend(weights, bones)
    posed_positions = (blended @ positions[:, :, None])[..., 0] + translation
    posed_rotations = gram_schmidt(blended) @ rotations
    return PosedSurfels(posed_positions, posed_rotations)


def bind_weights(
    points: Tensor,
    template: BodyTemplate,
    neighbors: int = BIND_NEIGHBORS,
    eps: float = BIND_EPSILON,
) -> Tensor:
    """
    Skinning weights for arbitrary canonical points: inverse-distance
    average of the weight rows of the ``neighbors`` nearest template vertices.
    """
    if neighbors > template.num_vertices:
        raise ValueError(
            f"cannot bind to {neighbors} neighbors, template has {template.num_vertices} vertices"
        )
    vertices = template.vertices.detach().cpu().numpy().astype(np.float64)
    query = points.detach().cpu().numpy().astype(np.float64)
    distances, index = cKDTree(vertices).query(query, k=neighbors)
    if neighbors == 1:
        distances, index = distances[:, None], index[:, None]

    affinity = 1.0 / (distances + eps)
    affinity /= affinity.sum(axis=1, keepdims=True)
    rows = template.weights.detach().cpu().numpy().astype(np.float64)[index]  # (N, K, J)
    bound = np.einsum("nk,nkj->nj", affinity, rows)
    bound /= bound.sum(axis=1, keepdims=True)
    return torch.from_numpy(bound).to(points.dtype)
