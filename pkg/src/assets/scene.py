from dataclasses import dataclass, field
from typing import Literal

import torch
from torch import Tensor

from body.kinematics import BoneTransforms, Pose, bone_transforms
from body.template import SHAPE_DIM, BodyTemplate
from render.camera import Camera

Split = Literal["train", "test"]


@dataclass(slots=True)
class FrameObservation:
    """
    One captured frame. Images are (H, W, C) in [0, 1]; normal maps are
    camera-space unit vectors, front-visible normals pointing toward -z.
    """

    index: int
    camera: Camera
    image: Tensor  # (H, W, 3)
    mask: Tensor  # (H, W, 1)
    normal: Tensor  # (H, W, 3)
    back_normal: Tensor | None = None  # (H, W, 3)
    keypoints: Tensor = field(default_factory=lambda: torch.zeros(0, 2))  # (K, 2) pixels
    confidences: Tensor = field(default_factory=lambda: torch.zeros(0))  # (K,)
    split: Split = "train"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def normal_valid(self) -> Tensor:
        return (self.mask[..., 0] > 0.5) & (self.normal.norm(dim=-1) > 0)

    def back_normal_valid(self) -> Tensor | None:
        if self.back_normal is None:
            return None
        return (self.mask[..., 0] > 0.5) & (self.back_normal.norm(dim=-1) > 0)


@dataclass(slots=True)
class PoseSequence:
    """Shared shape coefficients with per-frame poses and cameras."""

    shape: Tensor  # (10,)
    poses: list[Pose]
    cameras: list[Camera]

    def __post_init__(self) -> None:
        if len(self.poses) != len(self.cameras):
            raise ValueError(f"{len(self.poses)} poses but {len(self.cameras)} cameras")
        if self.shape.ndim != 1 or self.shape.shape[0] > SHAPE_DIM:
            raise ValueError(f"shape must be a vector of at most {SHAPE_DIM} coefficients")

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def bones(self, template: BodyTemplate, frame: int) -> BoneTransforms:
        return bone_transforms(template, self.shape, self.poses[frame])

    def detach(self) -> "PoseSequence":
        return PoseSequence(self.shape.detach().clone(), [p.detach() for p in self.poses], self.cameras)

    def subset(self, frames: list[int]) -> "PoseSequence":
        return PoseSequence(self.shape, [self.poses[i] for i in frames], [self.cameras[i] for i in frames])

    def flatten(self) -> Tensor:
        """Shape, then per frame the axis-angle block and translation, as one vector."""
        parts = [self.shape.reshape(-1)]
        for pose in self.poses:
            parts += [pose.axis_angle.reshape(-1), pose.translation.reshape(-1)]
        return torch.cat(parts)

    def unflatten(self, vector: Tensor) -> "PoseSequence":
        """Inverse of :meth:`flatten` with this sequence's sizes."""
        offset = self.shape.numel()
        shape = vector[:offset]
        poses = []
        for pose in self.poses:
            joints = pose.axis_angle.numel()
            axis_angle = vector[offset : offset + joints].reshape(pose.axis_angle.shape)
            translation = vector[offset + joints : offset + joints + 3]
            offset += joints + 3
            poses.append(Pose(axis_angle, translation))
        return PoseSequence(shape, poses, self.cameras)
