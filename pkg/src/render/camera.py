import math
from dataclasses import dataclass

import torch
from torch import Tensor

ORTHONORMAL_TOLERANCE = 1e-6


@dataclass(slots=True)
class Camera:
    """
    Pinhole camera with OpenCV conventions: x right, y down, z forward.

    ``rotation`` and ``translation`` map world points into camera space,
    ``x_cam = R @ x_world + t``.
    """

    intrinsics: Tensor  # (3, 3)
    rotation: Tensor  # (3, 3)
    translation: Tensor  # (3,)
    width: int
    height: int

    def __post_init__(self) -> None:
        K = self.intrinsics
        if K.shape != (3, 3) or self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("camera needs a 3x3 intrinsic matrix, 3x3 rotation and 3-vector translation")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("camera intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("camera focal lengths must be positive")
        eye = torch.eye(3, dtype=self.rotation.dtype)
        error = (self.rotation.T @ self.rotation - eye).norm().item()
        if error > ORTHONORMAL_TOLERANCE:
            raise ValueError(f"camera rotation is not orthonormal (error {error:.3g})")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def dtype(self) -> torch.dtype:
        return self.intrinsics.dtype

    @property
    def focal(self) -> Tensor:
        return (self.intrinsics[0, 0] + self.intrinsics[1, 1]) / 2.0

    @property
    def center(self) -> Tensor:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: Tensor) -> Tensor:
        return points @ self.rotation.T + self.translation

    def project(self, points_camera: Tensor) -> Tensor:
        """Camera-space points (..., 3) to pixel coordinates (..., 2)."""
        homogeneous = points_camera @ self.intrinsics.T
        return homogeneous[..., :2] / homogeneous[..., 2:3]

    def pixel_rays(self, dtype: torch.dtype | None = None) -> Tensor:
        """
        Camera-space ray directions (H, W, 3) with unit z, one per pixel.
        Pixel (i, j) looks through image point (x=j, y=i).
        """
        dtype = dtype or self.dtype
        ys, xs = torch.meshgrid(
            torch.arange(self.height, dtype=dtype),
            torch.arange(self.width, dtype=dtype),
            indexing="ij",
        )
        pixels = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1)
        inverse = torch.linalg.inv(self.intrinsics.to(dtype))
        return pixels @ inverse.T

    def to(self, dtype: torch.dtype) -> "Camera":
        return Camera(
            self.intrinsics.to(dtype), self.rotation.to(dtype), self.translation.to(dtype),
            self.width, self.height,
        )

    @classmethod
    def from_fov(cls, fov_degrees: float, width: int, height: int, **pose) -> "Camera":
        focal = 0.5 * width / math.tan(math.radians(fov_degrees) / 2)
        intrinsics = torch.tensor(
            [[focal, 0.0, (width - 1) / 2], [0.0, focal, (height - 1) / 2], [0.0, 0.0, 1.0]],
            dtype=torch.float64,
        )
        return cls.look_at(intrinsics=intrinsics, width=width, height=height, **pose)

    @classmethod
    def look_at(
        cls,
        eye: Tensor,
        target: Tensor,
        intrinsics: Tensor,
        width: int,
        height: int,
        up: Tensor | None = None,
    ) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with world ``up`` (default +y)."""
        dtype = intrinsics.dtype
        eye, target = eye.to(dtype), target.to(dtype)
        up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype) if up is None else up.to(dtype)
        forward = target - eye
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, up)
        if right.norm() < 1e-9:
            right = torch.linalg.cross(forward, torch.tensor([0.0, 0.0, 1.0], dtype=dtype))
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rotation = torch.stack([right, down, forward], dim=0)
        translation = -rotation @ eye
        return cls(intrinsics, rotation, translation, width, height)


def orbit_camera(
    center: Tensor,
    radius: float,
    azimuth_degrees: float,
    elevation_degrees: float,
    intrinsics: Tensor,
    width: int,
    height: int,
) -> Camera:
    """
    Camera on a sphere around ``center`` looking at it. Azimuth 0 lies on
    +z, increasing towards +x; positive elevation is above (+y).
    """
    azimuth = math.radians(azimuth_degrees)
    elevation = math.radians(elevation_degrees)
    offset = torch.tensor(
        [
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
            math.cos(elevation) * math.cos(azimuth),
        ],
        dtype=intrinsics.dtype,
    )
    return Camera.look_at(center + radius * offset, center, intrinsics, width, height)
