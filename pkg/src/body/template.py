from dataclasses import dataclass, field

import torch
from torch import Tensor

from core.errors import TemplateError

SHAPE_DIM = 10
ROW_SUM_TOLERANCE = 1e-6


@dataclass(slots=True)
class BodyTemplate:
    """
    Rest-pose body mesh with its kinematic tree and skinning data.

    ``parents[j]`` is the parent joint of ``j`` (-1 for the root).
    ``shape_basis`` holds per-vertex offsets for up to ten shape
    coefficients (S may be zero). ``regressor`` maps vertices to keypoints.
    """

    vertices: Tensor  # (V, 3) meters
    faces: Tensor  # (F, 3) long
    parents: Tensor  # (J,) long
    joints: Tensor  # (J, 3) rest joint locations
    weights: Tensor  # (V, J)
    regressor: Tensor  # (K, V)
    shape_basis: Tensor = field(default_factory=lambda: torch.zeros(0, 3, 0))  # (V, 3, S)
    vertex_normals: Tensor | None = None  # (V, 3), optional
    _order: list[int] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.shape_basis.numel() == 0:
            self.shape_basis = torch.zeros(
                self.vertices.shape[0], 3, 0, dtype=self.vertices.dtype
            )
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.regressor.shape[0]

    @property
    def num_shape_components(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def dtype(self) -> torch.dtype:
        return self.vertices.dtype

    @property
    def joint_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        return self._order

    def validate(self) -> None:
        V, J = self.num_vertices, self.num_joints
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise TemplateError(f"vertices must be (V, 3), got {tuple(self.vertices.shape)}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise TemplateError(f"faces must be (F, 3), got {tuple(self.faces.shape)}")
        if self.faces.numel() and (self.faces.min() < 0 or self.faces.max() >= V):
            raise TemplateError("face indices out of range")
        if self.parents.shape != (J,):
            raise TemplateError(f"parents must have one entry per joint ({J})")
        if self.weights.shape != (V, J):
            raise TemplateError(f"weights must be ({V}, {J}), got {tuple(self.weights.shape)}")
        if self.regressor.ndim != 2 or self.regressor.shape[1] != V:
            raise TemplateError(f"regressor must be (K, {V}), got {tuple(self.regressor.shape)}")
        if self.shape_basis.shape[:2] != (V, 3) or self.shape_basis.shape[2] > SHAPE_DIM:
            raise TemplateError(f"shape basis must be ({V}, 3, S<={SHAPE_DIM})")

        self._order = self._topological_order()

        if (self.weights < 0).any():
            raise TemplateError("skinning weights must be nonnegative")
        weight_error = (self.weights.sum(1) - 1.0).abs().max().item() if V else 0.0
        if weight_error > ROW_SUM_TOLERANCE:
            raise TemplateError(f"skinning weight rows must sum to 1 (max error {weight_error:.3g})")
        if self.num_keypoints:
            regressor_error = (self.regressor.sum(1) - 1.0).abs().max().item()
            if regressor_error > ROW_SUM_TOLERANCE:
                raise TemplateError(
                    f"keypoint regressor rows must sum to 1 (max error {regressor_error:.3g})"
                )

    def _topological_order(self) -> list[int]:
        parents = [int(p) for p in self.parents.tolist()]
        roots = [j for j, p in enumerate(parents) if p == -1]
        if len(roots) != 1:
            raise TemplateError(f"kinematic tree needs exactly one root, found {len(roots)}")
        children: dict[int, list[int]] = {j: [] for j in range(len(parents))}
        for j, p in enumerate(parents):
            if p == -1:
                continue
            if not 0 <= p < len(parents) or p == j:
                raise TemplateError(f"joint {j} has invalid parent {p}")
            children[p].append(j)

        order: list[int] = []
        stack = [roots[0]]
        while stack:
            joint = stack.pop()
            order.append(joint)
            stack.extend(reversed(children[joint]))
        if len(order) != len(parents):
            raise TemplateError("kinematic tree contains a cycle or disconnected joints")
        return order

    def _padded_shape(self, shape: Tensor) -> Tensor:
        return shape[: self.num_shape_components].to(self.dtype)

    def shaped_vertices(self, shape: Tensor) -> Tensor:
        if self.num_shape_components == 0:
            return self.vertices
        return self.vertices + self.shape_basis @ self._padded_shape(shape)

    def shaped_joints(self, shape: Tensor) -> Tensor:
        """
        Rest joints moved by the shape coefficients: each joint follows the
        skinning-weighted mean of its vertices' shape offsets.
        """
        if self.num_shape_components == 0:
            return self.joints
        offsets = self.shape_basis @ self._padded_shape(shape)  # (V, 3)
        mass = self.weights.sum(0)  # (J,)
        joint_offsets = (self.weights.T @ offsets) / mass.clamp_min(1e-12)[:, None]
        joint_offsets = torch.where(mass[:, None] > 0, joint_offsets, torch.zeros_like(joint_offsets))
        return self.joints + joint_offsets

    def to(self, dtype: torch.dtype) -> "BodyTemplate":
        return BodyTemplate(
            vertices=self.vertices.to(dtype),
            faces=self.faces,
            parents=self.parents,
            joints=self.joints.to(dtype),
            weights=self.weights.to(dtype),
            regressor=self.regressor.to(dtype),
            shape_basis=self.shape_basis.to(dtype),
            vertex_normals=None if self.vertex_normals is None else self.vertex_normals.to(dtype),
        )
