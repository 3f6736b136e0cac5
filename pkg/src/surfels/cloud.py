import torch
from torch import Tensor, nn

from body.rotations import quaternion_to_matrix
from core.config import FieldConfig
from surfels.field import AttributeField, ExplicitAttributes, FieldOutput, NeuralField


class SurfelCloud(nn.Module):
    """
    Canonical surfels: explicit positions, orientations and occlusions,
    with scale and color read through an attribute field at every query.

    Orientations are stored as (w, x, y, z) quaternions; the surfel normal is
    the third column of the rotation they encode.
    """

    def __init__(
        self,
        positions: Tensor,
        quaternions: Tensor,
        field: AttributeField,
        skin_weights: Tensor,
        scale_labels: Tensor,
        neighbor_index: Tensor,
        occlusion: Tensor | None = None,
    ):
        super().__init__()
        n = positions.shape[0]
        for name, value in (
            ("quaternions", quaternions),
            ("skin_weights", skin_weights),
            ("scale_labels", scale_labels),
            ("neighbor_index", neighbor_index),
        ):
            if value.shape[0] != n:
                raise ValueError(f"{name} has {value.shape[0]} rows, expected {n}")

        self.positions = nn.Parameter(positions.detach().clone())
        self.quaternions = nn.Parameter(quaternions.detach().clone().to(positions.dtype))
        if occlusion is None:
            occlusion = torch.ones(n, dtype=positions.dtype)
        self.occlusion = nn.Parameter(occlusion.detach().clone().to(positions.dtype))
        self.field = field

        self.register_buffer("init_positions", positions.detach().clone())
        self.register_buffer("scale_labels", scale_labels.detach().clone().to(positions.dtype))
        self.register_buffer("skin_weights", skin_weights.detach().clone().to(positions.dtype))
        self.register_buffer("neighbor_index", neighbor_index.detach().clone().long())

    @classmethod
    def empty(
        cls,
        num_surfels: int,
        num_joints: int,
        field_config: FieldConfig,
        neighbors: int,
        dtype: torch.dtype = torch.float32,
    ) -> "SurfelCloud":
        """Correctly shaped placeholder, filled by ``load_state_dict``."""
        positions = torch.zeros(num_surfels, 3, dtype=dtype)
        if field_config.parameterization == "explicit":
            field: AttributeField = ExplicitAttributes(num_surfels)
        else:
            field = NeuralField(field_config, torch.zeros(3), torch.ones(3))
        quaternions = torch.zeros(num_surfels, 4, dtype=dtype)
        quaternions[:, 0] = 1.0
        return cls(
            positions,
            quaternions,
            field.to(dtype),
            torch.zeros(num_surfels, num_joints, dtype=dtype),
            torch.ones(num_surfels, dtype=dtype),
            torch.zeros(num_surfels, neighbors, dtype=torch.long),
        )

    @property
    def num_surfels(self) -> int:
        return self.positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.skin_weights.shape[1]

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    @property
    def extent(self) -> float:
        """Diagonal of the canonical bounding box at initialization."""
        lo = self.init_positions.min(0).values
        hi = self.init_positions.max(0).values
        return float((hi - lo).norm())

    def rotations(self) -> Tensor:
        return quaternion_to_matrix(self.quaternions)

    def normals(self) -> Tensor:
        return self.rotations()[..., 2]

    def attributes(self) -> FieldOutput:
        scale_color = self.field(self.positions)
        return FieldOutput(scale_color.scale.to(self.dtype), scale_color.color.to(self.dtype))

    def geometry_parameters(self) -> list[nn.Parameter]:
        return [self.positions, self.quaternions]

    def field_parameters(self) -> list[nn.Parameter]:
        return list(self.field.parameters())

    @torch.no_grad()
    def normalize_orientations_(self) -> None:
        self.quaternions.div_(self.quaternions.norm(dim=-1, keepdim=True))

    @torch.no_grad()
    def clamp_occlusion_(self) -> None:
        self.occlusion.clamp_(0.0, 1.0)
