"""
Attribute fields mapping canonical positions to surfel scale and color.

``NeuralField`` is the hybrid parameterization: a multiresolution hash-grid
encoding shared by two small MLP heads. ``ExplicitAttributes`` stores one
scale and color per surfel instead and answers the same queries.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from core.config import FieldConfig

SCALE_FLOOR = 1e-8
# spatial hash primes, one per axis
HASH_PRIMES = (1, 2654435761, 805459861)
_CORNERS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


@dataclass(slots=True)
class FieldOutput:
    scale: Tensor  # (N,) > 0
    color: Tensor  # (N, 3) in (0, 1)


def inverse_softplus(value: Tensor) -> Tensor:
    return value + torch.log(-torch.expm1(-value))


class HashGridEncoding(nn.Module):
    """
    Multiresolution grid of learnable features over an axis-aligned box.

    Levels whose vertex count fits in the table are indexed densely; finer
    levels use the XOR spatial hash. Features of the 8 cell corners are
    trilinearly interpolated and concatenated across levels.
    """

    def __init__(self, config: FieldConfig, bounds_min: Tensor, bounds_max: Tensor):
        super().__init__()
        self.levels = config.levels
        self.table_size = 2**config.log2_table_size
        self.features_per_level = config.features_per_level

        if config.levels > 1:
            growth = math.exp(
                (math.log(config.max_resolution) - math.log(config.base_resolution))
                / (config.levels - 1)
            )
        else:
            growth = 1.0
        self.resolutions = [
            int(math.floor(config.base_resolution * growth**level)) for level in range(config.levels)
        ]

        extent = (bounds_max - bounds_min).clamp_min(1e-6)
        pad = config.bounds_padding * extent
        self.register_buffer("bounds_min", (bounds_min - pad).detach().clone().float())
        self.register_buffer("bounds_max", (bounds_max + pad).detach().clone().float())
        self.register_buffer("corners", torch.tensor(_CORNERS, dtype=torch.long))

        self.tables = nn.Parameter(
            torch.empty(config.levels, self.table_size, config.features_per_level).uniform_(-1e-4, 1e-4)
        )

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def normalize(self, points: Tensor) -> Tensor:
        unit = (points - self.bounds_min) / (self.bounds_max - self.bounds_min)
        return unit.clamp(0.0, 1.0)

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= self.table_size

    def _index(self, vertex: Tensor, level: int) -> Tensor:
        if self.is_dense(level):
            side = self.resolutions[level] + 1
            return vertex[..., 0] + side * vertex[..., 1] + side * side * vertex[..., 2]
        hashed = vertex[..., 0] * HASH_PRIMES[0]
        hashed = torch.bitwise_xor(hashed, vertex[..., 1] * HASH_PRIMES[1])
        hashed = torch.bitwise_xor(hashed, vertex[..., 2] * HASH_PRIMES[2])
        return torch.remainder(hashed, self.table_size)

    def _cell(self, points: Tensor, level: int) -> tuple[Tensor, Tensor]:
        resolution = self.resolutions[level]
        scaled = self.normalize(points) * resolution
        lower = torch.floor(scaled).clamp(max=resolution - 1)
        return lower.long(), scaled - lower

    def corner_indices(self, points: Tensor, level: int) -> Tensor:
        """Table rows (N, 8) read by ``points`` at ``level``."""
        lower, _ = self._cell(points, level)
        return self._index(lower[:, None, :] + self.corners, level)

    def forward(self, points: Tensor) -> Tensor:
        encoded = []
        for level in range(self.levels):
            lower, frac = self._cell(points, level)
            index = self._index(lower[:, None, :] + self.corners, level)  # (N, 8)
            features = self.tables[level][index]  # (N, 8, F)
            corner_weights = torch.where(
                self.corners.bool(), frac[:, None, :], 1.0 - frac[:, None, :]
            ).prod(-1)
            encoded.append((corner_weights[..., None] * features).sum(1))
        return torch.cat(encoded, dim=-1)


def _mlp(in_dim: int, width: int, layers: int, out_dim: int) -> nn.Sequential:
    modules: list[nn.Module] = []
    for i in range(layers):
        modules += [nn.Linear(in_dim if i == 0 else width, width), nn.ReLU()]
    modules.append(nn.Linear(width, out_dim))
    return nn.Sequential(*modules)


class NeuralField(nn.Module):
    def __init__(self, config: FieldConfig, bounds_min: Tensor, bounds_max: Tensor):
        super().__init__()
        self.encoding = HashGridEncoding(config, bounds_min, bounds_max)
        dim = self.encoding.output_dim
        self.scale_head = _mlp(dim, config.hidden_width, config.hidden_layers, 1)
        self.color_head = _mlp(dim, config.hidden_width, config.hidden_layers, 3)

    def set_scale_bias(self, scale: float) -> None:
        """Center the scale head's output on ``scale``."""
        last = self.scale_head[-1]
        with torch.no_grad():
            last.bias.fill_(float(inverse_softplus(torch.tensor(scale, dtype=torch.float64))))

    def forward(self, points: Tensor) -> FieldOutput:
        features = self.encoding(points.to(self.encoding.tables.dtype))
        scale = F.softplus(self.scale_head(features))[:, 0] + SCALE_FLOOR
        color = torch.sigmoid(self.color_head(features))
        return FieldOutput(scale, color)


class ExplicitAttributes(nn.Module):
    """Per-surfel scale and color, indexed by surfel order rather than position."""

    def __init__(self, num_surfels: int, initial_scale: Tensor | None = None):
        super().__init__()
        scale = torch.full((num_surfels,), 0.01) if initial_scale is None else initial_scale
        self.raw_scale = nn.Parameter(inverse_softplus(scale.detach().clone().float()))
        self.raw_color = nn.Parameter(torch.zeros(num_surfels, 3))

    def set_scale_bias(self, scale: float) -> None:
        with torch.no_grad():
            self.raw_scale.fill_(float(inverse_softplus(torch.tensor(scale, dtype=torch.float64))))

    def forward(self, points: Tensor) -> FieldOutput:
        if points.shape[0] != self.raw_scale.shape[0]:
            raise ValueError(
                f"explicit attributes hold {self.raw_scale.shape[0]} surfels, got {points.shape[0]} queries"
            )
        scale = F.softplus(self.raw_scale) + SCALE_FLOOR
        return FieldOutput(scale, torch.sigmoid(self.raw_color))


AttributeField = NeuralField | ExplicitAttributes


def build_field(config: FieldConfig, positions: Tensor) -> AttributeField:
    if config.parameterization == "explicit":
        return ExplicitAttributes(positions.shape[0])
    lo = positions.detach().min(0).values
    hi = positions.detach().max(0).values
    return NeuralField(config, lo, hi)
