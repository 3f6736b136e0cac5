from dataclasses import dataclass, field
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor

Channel = Literal["rgb", "mask", "depth", "normal", "back_normal", "occlusion"]
CHANNEL_WIDTH: dict[str, int] = {
    "rgb": 3,
    "mask": 1,
    "depth": 1,
    "normal": 3,
    "back_normal": 3,
    "occlusion": 1,
}


class RenderRequest(BaseModel):
    """Which channels to composite, in what depth order, over which backgrounds."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: tuple[Channel, ...] = Field(min_length=1)
    order: Literal["ascending", "descending"] = "ascending"
    culling: bool = False
    background: dict[Channel, float | tuple[float, float, float]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _consistent(self) -> "RenderRequest":
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"duplicate channels in {self.channels}")
        if "back_normal" in self.channels and self.order != "descending":
            raise ValueError("back_normal must be composited in descending depth order")
        if "occlusion" in self.channels and not self.culling:
            raise ValueError("occlusion must be rendered with back-face culling")
        for channel, value in self.background.items():
            width = CHANNEL_WIDTH[channel]
            if isinstance(value, tuple) and len(value) != width:
                raise ValueError(f"background for {channel} needs {width} value(s)")
        return self

    def background_for(self, channel: str, dtype: torch.dtype) -> Tensor:
        value = self.background.get(channel, 0.0)  # type: ignore[call-overload]
        width = CHANNEL_WIDTH[channel]
        if isinstance(value, tuple):
            return torch.tensor(value, dtype=dtype)
        return torch.full((width,), float(value), dtype=dtype)


@dataclass(slots=True)
class SurfelBatch:
    """Posed surfels in world space, ready for rasterization."""

    positions: Tensor  # (N, 3)
    rotations: Tensor  # (N, 3, 3)
    scale: Tensor  # (N,)
    color: Tensor  # (N, 3)
    occlusion: Tensor  # (N,)

    @property
    def num_surfels(self) -> int:
        return self.positions.shape[0]


@dataclass(slots=True)
class RenderOutput:
    """
    Rendered images, each (H, W, C), and the accumulated opacity (H, W).
    ``inputs`` keeps the differentiable tensors the render was built from.
    """

    images: dict[str, Tensor]
    alpha: Tensor
    inputs: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, channel: str) -> Tensor:
        return self.images[channel]

    @property
    def channels(self) -> list[str]:
        return list(self.images)
