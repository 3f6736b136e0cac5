"""
Stage checkpoints.

A checkpoint is a ``torch.save`` dictionary written atomically. It carries
the surfel cloud (explicit arrays, field parameters, bindings), the pose
sequence without cameras (those come from the manifest), the optimizer and
sampling state of the stage that produced it, and the global RNG state.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from assets.io import atomic_torch_save
from assets.scene import PoseSequence
from body.kinematics import Pose
from core.config import FieldConfig
from core.errors import CheckpointError
from render.camera import Camera
from surfels.cloud import SurfelCloud

FORMAT = "soar-checkpoint"
VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Checkpoint:
    stage: str
    cloud: SurfelCloud | None
    shape: torch.Tensor
    axis_angle: torch.Tensor  # (T, J, 3)
    translation: torch.Tensor  # (T, 3)
    trainer_state: dict[str, Any] | None
    rng_state: torch.Tensor
    seed: int
    field_config: FieldConfig | None

    def sequence(self, cameras: list[Camera]) -> PoseSequence:
        if len(cameras) != self.axis_angle.shape[0]:
            raise CheckpointError(
                f"checkpoint holds {self.axis_angle.shape[0]} frame(s) but {len(cameras)} camera(s) were given"
            )
        poses = [Pose(a.clone(), t.clone()) for a, t in zip(self.axis_angle, self.translation)]
        return PoseSequence(self.shape.clone(), poses, cameras)


def _dtype_name(dtype: torch.dtype) -> str:
    return str(dtype).removeprefix("torch.")


def save_checkpoint(
    path: str | Path,
    stage: str,
    sequence: PoseSequence,
    cloud: SurfelCloud | None = None,
    field_config: FieldConfig | None = None,
    trainer_state: dict[str, Any] | None = None,
    seed: int = 0,
) -> Path:
    payload: dict[str, Any] = {
        "format": FORMAT,
        "version": VERSION,
        "stage": stage,
        "seed": seed,
        "sequence": {
            "shape": sequence.shape.detach().clone(),
            "axis_angle": torch.stack([p.axis_angle.detach() for p in sequence.poses]).clone(),
            "translation": torch.stack([p.translation.detach() for p in sequence.poses]).clone(),
        },
        "cloud": None,
        "trainer": trainer_state,
        "rng": torch.get_rng_state(),
    }
    if cloud is not None:
        if field_config is None:
            raise ValueError("saving a cloud needs its field config")
        payload["cloud"] = {
            "num_surfels": cloud.num_surfels,
            "num_joints": cloud.num_joints,
            "neighbors": cloud.neighbor_index.shape[1],
            "dtype": _dtype_name(cloud.dtype),
            "field_config": field_config.model_dump(),
            "state": {k: v.detach().clone() for k, v in cloud.state_dict().items()},
        }
    return atomic_torch_save(path, payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")

    cloud = None
    field_config = None
    if payload["cloud"] is not None:
        meta = payload["cloud"]
        field_config = FieldConfig.model_validate(meta["field_config"])
        cloud = SurfelCloud.empty(
            meta["num_surfels"], meta["num_joints"], field_config, meta["neighbors"], _DTYPES[meta["dtype"]]
        )
        try:
            cloud.load_state_dict(meta["state"])
        except RuntimeError as e:
            raise CheckpointError(f"{path}: cloud state does not fit: {e}") from e

    sequence = payload["sequence"]
    return Checkpoint(
        stage=payload["stage"],
        cloud=cloud,
        shape=sequence["shape"],
        axis_angle=sequence["axis_angle"],
        translation=sequence["translation"],
        trainer_state=payload["trainer"],
        rng_state=payload["rng"],
        seed=int(payload["seed"]),
        field_config=field_config,
    )
