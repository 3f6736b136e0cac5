"""
Scene manifests: a JSON document listing per-frame assets and parameters.

Paths are relative to the manifest's directory. Keypoint files are text
with one ``x y confidence`` row per keypoint (pixels), index-aligned with
the template regressor; lines starting with ``#`` are comments.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from assets.images import image_size, log_renormalized, read_mask, read_normal_map, read_rgb
from assets.io import atomic_write_text
from assets.scene import FrameObservation, PoseSequence
from assets.template_format import load_template
from body.kinematics import Pose
from body.template import SHAPE_DIM, BodyTemplate
from core.errors import ManifestError, TemplateError
from core.logger import logger
from render.camera import Camera

MANIFEST_VERSION = 1


class _Entry(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CameraSpec(_Entry):
    intrinsics: list[list[float]]
    rotation: list[list[float]]
    translation: list[float]


class PoseSpec(_Entry):
    axis_angle: list[list[float]]
    translation: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])


class FrameEntry(_Entry):
    index: int = Field(ge=0)
    image: str
    mask: str
    normal: str
    back_normal: str | None = None
    keypoints: str
    pose: PoseSpec
    camera: CameraSpec
    split: Literal["train", "test"] = "train"


class SceneManifest(_Entry):
    version: int = MANIFEST_VERSION
    template: str
    prompt: str = ""
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    shape: list[float] = Field(default_factory=lambda: [0.0] * SHAPE_DIM, max_length=SHAPE_DIM)
    frames: list[FrameEntry] = Field(min_length=1)
    config: dict[str, Any] = Field(default_factory=dict)


@dataclass
class Scene:
    manifest: SceneManifest
    root: Path
    template: BodyTemplate
    sequence: PoseSequence
    observations: list[FrameObservation]

    @property
    def prompt(self) -> str:
        return self.manifest.prompt


def read_keypoints(path: str | Path) -> tuple[torch.Tensor, torch.Tensor]:
    rows = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2)
    if rows.size == 0:
        rows = rows.reshape(0, 3)
    if rows.shape[1] != 3:
        raise ValueError(f"keypoint rows need 3 columns (x y confidence), got {rows.shape[1]}")
    return torch.from_numpy(rows[:, :2].copy()), torch.from_numpy(rows[:, 2].copy())


def write_keypoints(path: str | Path, keypoints: torch.Tensor, confidences: torch.Tensor) -> Path:
    lines = ["# x y confidence"]
    for (x, y), c in zip(keypoints.tolist(), confidences.tolist()):
        lines.append(f"{x:.6f} {y:.6f} {c:.6f}")
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path: str | Path, manifest: SceneManifest) -> Path:
    return atomic_write_text(path, manifest.model_dump_json(indent=2, exclude_none=True))


def parse_manifest(path: str | Path) -> SceneManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError([f"manifest file not found: {path}"], str(path))
    try:
        return SceneManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ManifestError(problems, str(path)) from e


def _check_frame_files(entry: FrameEntry, root: Path, manifest: SceneManifest, problems: list[str]) -> None:
    paths = {"image": entry.image, "mask": entry.mask, "normal": entry.normal, "keypoints": entry.keypoints}
    if entry.back_normal is not None:
        paths["back_normal"] = entry.back_normal
    for kind, relative in paths.items():
        file = root / relative
        if not file.is_file():
            problems.append(f"frame {entry.index}: missing {kind} file {file}")
            continue
        if kind == "keypoints":
            continue
        try:
            size = image_size(file)
        except FileNotFoundError:
            problems.append(f"frame {entry.index}: unreadable {kind} image {file}")
            continue
        if size != (manifest.height, manifest.width):
            problems.append(
                f"frame {entry.index}: {kind} {file} is {size[1]}x{size[0]}, "
                f"expected {manifest.width}x{manifest.height}"
            )


def _camera(entry: FrameEntry, manifest: SceneManifest) -> Camera:
    spec = entry.camera
    return Camera(
        torch.tensor(spec.intrinsics, dtype=torch.float64),
        torch.tensor(spec.rotation, dtype=torch.float64),
        torch.tensor(spec.translation, dtype=torch.float64),
        manifest.width,
        manifest.height,
    )


def _pose(entry: FrameEntry) -> Pose:
    return Pose(
        torch.tensor(entry.pose.axis_angle, dtype=torch.float64).reshape(-1, 3),
        torch.tensor(entry.pose.translation, dtype=torch.float64),
    )


def load_manifest(path: str | Path) -> Scene:
    """
    Parse and validate a manifest and load every asset it references.
    All problems are collected before rejecting the manifest.
    """
    path = Path(path)
    manifest = parse_manifest(path)
    root = path.parent
    problems: list[str] = []

    if manifest.version != MANIFEST_VERSION:
        problems.append(f"unsupported manifest version {manifest.version}")
    indices = [frame.index for frame in manifest.frames]
    if sorted(indices) != list(range(len(indices))):
        problems.append(f"frame indices must be contiguous from 0, got {sorted(indices)}")

    template: BodyTemplate | None = None
    try:
        template = load_template(root / manifest.template)
    except TemplateError as e:
        problems.append(str(e))

    for entry in manifest.frames:
        _check_frame_files(entry, root, manifest, problems)
        if template is not None and len(entry.pose.axis_angle) != template.num_joints:
            problems.append(
                f"frame {entry.index}: pose has {len(entry.pose.axis_angle)} joints, "
                f"template has {template.num_joints}"
            )
        if len(entry.pose.translation) != 3:
            problems.append(f"frame {entry.index}: pose translation needs 3 values")
        keypoint_file = root / entry.keypoints
        if template is not None and keypoint_file.is_file():
            try:
                keypoints, _ = read_keypoints(keypoint_file)
                if keypoints.shape[0] != template.num_keypoints:
                    problems.append(
                        f"frame {entry.index}: {keypoints.shape[0]} keypoints in {keypoint_file}, "
                        f"template declares {template.num_keypoints}"
                    )
            except ValueError as e:
                problems.append(f"frame {entry.index}: bad keypoint file {keypoint_file}: {e}")
        try:
            _camera(entry, manifest)
        except (ValueError, RuntimeError) as e:
            problems.append(f"frame {entry.index}: invalid camera: {e}")
    if problems:
        raise ManifestError(problems, str(path))
    assert template is not None

    entries = sorted(manifest.frames, key=lambda frame: frame.index)
    observations = []
    for entry in entries:
        normal, fixed = read_normal_map(root / entry.normal)
        log_renormalized(root / entry.normal, fixed)
        back_normal = None
        if entry.back_normal is not None:
            back_normal, fixed = read_normal_map(root / entry.back_normal)
            log_renormalized(root / entry.back_normal, fixed)
        keypoints, confidences = read_keypoints(root / entry.keypoints)
        observations.append(
            FrameObservation(
                index=entry.index,
                camera=_camera(entry, manifest),
                image=read_rgb(root / entry.image),
                mask=read_mask(root / entry.mask),
                normal=normal,
                back_normal=back_normal,
                keypoints=keypoints,
                confidences=confidences,
                split=entry.split,
            )
        )
    sequence = PoseSequence(
        torch.tensor(manifest.shape, dtype=torch.float64),
        [_pose(entry) for entry in entries],
        [obs.camera for obs in observations],
    )
    logger.info(f"Loaded {len(observations)} frame(s) from {path}")
    return Scene(manifest, root, template, sequence, observations)
