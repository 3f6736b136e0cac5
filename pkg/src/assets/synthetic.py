"""
Synthetic bodies and scenes for tests and local experiments.

``chain_template`` builds an upright capsule skinned to a chain of joints
along +y. ``write_synthetic_scene`` renders a surfel avatar of such a body
from cameras in front of it and writes a complete manifest scene: color
images, masks, front and back normal maps, exact keypoints and poses.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from assets.images import write_mask, write_normal_map, write_rgb
from assets.manifest import (
    CameraSpec,
    FrameEntry,
    PoseSpec,
    SceneManifest,
    write_keypoints,
    write_manifest,
)
from assets.scene import PoseSequence
from assets.template_format import save_template
from body.keypoints import regress_keypoints
from body.kinematics import Pose
from body.template import SHAPE_DIM, BodyTemplate
from core.config import FieldConfig, SurfelInitConfig
from core.logger import logger
from render.camera import Camera
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud
from surfels.initialize import init_from_template, pretrain_field

TEMPLATE_FILE = "template.soartpl"
FRONT_REQUEST = RenderRequest(channels=("rgb", "mask", "normal"), order="ascending")
BACK_REQUEST = RenderRequest(channels=("back_normal",), order="descending")


def capsule_mesh(
    radius: float, length: float, sections: int = 16, cap_rings: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """
    Closed capsule along +y from y=0 to y=``length`` + 2 ``radius``, built
    from latitude rings. Cylinder rings are spaced like the cap rings so the
    vertex density is roughly uniform over the surface.
    """
    if sections < 3 or cap_rings < 1:
        raise ValueError("a capsule needs at least 3 sections and 1 cap ring")
    spacing = 0.5 * math.pi * radius / cap_rings
    polar = np.arange(1, cap_rings + 1) * (0.5 * math.pi / cap_rings)
    ring_r = [radius * np.sin(polar)]
    ring_y = [radius - radius * np.cos(polar)]
    if length > 0:
        steps = max(1, math.ceil(length / spacing))
        inner = np.arange(1, steps) * (length / steps)
        ring_r.append(np.full(len(inner), radius))
        ring_y.append(radius + inner)
        top_polar = polar[::-1]
    else:
        top_polar = polar[::-1][1:]
    ring_r.append(radius * np.sin(top_polar))
    ring_y.append(radius + length + radius * np.cos(top_polar))
    radii = np.concatenate(ring_r)
    heights = np.concatenate(ring_y)

    angle = np.arange(sections) * (2.0 * math.pi / sections)
    ring_points = np.stack(
        [
            radii[:, None] * np.cos(angle)[None, :],
            np.broadcast_to(heights[:, None], (len(radii), sections)),
            radii[:, None] * np.sin(angle)[None, :],
        ],
        axis=-1,
    ).reshape(-1, 3)
    top = length + 2.0 * radius
    vertices = np.concatenate([[[0.0, 0.0, 0.0]], ring_points, [[0.0, top, 0.0]]])

    rings = 1 + np.arange(len(radii) * sections).reshape(len(radii), sections)
    nxt = np.roll(np.arange(sections), -1)
    faces = [np.stack([np.zeros(sections, dtype=np.int64), rings[0], rings[0][nxt]], axis=1)]
    for lower, upper in zip(rings[:-1], rings[1:]):
        faces.append(np.stack([lower, upper, upper[nxt]], axis=1))
        faces.append(np.stack([lower, upper[nxt], lower[nxt]], axis=1))
    faces.append(np.stack([rings[-1], np.full(sections, len(vertices) - 1), rings[-1][nxt]], axis=1))
    faces = np.concatenate(faces).astype(np.int64)

    # wind every face outward from the axis
    corners = vertices[faces]
    normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    centroid = corners.mean(axis=1)
    axis_point = np.zeros_like(centroid)
    axis_point[:, 1] = np.clip(centroid[:, 1], radius, radius + length)
    inward = np.einsum("ij,ij->i", normal, centroid - axis_point) < 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return vertices, faces


def chain_template(
    joints: int = 3,
    radius: float = 0.12,
    segment_length: float = 0.35,
    keypoints: int = 24,
    shape_components: int = 2,
    sections: int = 16,
    seed: int = 0,
) -> BodyTemplate:
    """
    A capsule body skinned to a chain of ``joints`` along +y, with one-hot
    keypoints on random surface vertices. Shape component 0 thickens the
    body, component 1 lengthens it.
    """
    if joints < 1:
        raise ValueError("a chain needs at least one joint")
    length = joints * segment_length
    vertices, faces = capsule_mesh(radius, length - 2 * radius if length > 2 * radius else 0.0, sections)
    top = float(vertices[:, 1].max())
    joint_y = np.arange(joints, dtype=np.float64) * (top / joints)
    joint_positions = np.stack([np.zeros(joints), joint_y, np.zeros(joints)], axis=1)

    # linear blend between the two nearest segment centers
    centers = joint_y + top / joints / 2.0
    y = vertices[:, 1]
    weights = np.zeros((vertices.shape[0], joints))
    if joints == 1:
        weights[:, 0] = 1.0
    else:
        position = np.clip(np.interp(y, centers, np.arange(joints)), 0, joints - 1)
        lower = np.floor(position).astype(int).clip(0, joints - 2)
        fraction = position - lower
        weights[np.arange(len(y)), lower] = 1.0 - fraction
        weights[np.arange(len(y)), lower + 1] += fraction

    rng = np.random.default_rng(seed)
    count = min(keypoints, vertices.shape[0])
    chosen = rng.choice(vertices.shape[0], size=count, replace=False)
    regressor = np.zeros((count, vertices.shape[0]))
    regressor[np.arange(count), chosen] = 1.0

    components = min(shape_components, SHAPE_DIM)
    basis = np.zeros((vertices.shape[0], 3, components))
    if components > 0:
        basis[:, 0, 0] = 0.1 * vertices[:, 0]
        basis[:, 2, 0] = 0.1 * vertices[:, 2]
    if components > 1:
        basis[:, 1, 1] = 0.1 * vertices[:, 1]

    parents = np.arange(joints) - 1
    return BodyTemplate(
        vertices=torch.from_numpy(vertices),
        faces=torch.from_numpy(faces),
        parents=torch.from_numpy(parents).long(),
        joints=torch.from_numpy(joint_positions),
        weights=torch.from_numpy(weights),
        regressor=torch.from_numpy(regressor),
        shape_basis=torch.from_numpy(basis),
    )


def height_colors(positions: torch.Tensor) -> torch.Tensor:
    """Smooth color ramp over the canonical box, in (0.15, 0.85)."""
    lo = positions.min(0).values
    hi = positions.max(0).values
    normalized = (positions - lo) / (hi - lo).clamp_min(1e-9)
    ramp = torch.stack(
        [normalized[:, 1], 1.0 - normalized[:, 1], 0.5 + 0.5 * (normalized[:, 0] - 0.5)], dim=1
    )
    return 0.15 + 0.7 * ramp


def ground_truth_cloud(
    template: BodyTemplate, subdivisions: int = 1, shape: torch.Tensor | None = None, seed: int = 0
) -> SurfelCloud:
    """Surfel avatar with explicit attributes: label scales and a color ramp, fully visible."""
    config = SurfelInitConfig(
        subdivisions=subdivisions, field=FieldConfig(parameterization="explicit"), pretrain_steps=1
    )
    cloud = init_from_template(template, subdivisions, config, shape, seed, dtype=torch.float64)
    pretrain_field(cloud.field, cloud.positions, cloud.scale_labels, 1, colors=height_colors(cloud.positions))
    with torch.no_grad():
        cloud.occlusion.zero_()
    return cloud


def front_camera(
    target: torch.Tensor, distance: float, azimuth_degrees: float, width: int, height: int, fov: float = 40.0
) -> Camera:
    azimuth = math.radians(azimuth_degrees)
    eye = target + distance * torch.tensor([math.sin(azimuth), 0.0, math.cos(azimuth)], dtype=torch.float64)
    return Camera.from_fov(fov, width, height, eye=eye, target=target)


def random_poses(
    template: BodyTemplate, frames: int, amplitude: float, seed: int
) -> list[Pose]:
    generator = torch.Generator().manual_seed(seed)
    poses = []
    for _ in range(frames):
        axis_angle = amplitude * (2 * torch.rand(template.num_joints, 3, generator=generator, dtype=torch.float64) - 1)
        axis_angle[0] = 0.0
        poses.append(Pose(axis_angle, torch.zeros(3, dtype=torch.float64)))
    return poses


@dataclass
class SyntheticScene:
    manifest_path: Path
    template: BodyTemplate
    sequence: PoseSequence
    cloud: SurfelCloud


def write_synthetic_scene(
    root: str | Path,
    frames: int = 2,
    width: int = 64,
    height: int = 64,
    template: BodyTemplate | None = None,
    test_frames: int = 0,
    amplitude: float = 0.2,
    azimuth_spread: float = 30.0,
    subdivisions: int = 1,
    back_normals: bool = True,
    prompt: str = "a person",
    seed: int = 0,
) -> SyntheticScene:
    """Render and write a full scene; the last ``test_frames`` frames are marked as test."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    template = template or chain_template(seed=seed)
    save_template(root / TEMPLATE_FILE, template)
    cloud = ground_truth_cloud(template, subdivisions, seed=seed)

    shape = torch.zeros(SHAPE_DIM, dtype=torch.float64)
    poses = random_poses(template, frames, amplitude, seed)
    center = template.vertices.mean(0)
    distance = 2.6 * float((template.vertices.max(0).values - template.vertices.min(0).values).norm())
    cameras = []
    entries = []
    for t, pose in enumerate(poses):
        azimuth = 0.0 if frames == 1 else azimuth_spread * (t / (frames - 1) - 0.5)
        camera = front_camera(center, distance, azimuth, width, height)
        cameras.append(camera)
        sequence = PoseSequence(shape, [pose], [camera])
        bones = sequence.bones(template, 0)
        with torch.no_grad():
            front = render(cloud, bones, camera, FRONT_REQUEST)
            names = {
                "image": f"frame_{t:03d}_rgb.png",
                "mask": f"frame_{t:03d}_mask.png",
                "normal": f"frame_{t:03d}_normal.png",
                "keypoints": f"frame_{t:03d}_keypoints.txt",
            }
            write_rgb(root / names["image"], front["rgb"])
            write_mask(root / names["mask"], front["mask"])
            write_normal_map(root / names["normal"], _valid_normals(front["normal"], front.alpha))
            back_name = None
            if back_normals:
                back = render(cloud, bones, camera, BACK_REQUEST)
                back_name = f"frame_{t:03d}_back_normal.png"
                write_normal_map(root / back_name, _valid_normals(back["back_normal"], back.alpha))
            projection = regress_keypoints(template, shape, pose, camera)
            write_keypoints(root / names["keypoints"], projection.pixels, projection.valid.to(torch.float64))

        entries.append(
            FrameEntry(
                index=t,
                back_normal=back_name,
                pose=PoseSpec(axis_angle=pose.axis_angle.tolist(), translation=pose.translation.tolist()),
                camera=CameraSpec(
                    intrinsics=camera.intrinsics.tolist(),
                    rotation=camera.rotation.tolist(),
                    translation=camera.translation.tolist(),
                ),
                split="test" if t >= frames - test_frames else "train",
                **names,
            )
        )

    manifest = SceneManifest(
        template=TEMPLATE_FILE,
        prompt=prompt,
        width=width,
        height=height,
        shape=shape.tolist(),
        frames=entries,
    )
    path = write_manifest(root / "manifest.json", manifest)
    logger.info(f"Wrote synthetic scene with {frames} frame(s) to {root}")
    return SyntheticScene(path, template, PoseSequence(shape, poses, cameras), cloud)


def _valid_normals(normals: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return torch.where(alpha[..., None] > 0.5, normals, torch.zeros_like(normals))
