"""
Surfel cloud construction: mesh subdivision, scale labels, skin binding and
pre-fitting of the attribute field.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree
from torch import Tensor
from tqdm import tqdm

from body.kinematics import bind_weights
from body.rotations import matrix_to_quaternion, tangent_frame
from body.template import BodyTemplate
from core.config import SurfelInitConfig
from core.errors import FieldDivergenceError, NonFiniteLossError, NonManifoldMeshError
from core.logger import logger
from optim.adam import Adam
from surfels.cloud import SurfelCloud
from surfels.field import AttributeField, ExplicitAttributes, FieldOutput, build_field, inverse_softplus

MAX_SUBDIVISIONS = 3
SCALE_EPSILON = 1e-6
DIVERGENCE_WINDOW = 100


def check_manifold(faces: np.ndarray, vertices: np.ndarray | None = None) -> None:
    """
    Reject edges shared by more than two faces and degenerate faces.
    Open boundaries are allowed.
    """
    faces = np.asarray(faces, dtype=np.int64)
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if vertices is not None and len(faces):
        tri = np.asarray(vertices, dtype=np.float64)[faces]
        area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        degenerate |= area <= 1e-14
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    bad_edges = int((counts > 2).sum())
    if bad_edges or degenerate.any():
        raise NonManifoldMeshError(bad_edges, int(degenerate.sum()))


def subdivide_mesh(vertices: np.ndarray, faces: np.ndarray, subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint 1-to-4 subdivision, no smoothing; shared edge midpoints are merged."""
    if subdivisions > MAX_SUBDIVISIONS:
        raise ValueError(f"at most {MAX_SUBDIVISIONS} subdivisions are supported, got {subdivisions}")
    if subdivisions < 0:
        raise ValueError("subdivisions must be nonnegative")
    for _ in range(subdivisions):
        vertices, faces = trimesh.remesh.subdivide(vertices, faces)
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    mesh = trimesh.Trimesh(vertices=vertices, faces=faces, process=False)
    return np.asarray(mesh.vertex_normals, dtype=np.float64)


def initial_scale_labels(positions: Tensor) -> Tensor:
    """Mean distance from each point to its 3 nearest other points."""
    if positions.shape[0] < 4:
        raise ValueError(f"scale labels need at least 4 points, got {positions.shape[0]}")
    return _scale_labels(positions, 3)


def _scale_labels(positions: Tensor, neighbors: int) -> Tensor:
    points = positions.detach().cpu().numpy().astype(np.float64)
    distances, _ = cKDTree(points).query(points, k=neighbors + 1)
    labels = distances[:, 1:].mean(axis=1)
    collapsed = labels < SCALE_EPSILON
    if collapsed.any():
        logger.warning(
            f"{int(collapsed.sum())} point(s) have coincident neighbours; scale labels clamped to {SCALE_EPSILON}"
        )
        labels = np.maximum(labels, SCALE_EPSILON)
    return torch.from_numpy(labels).to(positions.dtype)


def curvature_neighbors(positions: Tensor, count: int) -> Tensor:
    points = positions.detach().cpu().numpy().astype(np.float64)
    k = min(count + 1, points.shape[0])
    _, index = cKDTree(points).query(points, k=k)
    return torch.from_numpy(np.asarray(index).reshape(points.shape[0], k)[:, 1:]).long()


def init_from_template(
    template: BodyTemplate,
    subdivisions: int,
    config: SurfelInitConfig | None = None,
    shape: Tensor | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> SurfelCloud:
    """
    One surfel per vertex of the subdivided canonical mesh, oriented by the
    vertex normal, fully occluded, with 3-NN scale labels and skin weights.
    """
    config = config or SurfelInitConfig()
    rest = template.vertices if shape is None else template.shaped_vertices(shape)
    vertices = rest.detach().cpu().numpy().astype(np.float64)
    faces = template.faces.cpu().numpy().astype(np.int64)
    check_manifold(faces, vertices)

    vertices, faces = subdivide_mesh(vertices, faces, subdivisions)
    normals = vertex_normals(vertices, faces)

    positions = torch.from_numpy(vertices)
    frames = tangent_frame(torch.from_numpy(normals))
    quaternions = matrix_to_quaternion(frames)
    # tiny meshes (a lone triangle) fall back to every other vertex
    labels = _scale_labels(positions, min(3, positions.shape[0] - 1))
    weights = bind_weights(positions, template, min(config.bind_neighbors, template.num_vertices))
    neighbors = curvature_neighbors(positions, config.curvature_neighbors)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        attribute_field = build_field(config.field, positions.to(dtype)).to(dtype)

    logger.info(
        f"Initialized {positions.shape[0]} surfels from {template.num_vertices} template vertices "
        f"({subdivisions} subdivision(s))"
    )
    return SurfelCloud(
        positions.to(dtype),
        quaternions.to(dtype),
        attribute_field,
        weights.to(dtype),
        labels.to(dtype),
        neighbors,
    )


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)
    relative_error: float = 0.0


def _set_explicit(attributes: ExplicitAttributes, labels: Tensor, colors: Tensor | None) -> None:
    with torch.no_grad():
        attributes.raw_scale.copy_(inverse_softplus(labels.to(attributes.raw_scale.dtype)))
        if colors is not None:
            clipped = colors.clamp(1e-4, 1 - 1e-4).to(attributes.raw_color.dtype)
            attributes.raw_color.copy_(torch.logit(clipped))


def pretrain_field(
    attribute_field: AttributeField,
    positions: Tensor,
    scale_labels: Tensor,
    steps: int,
    lr: float = 5e-3,
    colors: Tensor | None = None,
    divergence_window: int = DIVERGENCE_WINDOW,
) -> PretrainResult:
    """
    Fit the field to scale labels (log-space squared error), and to
    ``colors`` when given. Zero steps leaves the field as is.
    """
    result = PretrainResult()
    if steps == 0:
        return result
    positions = positions.detach()
    labels = scale_labels.detach()

    if isinstance(attribute_field, ExplicitAttributes):
        _set_explicit(attribute_field, labels, colors)
        with torch.no_grad():
            result.relative_error = _relative_error(attribute_field(positions), labels)
        return result

    attribute_field.set_scale_bias(float(labels.median()))
    optimizer = Adam(attribute_field.parameters(), lr=lr)
    log_labels = labels.log()
    previous = float("inf")
    increases = 0

    for step in tqdm(range(steps), desc="pretrain field", leave=False, disable=None):
        optimizer.zero_grad()
        output = attribute_field(positions)
        loss = ((output.scale.to(labels.dtype).log() - log_labels) ** 2).mean()
        if colors is not None:
            loss = loss + ((output.color.to(colors.dtype) - colors) ** 2).mean()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NonFiniteLossError("pretrain_field", step)
        increases = increases + 1 if value > previous else 0
        if increases >= divergence_window:
            raise FieldDivergenceError(step, value, divergence_window)
        previous = value
        result.losses.append(value)
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        result.relative_error = _relative_error(attribute_field(positions), labels)
    logger.info(f"Field pre-fit finished after {steps} steps, mean relative scale error {result.relative_error:.4f}")
    return result


def pretrain_cloud(cloud: SurfelCloud, config: SurfelInitConfig) -> PretrainResult:
    return pretrain_field(
        cloud.field, cloud.positions, cloud.scale_labels, config.pretrain_steps, config.pretrain_lr
    )


def _relative_error(output: FieldOutput, labels: Tensor) -> float:
    return float(((output.scale.detach().to(labels.dtype) - labels).abs() / labels).mean())


def query_attributes(cloud: SurfelCloud) -> FieldOutput:
    return cloud.attributes()
