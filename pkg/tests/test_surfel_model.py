import logging

import numpy as np
import pytest
import torch
import trimesh

from body.template import BodyTemplate
from core.config import FieldConfig, SurfelInitConfig
from core.errors import NonManifoldMeshError
from helpers import small_field_config
from oracles import mean_neighbor_distance
from surfels.cloud import SurfelCloud
from surfels.field import ExplicitAttributes, HashGridEncoding, NeuralField, build_field
from surfels.initialize import (
    check_manifold,
    init_from_template,
    initial_scale_labels,
    pretrain_cloud,
    pretrain_field,
    query_attributes,
    subdivide_mesh,
)

F64 = torch.float64


def _mesh_template(vertices: np.ndarray, faces: np.ndarray) -> BodyTemplate:
    count = vertices.shape[0]
    return BodyTemplate(
        vertices=torch.from_numpy(np.asarray(vertices, dtype=np.float64)),
        faces=torch.from_numpy(np.asarray(faces, dtype=np.int64)),
        parents=torch.tensor([-1]),
        joints=torch.zeros(1, 3, dtype=F64),
        weights=torch.ones(count, 1, dtype=F64),
        regressor=torch.zeros(0, count, dtype=F64),
    )


def _icosahedron_template() -> BodyTemplate:
    mesh = trimesh.creation.icosahedron()
    return _mesh_template(np.asarray(mesh.vertices), np.asarray(mesh.faces))


def _config(parameterization: str = "hybrid", steps: int = 0) -> SurfelInitConfig:
    return SurfelInitConfig(
        subdivisions=0, pretrain_steps=steps, field=small_field_config(parameterization=parameterization)
    )


class TestScaleLabels:
    """Tests for 3-nearest-neighbor scale labels."""

    def test_regular_tetrahedron(self):
        """Test unit-edge tetrahedron vertices all get label 1."""
        points = torch.tensor(
            [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=F64
        ) / (2 * np.sqrt(2))
        torch.testing.assert_close(initial_scale_labels(points), torch.ones(4, dtype=F64))

    def test_collinear_points(self):
        """Test the end of a unit-spaced line averages distances 1, 2 and 3."""
        points = torch.tensor([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=F64)
        assert float(initial_scale_labels(points)[0]) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        """Test random points against exhaustive neighbor search."""
        points = np.random.default_rng(0).random((1000, 3))
        labels = initial_scale_labels(torch.from_numpy(points)).numpy()
        np.testing.assert_allclose(labels, mean_neighbor_distance(points, 3), atol=1e-12)

    def test_coincident_points_are_clamped(self, caplog):
        """Test duplicate points get the epsilon label and a warning."""
        points = torch.zeros(5, 3, dtype=F64)
        with caplog.at_level(logging.WARNING, logger="soar"):
            labels = initial_scale_labels(points)
        assert torch.all(labels == 1e-6)
        assert "coincident" in caplog.text

    def test_too_few_points(self):
        """Test fewer than four points are rejected."""
        with pytest.raises(ValueError, match="at least 4"):
            initial_scale_labels(torch.zeros(3, 3, dtype=F64))


class TestMeshChecks:
    """Tests for mesh validation and subdivision."""

    def test_edge_shared_by_three_faces(self):
        """Test a fin of three triangles on one edge is rejected."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
        with pytest.raises(NonManifoldMeshError):
            check_manifold(faces, vertices)

    def test_degenerate_face(self):
        """Test a zero-area face is rejected."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        with pytest.raises(NonManifoldMeshError):
            check_manifold(np.array([[0, 1, 2]]), vertices)

    def test_open_boundary_allowed(self):
        """Test a lone triangle passes."""
        check_manifold(np.array([[0, 1, 2]]), np.eye(3))

    def test_too_many_subdivisions(self):
        """Test more than three subdivision levels are refused."""
        mesh = trimesh.creation.icosahedron()
        with pytest.raises(ValueError):
            subdivide_mesh(np.asarray(mesh.vertices), np.asarray(mesh.faces), 4)

    def test_subdivision_counts(self):
        """Test midpoint subdivision of a closed mesh adds one vertex per edge."""
        mesh = trimesh.creation.icosahedron()
        vertices, faces = subdivide_mesh(np.asarray(mesh.vertices), np.asarray(mesh.faces), 2)
        assert vertices.shape[0] == 162
        assert faces.shape[0] == 320

    @staticmethod
    def _subdivided_count(vertices: int, edges: int, faces: int, levels: int) -> int:
        for _ in range(levels):
            vertices, edges, faces = vertices + edges, 2 * edges + 3 * faces, 4 * faces
        return vertices

    @pytest.mark.parametrize("mesh", ["icosahedron", "triangle"])
    def test_count_recurrence_matches_subdivision(self, mesh):
        """Test two levels add V + 3E + 3F vertices on closed and open meshes."""
        if mesh == "icosahedron":
            shape = trimesh.creation.icosahedron()
            vertices, faces = np.asarray(shape.vertices), np.asarray(shape.faces)
        else:
            vertices, faces = np.eye(3), np.array([[0, 1, 2]])
        edges = trimesh.Trimesh(vertices=vertices, faces=faces, process=False).edges_unique.shape[0]
        expected = vertices.shape[0] + 3 * edges + 3 * faces.shape[0]
        assert self._subdivided_count(vertices.shape[0], edges, faces.shape[0], 2) == expected
        assert subdivide_mesh(vertices, faces, 2)[0].shape[0] == expected

    def test_full_body_surfel_count(self):
        """Test a 10475-vertex body mesh yields 167333 surfels after two levels."""
        assert self._subdivided_count(10475, 31378, 20908, 2) == 167333

    def test_capsule_is_closed_and_outward(self, template):
        """Test the synthetic body mesh is watertight with outward winding."""
        mesh = trimesh.Trimesh(template.vertices.numpy(), template.faces.numpy(), process=False)
        assert mesh.is_watertight
        assert mesh.volume > 0


class TestInitFromTemplate:
    """Tests for building the initial surfel cloud."""

    def test_single_triangle(self):
        """Test a lone triangle yields three surfels with the face normal."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        cloud = init_from_template(_mesh_template(vertices, np.array([[0, 1, 2]])), 0, _config(), dtype=F64)
        assert cloud.num_surfels == 3
        expected = torch.tensor([0.0, 0.0, 1.0], dtype=F64).expand(3, 3)
        torch.testing.assert_close(cloud.normals(), expected, atol=1e-6, rtol=0)

    def test_icosahedron_subdivided(self):
        """Test one subdivision of an icosahedron gives 42 outward surfels."""
        cloud = init_from_template(_icosahedron_template(), 1, _config(), dtype=F64)
        assert cloud.num_surfels == 42
        radial = cloud.positions / cloud.positions.norm(dim=-1, keepdim=True)
        assert ((cloud.normals() * radial).sum(-1) > 0.9).all()

    def test_initial_state(self, template):
        """Test occlusions start at one, quaternions are unit and weights are convex."""
        cloud = init_from_template(template, 0, _config(), dtype=F64)
        assert torch.all(cloud.occlusion == 1.0)
        torch.testing.assert_close(cloud.quaternions.norm(dim=-1), torch.ones(cloud.num_surfels, dtype=F64))
        torch.testing.assert_close(cloud.skin_weights.sum(1), torch.ones(cloud.num_surfels, dtype=F64))
        torch.testing.assert_close(cloud.init_positions, cloud.positions.detach())
        assert cloud.neighbor_index.shape == (cloud.num_surfels, 5)

    def test_capsule_normals_point_outward(self, template):
        """Test surfel normals face away from the body axis."""
        cloud = init_from_template(template, 0, _config(), dtype=F64)
        positions = cloud.positions.detach()
        axis = positions.clone()
        axis[:, 0] = 0.0
        axis[:, 2] = 0.0
        axis[:, 1] = axis[:, 1].clamp(0.12, float(positions[:, 1].max()) - 0.12)
        outward = (cloud.normals().detach() * (positions - axis)).sum(-1)
        assert (outward > 0).all()

    def test_deterministic(self, template):
        """Test the same seed gives bitwise identical clouds."""
        a = init_from_template(template, 0, _config(), seed=3)
        b = init_from_template(template, 0, _config(), seed=3)
        for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), name

    def test_non_manifold_template(self):
        """Test a non-manifold template mesh aborts initialization."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
        template = _mesh_template(vertices, np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]]))
        with pytest.raises(NonManifoldMeshError):
            init_from_template(template, 0, _config())


class TestNeuralField:
    """Tests for the hash-grid attribute field."""

    def _field(self, **overrides) -> NeuralField:
        lo, hi = -torch.ones(3), torch.ones(3)
        return NeuralField(small_field_config(**overrides), lo, hi)

    def test_outputs_are_in_range(self):
        """Test scale is positive and color lies in (0, 1), also outside the box."""
        field = self._field()
        points = 3 * (2 * torch.rand(500, 3, generator=torch.Generator().manual_seed(0)) - 1)
        output = field(points)
        assert (output.scale > 0).all()
        assert ((output.color > 0) & (output.color < 1)).all()

    def test_dense_and_hashed_levels(self):
        """Test coarse levels index densely and fine levels hash."""
        encoding = HashGridEncoding(small_field_config(log2_table_size=8), -torch.ones(3), torch.ones(3))
        assert encoding.is_dense(0)
        assert not encoding.is_dense(encoding.levels - 1)
        index = encoding.corner_indices(torch.rand(100, 3) * 2 - 1, encoding.levels - 1)
        assert int(index.min()) >= 0 and int(index.max()) < encoding.table_size

    def test_coarse_entry_is_local(self):
        """Test perturbing one coarse table row changes only the queries that read it."""
        field = self._field().double()
        points = 2 * torch.rand(2000, 3, generator=torch.Generator().manual_seed(1), dtype=F64) - 1
        before = field(points)
        readers = (field.encoding.corner_indices(points, 0) == 0).any(1)
        with torch.no_grad():
            field.encoding.tables[0, 0] += 1.0
        after = field(points)
        changed = (after.color != before.color).any(1) | (after.scale != before.scale)
        assert not changed[~readers].any()
        assert changed[readers].any()

    def test_scale_gradient_matches_finite_differences(self):
        """Test d(scale)/d(position) against central differences away from cell borders."""
        field = self._field().double()
        points = 2 * torch.rand(400, 3, generator=torch.Generator().manual_seed(2), dtype=F64) - 1
        interior = torch.ones(points.shape[0], dtype=torch.bool)
        for level in range(field.encoding.levels):
            _, frac = field.encoding._cell(points, level)
            interior &= ((frac > 0.05) & (frac < 0.95)).all(1)
        points = points[interior][:10]
        assert points.shape[0] > 0

        x = points.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(field(x).scale.sum(), x)
        h = 1e-6
        numeric = torch.zeros_like(points)
        for axis in range(3):
            step = torch.zeros(3, dtype=F64)
            step[axis] = h
            numeric[:, axis] = (field(points + step).scale - field(points - step).scale) / (2 * h)
        error = (numeric - grad).norm() / grad.norm().clamp_min(1e-12)
        assert float(error) < 1e-3

    def test_explicit_rejects_wrong_count(self):
        """Test explicit attributes are indexed by surfel order."""
        attributes = ExplicitAttributes(4)
        with pytest.raises(ValueError, match="explicit"):
            attributes(torch.zeros(5, 3))


class TestPretraining:
    """Tests for pre-fitting the field to the scale labels."""

    def test_constant_labels(self):
        """Test the field reaches the labels within 5% relative error."""
        positions = torch.rand(300, 3, generator=torch.Generator().manual_seed(3))
        field = build_field(small_field_config(), positions)
        labels = torch.full((300,), 0.01)
        result = pretrain_field(field, positions, labels, steps=300)
        assert result.relative_error < 0.05
        assert result.losses[-1] < result.losses[0]

    def test_zero_steps_leave_field_unchanged(self):
        """Test pretraining for zero steps is a no-op."""
        positions = torch.rand(50, 3)
        field = build_field(small_field_config(), positions)
        before = {k: v.clone() for k, v in field.state_dict().items()}
        pretrain_field(field, positions, torch.full((50,), 0.02), steps=0)
        for key, value in field.state_dict().items():
            assert torch.equal(value, before[key]), key

    def test_explicit_is_exact(self, template):
        """Test explicit attributes copy the labels."""
        cloud = init_from_template(template, 0, _config("explicit", steps=10), dtype=F64)
        result = pretrain_cloud(cloud, _config("explicit", steps=10))
        assert result.relative_error < 1e-5
        torch.testing.assert_close(query_attributes(cloud).scale, cloud.scale_labels, rtol=1e-5, atol=0)


class TestSurfelCloud:
    """Tests for the cloud container."""

    def test_empty_matches_real_layout(self, template):
        """Test a placeholder accepts the state of a real cloud."""
        config = _config()
        cloud = init_from_template(template, 0, config)
        placeholder = SurfelCloud.empty(cloud.num_surfels, cloud.num_joints, config.field, 5)
        placeholder.load_state_dict(cloud.state_dict())
        torch.testing.assert_close(placeholder.positions, cloud.positions)
        torch.testing.assert_close(placeholder.attributes().scale, cloud.attributes().scale)

    def test_row_mismatch(self):
        """Test inconsistent per-surfel tensors are rejected."""
        with pytest.raises(ValueError, match="rows"):
            SurfelCloud(
                torch.zeros(3, 3),
                torch.zeros(2, 4),
                ExplicitAttributes(3),
                torch.ones(3, 1),
                torch.ones(3),
                torch.zeros(3, 1, dtype=torch.long),
            )

    def test_clamp_and_normalize(self, gt_cloud):
        """Test in-place projections keep occlusion in [0, 1] and quaternions unit."""
        with torch.no_grad():
            gt_cloud.occlusion.uniform_(-1, 2)
            gt_cloud.quaternions.mul_(3.0)
        gt_cloud.clamp_occlusion_()
        gt_cloud.normalize_orientations_()
        assert float(gt_cloud.occlusion.min()) >= 0 and float(gt_cloud.occlusion.max()) <= 1
        torch.testing.assert_close(gt_cloud.quaternions.norm(dim=-1), torch.ones(gt_cloud.num_surfels, dtype=F64))

    def test_field_config_defaults(self):
        """Test the default field matches the documented architecture."""
        config = FieldConfig()
        assert (config.levels, config.log2_table_size, config.features_per_level) == (16, 19, 2)
        assert (config.base_resolution, config.max_resolution, config.hidden_width) == (16, 2048, 64)
