import math

import pytest
import torch

from body.rotations import (
    geodesic_distance,
    gram_schmidt,
    matrix_to_quaternion,
    quaternion_to_matrix,
    rodrigues,
    rotation_log,
    skew,
    tangent_frame,
)


def _random_axis_angles(count: int, max_angle: float = 3.0, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    axes = torch.randn(count, 3, generator=generator, dtype=torch.float64)
    axes = axes / axes.norm(dim=-1, keepdim=True)
    angles = max_angle * torch.rand(count, 1, generator=generator, dtype=torch.float64)
    return axes * angles


class TestRodrigues:
    """Tests for axis-angle to matrix conversion."""

    def test_zero_is_identity(self):
        """Test the zero vector maps to the identity."""
        assert torch.equal(rodrigues(torch.zeros(3, dtype=torch.float64)), torch.eye(3, dtype=torch.float64))

    def test_quarter_turn_about_z(self):
        """Test a quarter turn about z takes x to y."""
        R = rodrigues(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64))
        x = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        torch.testing.assert_close(R @ x, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12, rtol=0)

    def test_results_are_rotations(self):
        """Test outputs are orthonormal with determinant +1."""
        R = rodrigues(_random_axis_angles(100))
        eye = torch.eye(3, dtype=torch.float64).expand(100, 3, 3)
        torch.testing.assert_close(R.transpose(-1, -2) @ R, eye, atol=1e-12, rtol=0)
        torch.testing.assert_close(torch.linalg.det(R), torch.ones(100, dtype=torch.float64), atol=1e-12, rtol=0)

    def test_negated_vector_is_inverse(self):
        """Test rodrigues(-v) undoes rodrigues(v)."""
        v = _random_axis_angles(50)
        product = rodrigues(v) @ rodrigues(-v)
        torch.testing.assert_close(product, torch.eye(3, dtype=torch.float64).expand(50, 3, 3), atol=1e-10, rtol=0)

    def test_matches_matrix_exponential(self):
        """Test agreement with the matrix exponential of the skew matrix."""
        v = _random_axis_angles(20)
        torch.testing.assert_close(rodrigues(v), torch.linalg.matrix_exp(skew(v)), atol=1e-10, rtol=0)

    def test_gradient_finite_at_zero(self):
        """Test the gradient stays finite at the zero rotation."""
        v = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        (grad,) = torch.autograd.grad(rodrigues(v).sum(), v)
        assert torch.isfinite(grad).all()

    def test_gradient_near_zero(self):
        """Test gradients match finite differences in the small-angle branch."""
        v = torch.full((3,), 1e-5, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(rodrigues, (v,))


class TestRotationLog:
    """Tests for the inverse map."""

    def test_round_trip(self):
        """Test log(rodrigues(v)) recovers v for angles below pi."""
        v = _random_axis_angles(100, max_angle=3.0)
        torch.testing.assert_close(rotation_log(rodrigues(v)), v, atol=1e-8, rtol=0)

    def test_identity(self):
        """Test log of the identity is zero."""
        assert rotation_log(torch.eye(3, dtype=torch.float64)).abs().max() < 1e-12

    def test_near_pi(self):
        """Test the axis is recovered for a half turn."""
        v = torch.tensor([0.0, math.pi, 0.0], dtype=torch.float64)
        recovered = rodrigues(rotation_log(rodrigues(v)))
        torch.testing.assert_close(recovered, rodrigues(v), atol=1e-8, rtol=0)


class TestGeodesicDistance:
    """Tests for the rotation angle metric."""

    def test_same_axis_difference(self):
        """Test rotations about one axis differ by the angle difference."""
        axis = torch.tensor([0.0, 0.6, 0.8], dtype=torch.float64)
        a, b = rodrigues(0.3 * axis), rodrigues(1.1 * axis)
        assert float(geodesic_distance(a, b)) == pytest.approx(0.8, abs=1e-7)

    def test_zero_for_equal(self):
        """Test the distance from a rotation to itself vanishes."""
        R = rodrigues(_random_axis_angles(10))
        assert float(geodesic_distance(R, R).max()) < 1e-6


class TestQuaternions:
    """Tests for quaternion conversions."""

    def test_matrix_round_trip(self):
        """Test matrix -> quaternion -> matrix is the identity map."""
        R = rodrigues(_random_axis_angles(100, max_angle=3.1))
        torch.testing.assert_close(quaternion_to_matrix(matrix_to_quaternion(R)), R, atol=1e-10, rtol=0)

    def test_quaternions_are_unit_with_nonnegative_w(self):
        """Test canonical sign and unit norm."""
        q = matrix_to_quaternion(rodrigues(_random_axis_angles(100, max_angle=3.1)))
        torch.testing.assert_close(q.norm(dim=-1), torch.ones(100, dtype=torch.float64), atol=1e-12, rtol=0)
        assert (q[:, 0] >= 0).all()

    def test_unnormalized_input(self):
        """Test quaternions are normalized before conversion."""
        q = torch.tensor([2.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        torch.testing.assert_close(quaternion_to_matrix(q), torch.eye(3, dtype=torch.float64))


class TestFrames:
    """Tests for tangent frames and the SO(3) projection."""

    def test_tangent_frame_contains_normal(self):
        """Test the third column is the normalized input."""
        generator = torch.Generator().manual_seed(1)
        normals = torch.randn(200, 3, generator=generator, dtype=torch.float64)
        frames = tangent_frame(normals)
        unit = normals / normals.norm(dim=-1, keepdim=True)
        torch.testing.assert_close(frames[..., 2], unit, atol=1e-12, rtol=0)
        eye = torch.eye(3, dtype=torch.float64).expand(200, 3, 3)
        torch.testing.assert_close(frames.transpose(-1, -2) @ frames, eye, atol=1e-12, rtol=0)
        assert (torch.linalg.det(frames) > 0).all()

    def test_tangent_frame_is_deterministic_for_axis_normals(self):
        """Test the +z normal gets the x axis as first tangent."""
        frame = tangent_frame(torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))[0]
        torch.testing.assert_close(frame, torch.eye(3, dtype=torch.float64))

    def test_gram_schmidt_of_rotation_is_identity_map(self):
        """Test projecting a rotation leaves it unchanged."""
        R = rodrigues(_random_axis_angles(20))
        torch.testing.assert_close(gram_schmidt(R), R, atol=1e-12, rtol=0)

    def test_gram_schmidt_of_blend(self):
        """Test a blend of two rotations projects to a proper rotation."""
        R = 0.3 * rodrigues(_random_axis_angles(20, seed=1)) + 0.7 * rodrigues(_random_axis_angles(20, seed=2))
        P = gram_schmidt(R)
        eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
        torch.testing.assert_close(P.transpose(-1, -2) @ P, eye, atol=1e-12, rtol=0)
        torch.testing.assert_close(torch.linalg.det(P), torch.ones(20, dtype=torch.float64), atol=1e-12, rtol=0)
