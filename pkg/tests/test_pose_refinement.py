import math

import pytest
import torch

from assets.scene import FrameObservation, PoseSequence
from assets.synthetic import front_camera, random_poses
from body.keypoints import regress_keypoints
from body.kinematics import Pose
from body.rotations import geodesic_distance, rodrigues
from body.template import SHAPE_DIM
from core.config import LbfgsConfig, PoseRefinementConfig
from core.errors import NonFiniteLossError
from optim.pose_refinement import PoseRefiner, refine_pose, rotation_smoothness

F64 = torch.float64


def _observation(index, camera, keypoints, confidences=None) -> FrameObservation:
    h, w = camera.height, camera.width
    return FrameObservation(
        index=index,
        camera=camera,
        image=torch.zeros(h, w, 3, dtype=F64),
        mask=torch.zeros(h, w, 1, dtype=F64),
        normal=torch.zeros(h, w, 3, dtype=F64),
        keypoints=keypoints,
        confidences=torch.ones(keypoints.shape[0], dtype=F64) if confidences is None else confidences,
    )


def _scene(template, poses, azimuths, size=128):
    target = template.vertices.mean(0)
    cameras = [front_camera(target, 3.0, az, size, size) for az in azimuths]
    shape = torch.zeros(SHAPE_DIM, dtype=F64)
    observations = [
        _observation(t, camera, regress_keypoints(template, shape, pose, camera).pixels.detach())
        for t, (camera, pose) in enumerate(zip(cameras, poses))
    ]
    return PoseSequence(shape, poses, cameras), observations


def _perturbed(pose: Pose, scale: float, seed: int) -> Pose:
    generator = torch.Generator().manual_seed(seed)
    noise = scale * torch.randn(pose.axis_angle.shape, generator=generator, dtype=F64)
    return Pose(pose.axis_angle + noise, pose.translation.clone())


def _mean_rotation_error(sequence: PoseSequence, truth: list[Pose]) -> float:
    errors = [
        geodesic_distance(rodrigues(pose.axis_angle), rodrigues(true.axis_angle)).mean()
        for pose, true in zip(sequence.poses, truth)
    ]
    return float(torch.stack(errors).mean())


class TestRotationSmoothness:
    """Tests for the temporal smoothness energy."""

    def test_single_frame(self, template):
        """Test one frame has no smoothness cost."""
        sequence, _ = _scene(template, random_poses(template, 1, 0.3, seed=0), [0.0])
        assert float(rotation_smoothness(sequence)) == 0.0

    def test_constant_poses(self, template):
        """Test repeated poses cost nothing."""
        pose = random_poses(template, 1, 0.3, seed=0)[0]
        sequence, _ = _scene(template, [pose, pose, pose], [0.0, 10.0, 20.0])
        assert float(rotation_smoothness(sequence)) == pytest.approx(0.0, abs=1e-20)

    def test_known_angle(self, template):
        """Test a single joint turning by theta costs 4 - 4 cos(theta)."""
        theta = 0.4
        still = Pose.rest(template.num_joints)
        moved = Pose.rest(template.num_joints)
        moved.axis_angle[1] = torch.tensor([0.0, 0.0, theta], dtype=F64)
        sequence, _ = _scene(template, [still, moved], [0.0, 0.0])
        assert float(rotation_smoothness(sequence)) == pytest.approx(4 - 4 * math.cos(theta), rel=1e-12)


class TestPoseRefiner:
    """Tests for keypoint-driven pose refinement."""

    def test_exact_fit_is_fixed_point(self, template):
        """Test a pose that already explains its keypoints stays put."""
        pose = random_poses(template, 1, 0.3, seed=1)[0]
        sequence, observations = _scene(template, [pose], [20.0])
        result = refine_pose(sequence, observations, template)
        assert result.optimizer.status == "converged"
        assert result.optimizer.iterations == 0
        assert result.final_energy["total"] == pytest.approx(0.0, abs=1e-12)
        torch.testing.assert_close(result.sequence.poses[0].axis_angle, pose.axis_angle)

    @pytest.mark.slow
    def test_recovers_static_pose(self, template):
        """Test perturbed poses move back toward a pose seen from several views."""
        truth = random_poses(template, 1, 0.35, seed=2)[0]
        azimuths = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
        _, observations = _scene(template, [truth] * len(azimuths), azimuths, size=256)
        initial = [_perturbed(truth, 0.15, seed=10 + t) for t in range(len(azimuths))]
        sequence = PoseSequence(torch.zeros(SHAPE_DIM, dtype=F64), initial, [o.camera for o in observations])

        before = _mean_rotation_error(sequence, [truth] * len(azimuths))
        result = refine_pose(sequence, observations, template)
        after = _mean_rotation_error(result.sequence, [truth] * len(azimuths))
        assert result.final_energy["total"] < result.initial_energy["total"]
        assert after < 0.3 * before

    def test_smoothness_dominates_conflicting_frames(self, template):
        """Test a huge smoothness weight keeps two conflicting frames together."""
        poses = random_poses(template, 2, 0.5, seed=3)
        _, observations = _scene(template, poses, [0.0, 0.0], size=64)
        start = Pose.rest(template.num_joints)
        sequence = PoseSequence(
            torch.zeros(SHAPE_DIM, dtype=F64),
            [start, Pose(start.axis_angle.clone(), start.translation.clone())],
            [o.camera for o in observations],
        )
        config = PoseRefinementConfig(smooth_weight=1e8, lbfgs=LbfgsConfig(epochs=5))
        result = refine_pose(sequence, observations, template, config)
        first, second = result.sequence.poses
        gap = geodesic_distance(rodrigues(first.axis_angle), rodrigues(second.axis_angle)).max()
        assert float(gap) < 0.05

    def test_energy_never_increases(self, template):
        """Test the refined energy is at most the initial energy."""
        poses = random_poses(template, 2, 0.3, seed=4)
        _, observations = _scene(template, poses, [0.0, 45.0], size=64)
        initial = [_perturbed(p, 0.1, seed=20 + t) for t, p in enumerate(poses)]
        sequence = PoseSequence(torch.zeros(SHAPE_DIM, dtype=F64), initial, [o.camera for o in observations])
        config = PoseRefinementConfig(lbfgs=LbfgsConfig(epochs=1, iterations_per_epoch=5))
        result = refine_pose(sequence, observations, template, config)
        assert result.final_energy["total"] <= result.initial_energy["total"]

    def test_zero_confidence_frame_has_no_data_term(self, template):
        """Test a frame with all confidences zero contributes no data energy."""
        pose = random_poses(template, 1, 0.3, seed=5)[0]
        sequence, observations = _scene(template, [pose], [0.0], size=64)
        observations[0].keypoints = observations[0].keypoints + 40.0
        observations[0].confidences = torch.zeros(template.num_keypoints, dtype=F64)
        refiner = PoseRefiner(template, observations, sequence)
        assert float(refiner.data_term(sequence)) == 0.0

    def test_preserve_ignores_translation(self, template):
        """Test moving the root translation leaves the preservation energy at zero."""
        pose = random_poses(template, 1, 0.3, seed=6)[0]
        sequence, observations = _scene(template, [pose], [0.0], size=64)
        refiner = PoseRefiner(template, observations, sequence)
        moved = PoseSequence(sequence.shape, [Pose(pose.axis_angle, pose.translation + 0.5)], sequence.cameras)
        assert float(refiner.preserve_term(moved)) == 0.0

    def test_observation_count_mismatch(self, template):
        """Test the number of observations must match the number of frames."""
        poses = random_poses(template, 2, 0.3, seed=7)
        sequence, observations = _scene(template, poses, [0.0, 30.0], size=64)
        with pytest.raises(ValueError, match="observations"):
            PoseRefiner(template, observations[:1], sequence)

    def test_keypoint_count_mismatch(self, template):
        """Test observations must carry one keypoint per regressed keypoint."""
        pose = random_poses(template, 1, 0.3, seed=8)[0]
        sequence, observations = _scene(template, [pose], [0.0], size=64)
        observations[0].keypoints = observations[0].keypoints[:5]
        observations[0].confidences = observations[0].confidences[:5]
        with pytest.raises(ValueError, match="keypoints"):
            PoseRefiner(template, observations, sequence)

    def test_non_finite_keypoints_abort(self, template):
        """Test a NaN keypoint aborts with a numerical error."""
        pose = random_poses(template, 1, 0.3, seed=9)[0]
        sequence, observations = _scene(template, [pose], [0.0], size=64)
        observations[0].keypoints[0, 0] = float("nan")
        with pytest.raises(NonFiniteLossError):
            refine_pose(sequence, observations, template)
