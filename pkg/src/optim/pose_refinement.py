"""
Keypoint-driven refinement of body shape, per-frame poses and root
translations with L-BFGS.

The energy balances robust 2D keypoint alignment, temporal smoothness of
joint rotations and closeness to the initial estimates.
"""

from dataclasses import dataclass

import torch
from torch import Tensor

from assets.scene import FrameObservation, PoseSequence
from body.keypoints import regress_keypoints
from body.rotations import rodrigues
from body.template import BodyTemplate
from core.config import PoseRefinementConfig
from core.errors import NonFiniteLossError
from core.logger import logger
from losses.robust import default_robust_sigma, geman_mcclure_terms
from optim.lbfgs import LbfgsResult, lbfgs_minimize


@dataclass(slots=True)
class PoseEnergy:
    data: Tensor
    smooth: Tensor
    preserve: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "data": float(self.data.detach()),
            "smooth": float(self.smooth.detach()),
            "preserve": float(self.preserve.detach()),
            "total": float(self.total.detach()),
        }


@dataclass(slots=True)
class PoseRefinementResult:
    sequence: PoseSequence
    optimizer: LbfgsResult
    initial_energy: dict[str, float]
    final_energy: dict[str, float]


def rotation_smoothness(sequence: PoseSequence) -> Tensor:
    """Sum over consecutive frames and joints of ||R_{t-1}^T R_t - I||_F^2."""
    if sequence.num_frames < 2:
        return sequence.shape.new_zeros(())
    rotations = rodrigues(torch.stack([pose.axis_angle for pose in sequence.poses]))  # (T, J, 3, 3)
    relative = rotations[:-1].transpose(-1, -2) @ rotations[1:]
    eye = torch.eye(3, dtype=relative.dtype)
    return ((relative - eye) ** 2).sum()


class PoseRefiner:
    def __init__(
        self,
        template: BodyTemplate,
        observations: list[FrameObservation],
        initial: PoseSequence,
        config: PoseRefinementConfig | None = None,
    ):
        if len(observations) != initial.num_frames:
            raise ValueError(f"{len(observations)} observations for {initial.num_frames} frames")
        self.template = template.to(torch.float64)
        self.observations = observations
        self.initial = _as_float64(initial.detach())
        self.config = config or PoseRefinementConfig()
        self._keypoints = [obs.keypoints.to(torch.float64) for obs in observations]
        self._confidences = [obs.confidences.to(torch.float64) for obs in observations]
        self._sigmas = [
            self.config.robust_sigma or default_robust_sigma(obs.width, obs.height) for obs in observations
        ]
        for obs, keypoints in zip(observations, self._keypoints):
            if keypoints.shape[0] != self.template.num_keypoints:
                raise ValueError(
                    f"frame {obs.index} has {keypoints.shape[0]} keypoints, "
                    f"template regresses {self.template.num_keypoints}"
                )

    def data_term(self, sequence: PoseSequence) -> Tensor:
        total = sequence.shape.new_zeros(())
        for t, camera in enumerate(sequence.cameras):
            confidences = self._confidences[t]
            if not bool((confidences > 0).any()):
                continue
            projection = regress_keypoints(self.template, sequence.shape, sequence.poses[t], camera)
            residual = self._keypoints[t] - projection.pixels
            penalty = geman_mcclure_terms(residual, self._sigmas[t]).sum(-1)
            weight = confidences * projection.valid.to(confidences.dtype)
            total = total + (weight * penalty).sum()
        return total

    def preserve_term(self, sequence: PoseSequence) -> Tensor:
        total = ((sequence.shape - self.initial.shape) ** 2).sum()
        for pose, start in zip(sequence.poses, self.initial.poses):
            total = total + ((pose.axis_angle - start.axis_angle) ** 2).sum()
        return total

    def energy(self, sequence: PoseSequence) -> PoseEnergy:
        data = self.data_term(sequence)
        smooth = rotation_smoothness(sequence)
        preserve = self.preserve_term(sequence)
        total = (
            self.config.data_weight * data
            + self.config.smooth_weight * smooth
            + self.config.preserve_weight * preserve
        )
        return PoseEnergy(data, smooth, preserve, total)

    def objective(self, x: Tensor) -> tuple[float, Tensor]:
        x = x.detach().requires_grad_(True)
        energy = self.energy(self.initial.unflatten(x))
        value = float(energy.total.detach())
        if not torch.isfinite(energy.total):
            raise NonFiniteLossError("refine-pose", 0, energy.as_dict())
        (grad,) = torch.autograd.grad(energy.total, x)
        return value, grad

    def refine(self) -> PoseRefinementResult:
        x0 = self.initial.flatten()
        with torch.no_grad():
            initial_energy = self.energy(self.initial).as_dict()
        logger.info(
            f"Refining {self.initial.num_frames} frame(s): initial energy {initial_energy['total']:.6g}"
        )
        result = lbfgs_minimize(self.objective, x0, self.config.lbfgs)
        refined = self.initial.unflatten(result.x.detach())
        with torch.no_grad():
            final_energy = self.energy(refined).as_dict()
        logger.info(
            f"Pose refinement {result.status} after {result.iterations} iteration(s): "
            f"energy {final_energy['total']:.6g}"
        )
        return PoseRefinementResult(refined.detach(), result, initial_energy, final_energy)


def _as_float64(sequence: PoseSequence) -> PoseSequence:
    return sequence.unflatten(sequence.flatten().to(torch.float64))


def refine_pose(
    sequence: PoseSequence,
    observations: list[FrameObservation],
    template: BodyTemplate,
    config: PoseRefinementConfig | None = None,
) -> PoseRefinementResult:
    return PoseRefiner(template, observations, sequence, config).refine()
