import math

from torch import Tensor

REFERENCE_SIGMA = 50.0  # pixels at 512x512
REFERENCE_DIAGONAL = 512.0 * math.sqrt(2.0)


def geman_mcclure_terms(residual: Tensor, sigma: float) -> Tensor:
    """Elementwise r^2 s^2 / (r^2 + s^2); saturates at s^2."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    squared = residual * residual
    sigma_sq = sigma * sigma
    return squared * sigma_sq / (squared + sigma_sq)


def geman_mcclure(residual: Tensor, sigma: float) -> Tensor:
    return geman_mcclure_terms(residual, sigma).sum()


def default_robust_sigma(width: int, height: int) -> float:
    """Robustifier width scaled with the image diagonal."""
    return REFERENCE_SIGMA * math.hypot(width, height) / REFERENCE_DIAGONAL
