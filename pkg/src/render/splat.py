"""Per-splat geometry and front-to-back compositing shared by the rasterizer."""

import math
from collections.abc import Sequence

import torch
from torch import Tensor

ALPHA_MAX = 0.999
ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
EDGE_ON_EPSILON = 1e-8
NEAR_PLANE = 1e-6
FOOTPRINT_FLOOR = 0.5  # pixels
# radius (in units of s) outside which the falloff drops below ALPHA_CUTOFF
CUTOFF_RADIUS = math.sqrt(2.0 * math.log(255.0))


def effective_scale(scale: Tensor, depth: Tensor, focal: Tensor | float) -> Tensor:
    """Scale with a floor of half a pixel at the surfel's depth."""
    return torch.maximum(scale, FOOTPRINT_FLOOR * depth / focal)


def composite_weights(alpha: Tensor) -> tuple[Tensor, Tensor]:
    """
    Blend weights T_i * alpha_i along the last axis, in order, and the
    accumulated opacity. Contributions stop once transmittance falls below
    ``TRANSMITTANCE_MIN``.
    """
    ones = torch.ones_like(alpha[..., :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    alive = transmittance >= TRANSMITTANCE_MIN
    weights = torch.where(alive, transmittance * alpha, torch.zeros_like(alpha))
    return weights, weights.sum(-1)


def composite_pixel(hits: Sequence[tuple[float | Tensor, Tensor | float]]) -> Tensor:
    """Accumulate ordered (alpha, payload) hits for a single pixel."""
    if not hits:
        return torch.zeros(())
    alpha = torch.stack([torch.as_tensor(a, dtype=torch.float64).clamp(max=ALPHA_MAX) for a, _ in hits])
    payload = torch.stack([torch.as_tensor(p, dtype=alpha.dtype) for _, p in hits])
    weights, _ = composite_weights(alpha)
    return (weights.reshape(-1, *([1] * (payload.ndim - 1))) * payload).sum(0)


def splat_weight(
    center: Tensor,
    tangent_u: Tensor,
    tangent_v: Tensor,
    normal: Tensor,
    scale: Tensor,
    ray: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Intersect camera rays with surfel disk planes; every argument is in
    camera space and broadcasts over leading dimensions. ``ray`` has unit z,
    so the returned depth is the camera z of the hit.

    Returns (alpha, depth, hit) where ``hit`` marks contributions that
    survive the edge-on, behind-camera and falloff cutoffs.
    """
    facing = (ray * normal).sum(-1)
    edge_on = facing.abs() < EDGE_ON_EPSILON
    safe = torch.where(edge_on, torch.ones_like(facing), facing)
    depth = (center * normal).sum(-1) / safe

    u = depth * (ray * tangent_u).sum(-1) - (center * tangent_u).sum(-1)
    v = depth * (ray * tangent_v).sum(-1) - (center * tangent_v).sum(-1)
    falloff = torch.exp(-(u * u + v * v) / (2.0 * scale * scale))

    hit = ~edge_on & (depth > NEAR_PLANE) & (falloff >= ALPHA_CUTOFF)
    alpha = torch.where(hit, falloff.clamp(max=ALPHA_MAX), torch.zeros_like(falloff))
    return alpha, depth, hit
