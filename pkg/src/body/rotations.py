"""Rotation utilities shared by the body model, surfels and renderer."""

import torch
from torch import Tensor

_SMALL_ANGLE_SQ = 1e-8


def skew(v: Tensor) -> Tensor:
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def rodrigues(axis_angle: Tensor) -> Tensor:
    """
    Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    The zero rotation is handled with a Taylor expansion so values and
    gradients stay finite there.
    """
    theta_sq = (axis_angle * axis_angle).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    theta_sq_safe = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(theta_sq_safe)

    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe)

    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand_as(k)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_log(rotation: Tensor) -> Tensor:
    """Inverse of :func:`rodrigues`; (..., 3, 3) -> (..., 3). Diagnostics only."""
    trace = rotation.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    vee = torch.stack(
        [
            rotation[..., 2, 1] - rotation[..., 1, 2],
            rotation[..., 0, 2] - rotation[..., 2, 0],
            rotation[..., 1, 0] - rotation[..., 0, 1],
        ],
        dim=-1,
    )
    sin = torch.sin(theta)
    generic = vee * (theta / (2.0 * sin.clamp_min(1e-12)))[..., None]
    small = vee * 0.5

    # near pi the skew part vanishes; recover the axis from R + I
    sym = (rotation + rotation.transpose(-1, -2)) / 2.0
    outer = (sym - cos[..., None, None] * torch.eye(3, dtype=rotation.dtype, device=rotation.device))
    outer = outer / (1.0 - cos).clamp_min(1e-12)[..., None, None]
    diag = outer.diagonal(dim1=-2, dim2=-1).clamp_min(0.0)
    column = diag.argmax(-1)
    axis = torch.take_along_dim(outer, column[..., None, None].expand(*column.shape, 3, 1), dim=-1)[..., 0]
    axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    axis = torch.where((axis * vee).sum(-1, keepdim=True) < 0, -axis, axis)
    near_pi = axis * theta[..., None]

    result = torch.where((theta < 1e-6)[..., None], small, generic)
    return torch.where((theta > torch.pi - 1e-3)[..., None], near_pi, result)


def geodesic_distance(a: Tensor, b: Tensor) -> Tensor:
    """Angle in radians between rotations (..., 3, 3)."""
    relative = a.transpose(-1, -2) @ b
    trace = relative.diagonal(dim1=-2, dim2=-1).sum(-1)
    return torch.acos(((trace - 1.0) / 2.0).clamp(-1.0, 1.0))


def quaternion_to_matrix(quaternion: Tensor) -> Tensor:
    """(w, x, y, z) quaternions (..., 4), normalized first, to (..., 3, 3)."""
    q = quaternion / quaternion.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
        ],
        dim=-2,
    )


def matrix_to_quaternion(rotation: Tensor) -> Tensor:
    """Rotation matrices (..., 3, 3) to unit quaternions (w, x, y, z) with w >= 0."""
    m = rotation
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    candidates = torch.stack(
        [
            1.0 + m00 + m11 + m22,
            1.0 + m00 - m11 - m22,
            1.0 - m00 + m11 - m22,
            1.0 - m00 - m11 + m22,
        ],
        dim=-1,
    )
    best = candidates.argmax(-1)
    root = torch.sqrt(torch.take_along_dim(candidates, best[..., None], dim=-1)[..., 0].clamp_min(1e-12))
    half = 0.5 / root

    by_w = torch.stack([0.5 * root, (m[..., 2, 1] - m[..., 1, 2]) * half,
                        (m[..., 0, 2] - m[..., 2, 0]) * half, (m[..., 1, 0] - m[..., 0, 1]) * half], -1)
    by_x = torch.stack([(m[..., 2, 1] - m[..., 1, 2]) * half, 0.5 * root,
                        (m[..., 0, 1] + m[..., 1, 0]) * half, (m[..., 0, 2] + m[..., 2, 0]) * half], -1)
    by_y = torch.stack([(m[..., 0, 2] - m[..., 2, 0]) * half, (m[..., 0, 1] + m[..., 1, 0]) * half,
                        0.5 * root, (m[..., 1, 2] + m[..., 2, 1]) * half], -1)
    by_z = torch.stack([(m[..., 1, 0] - m[..., 0, 1]) * half, (m[..., 0, 2] + m[..., 2, 0]) * half,
                        (m[..., 1, 2] + m[..., 2, 1]) * half, 0.5 * root], -1)

    options = torch.stack([by_w, by_x, by_y, by_z], dim=-2)
    q = torch.take_along_dim(options, best[..., None, None].expand(*best.shape, 1, 4), dim=-2)[..., 0, :]
    q = torch.where(q[..., :1] < 0, -q, q)
    return q / q.norm(dim=-1, keepdim=True)


def tangent_frame(normals: Tensor) -> Tensor:
    """
    Deterministic frames (..., 3, 3) whose third column is the unit normal.

    The first tangent comes from the global axis least aligned with the
    normal (lowest index on ties), orthogonalized against it.
    """
    n = normals / normals.norm(dim=-1, keepdim=True)
    axis_index = n.abs().argmin(-1)
    axis = torch.nn.functional.one_hot(axis_index, 3).to(n.dtype)
    t1 = axis - (axis * n).sum(-1, keepdim=True) * n
    t1 = t1 / t1.norm(dim=-1, keepdim=True)
    t2 = torch.linalg.cross(n, t1, dim=-1)
    return torch.stack([t1, t2, n], dim=-1)


def gram_schmidt(matrix: Tensor) -> Tensor:
    """
    Project (..., 3, 3) onto SO(3) by orthonormalizing the first two
    columns; the third is their cross product so det = +1.
    """
    a1 = matrix[..., :, 0]
    a2 = matrix[..., :, 1]
    c1 = a1 / a1.norm(dim=-1, keepdim=True)
    a2 = a2 - (c1 * a2).sum(-1, keepdim=True) * c1
    c2 = a2 / a2.norm(dim=-1, keepdim=True)
    c3 = torch.linalg.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)
