"""Differentiable (torch) twins of the numpy transform algebra.

Used by the fusion estimator and the online losses, where gradients must flow
through pose composition and decomposition. All functions are batched over
leading dimensions and operate in float64. The matrix-to-Euler decomposition
uses the regular (non-gimbal) branch only; online estimates live far from
|pitch| = 90 deg, and the numpy twin remains the authority for edge cases.
"""

from __future__ import annotations

import numpy as np
import torch

DEG = np.pi / 180.0


def to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def euler_to_rotation_t(e: torch.Tensor) -> torch.Tensor:
    """(..., 3) degrees -> (..., 3, 3), intrinsic Z-Y-X."""
    r = e * DEG
    cx, sx = torch.cos(r[..., 0]), torch.sin(r[..., 0])
    cy, sy = torch.cos(r[..., 1]), torch.sin(r[..., 1])
    cz, sz = torch.cos(r[..., 2]), torch.sin(r[..., 2])
    rows = [
        torch.stack([cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx], dim=-1),
        torch.stack([sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx], dim=-1),
        torch.stack([-sy, cy * sx, cy * cx], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def rotation_to_euler_t(R: torch.Tensor) -> torch.Tensor:
    """(..., 3, 3) -> (..., 3) degrees; assumes |pitch| < 90 deg."""
    sy = torch.hypot(R[..., 0, 0], R[..., 1, 0])
    rx = torch.atan2(R[..., 2, 1], R[..., 2, 2])
    ry = torch.atan2(-R[..., 2, 0], sy)
    rz = torch.atan2(R[..., 1, 0], R[..., 0, 0])
    return torch.stack([rx, ry, rz], dim=-1) / DEG


def pose_to_matrix_t(pose: torch.Tensor) -> torch.Tensor:
    """(..., 6) -> (..., 4, 4) homogeneous transform."""
    R = euler_to_rotation_t(pose[..., 3:6])
    top = torch.cat([R, pose[..., :3].unsqueeze(-1)], dim=-1)
    bottom = torch.zeros_like(top[..., :1, :])
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def matrix_to_pose_t(T: torch.Tensor) -> torch.Tensor:
    """(..., 4, 4) -> (..., 6)."""
    return torch.cat([T[..., :3, 3], rotation_to_euler_t(T[..., :3, :3])], dim=-1)


def invert_t(T: torch.Tensor) -> torch.Tensor:
    """Rigid inverse via the transpose trick, batched."""
    R = T[..., :3, :3]
    Rt = R.transpose(-1, -2)
    t = T[..., :3, 3].unsqueeze(-1)
    top = torch.cat([Rt, -Rt @ t], dim=-1)
    bottom = torch.zeros_like(top[..., :1, :])
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def invert_pose_t(pose: torch.Tensor) -> torch.Tensor:
    return matrix_to_pose_t(invert_t(pose_to_matrix_t(pose)))


def compose_pose_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return matrix_to_pose_t(pose_to_matrix_t(a) @ pose_to_matrix_t(b))


def pearson_t(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12):
    """Pearson correlation of two flattened tensors.

    Returns (correlation, degenerate); for zero-variance input the correlation
    is defined as 0 (so a 1 - r loss term becomes 1) and the flag is set.
    """
    a = a.reshape(-1)
    b = b.reshape(-1)
    a = a - a.mean()
    b = b - b.mean()
    sa = torch.sqrt((a * a).mean())
    sb = torch.sqrt((b * b).mean())
    if float(sa.detach()) < eps or float(sb.detach()) < eps:
        return torch.zeros((), dtype=a.dtype), True
    return (a * b).mean() / (sa * sb), False
