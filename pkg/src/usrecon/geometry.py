"""Rigid-transform algebra for probe trajectories.

Conventions used throughout the package:

* Euler angles are degrees, applied intrinsically in Z-Y-X order, i.e.
  ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
* Angles returned by any matrix decomposition are canonicalized to
  ``(-180, 180]``.
* A pose is the 6-vector ``(tx, ty, tz, rx, ry, rz)`` with translations in
  millimetres; ``pose_to_matrix`` builds the homogeneous transform that maps
  the next frame's coordinates into the current frame.
* Image axes: pixel ``u`` runs along lateral ``x``, pixel ``v`` along axial
  ``y``, and the elevation direction is ``z``; the frame origin sits at the
  image centre, so pixel ``(width/2, height/2)`` maps to the frame's world
  position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GIMBAL_EPS = 1e-12


def wrap_angle(deg):
    """Wrap angles (degrees) into the canonical range (-180, 180]."""
    a = np.asarray(deg, dtype=float)
    wrapped = np.remainder(a + 180.0, 360.0) - 180.0
    wrapped = np.where(wrapped == -180.0, 180.0, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


def angle_difference(a, b):
    """Shortest-arc difference a - b in degrees, in (-180, 180]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def euler_to_rotation(e) -> np.ndarray:
    """Build a rotation matrix from (rx, ry, rz) degrees, intrinsic Z-Y-X."""
    rx, ry, rz = np.deg2rad(np.asarray(e, dtype=float))
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )


def rotation_to_euler(R) -> np.ndarray:
    """Decompose a rotation matrix into (rx, ry, rz) degrees.

    At gimbal lock (|ry| = 90 deg) the decomposition is degenerate; rz is
    forced to 0 and the remaining freedom is absorbed into rx, so the result
    always reconstructs R.
    """
    R = np.asarray(R, dtype=float)
    sy = np.hypot(R[0, 0], R[1, 0])
    if sy > _GIMBAL_EPS:
        rx = np.arctan2(R[2, 1], R[2, 2])
        ry = np.arctan2(-R[2, 0], sy)
        rz = np.arctan2(R[1, 0], R[0, 0])
    else:
        rx = np.arctan2(-R[1, 2], R[1, 1])
        ry = np.arctan2(-R[2, 0], sy)
        rz = 0.0
    return wrap_angle(np.rad2deg(np.array([rx, ry, rz])))


def pose_to_matrix(pose) -> np.ndarray:
    """6-vector (tx,ty,tz,rx,ry,rz) -> 4x4 homogeneous transform."""
    pose = np.asarray(pose, dtype=float)
    T = np.eye(4)
    T[:3, :3] = euler_to_rotation(pose[3:6])
    T[:3, 3] = pose[:3]
    return T


def matrix_to_pose(T) -> np.ndarray:
    """4x4 homogeneous transform -> 6-vector (tx,ty,tz,rx,ry,rz)."""
    T = np.asarray(T, dtype=float)
    return np.concatenate([T[:3, 3], rotation_to_euler(T[:3, :3])])


def compose(a, b) -> np.ndarray:
    """Compose two 4x4 transforms (a applied first in the chain sense a@b)."""
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def invert(T) -> np.ndarray:
    """Invert a rigid 4x4 transform without a general matrix inverse."""
    T = np.asarray(T, dtype=float)
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def compose_pose(a, b) -> np.ndarray:
    """Compose two 6-vector poses via their matrices."""
    return matrix_to_pose(pose_to_matrix(a) @ pose_to_matrix(b))


def invert_pose(pose) -> np.ndarray:
    """Pose of the inverse transform."""
    return matrix_to_pose(invert(pose_to_matrix(pose)))


def chain_matrix(poses, start: int, stop: int) -> np.ndarray:
    """Composed transform covering original pose slots [start, stop).

    For start > stop the inverse chain is returned, so the result always maps
    frame ``stop`` coordinates into frame ``start`` coordinates.
    """
    poses = np.asarray(poses, dtype=float)
    if start == stop:
        return np.eye(4)
    if start < stop:
        T = np.eye(4)
        for i in range(start, stop):
            T = T @ pose_to_matrix(poses[i])
        return T
    return invert(chain_matrix(poses, stop, start))


@dataclass
class Trajectory:
    """Per-frame world positions (mm) and accumulated rotations."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 3, 3)

    def __len__(self) -> int:
        return len(self.positions)

    def transform(self, i: int) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotations[i]
        T[:3, 3] = self.positions[i]
        return T


def accumulate_trajectory(poses) -> Trajectory:
    """Chain N-1 inter-frame poses into N per-frame world placements.

    Frame 0 is the origin with identity rotation; frame i carries the product
    of the first i pose matrices.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    n = len(poses) + 1
    positions = np.zeros((n, 3))
    rotations = np.zeros((n, 3, 3))
    T = np.eye(4)
    rotations[0] = np.eye(3)
    for i, pose in enumerate(poses):
        T = T @ pose_to_matrix(pose)
        positions[i + 1] = T[:3, 3]
        rotations[i + 1] = T[:3, :3]
    return Trajectory(positions=positions, rotations=rotations)


def frame_normal(traj: Trajectory, i: int) -> np.ndarray:
    """Unit normal of frame i: the accumulated rotation applied to +z."""
    if not 0 <= i < len(traj):
        raise IndexError(f"frame index {i} out of range for {len(traj)} frames")
    return traj.rotations[i] @ np.array([0.0, 0.0, 1.0])


def pixel_to_local(u, v, width: int, height: int, spacing: float) -> np.ndarray:
    """Pixel coordinates -> metric coordinates in the frame plane (z = 0)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = (u - width / 2.0) * spacing
    y = (v - height / 2.0) * spacing
    return np.stack([x, y, np.zeros_like(x)], axis=-1)


def pixel_to_world(traj: Trajectory, i: int, u, v, width: int, height: int, spacing: float) -> np.ndarray:
    """Map pixel (u, v) of frame i into world coordinates (mm).

    Accepts scalars or arrays for u/v. Raises on out-of-bounds pixels; the
    full closed pixel rectangle [0, width] x [0, height] is considered valid
    so that corner and centre coordinates are addressable exactly.
    """
    if not 0 <= i < len(traj):
        raise IndexError(f"frame index {i} out of range for {len(traj)} frames")
    u_arr = np.asarray(u, dtype=float)
    v_arr = np.asarray(v, dtype=float)
    if np.any(u_arr < 0) or np.any(u_arr > width) or np.any(v_arr < 0) or np.any(v_arr > height):
        raise ValueError("pixel coordinates out of image bounds")
    local = pixel_to_local(u_arr, v_arr, width, height, spacing)
    return local @ traj.rotations[i].T + traj.positions[i]
