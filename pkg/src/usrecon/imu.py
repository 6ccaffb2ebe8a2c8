"""IMU preprocessing and the pose-derived acceleration pseudo-label.

Orientation samples are absolute Euler angles (degrees) in the world frame;
acceleration and gravity share whatever unit the source provides (mm/frame^2
for simulated scans). Downstream losses only ever compare accelerations
through correlation, so the unit cancels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo


@dataclass
class ImuSeries:
    """Per-frame IMU samples: absolute orientation, raw acceleration, gravity."""

    orientation: np.ndarray  # (N, 3) degrees, world frame
    acceleration: np.ndarray  # (N, 3) raw, gravity included
    gravity: np.ndarray  # (N, 3) gravity expressed in the sensor frame
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=float)
        self.acceleration = np.asarray(self.acceleration, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        n = len(self.orientation)
        if self.acceleration.shape != (n, 3) or self.gravity.shape != (n, 3):
            raise ValueError("orientation, acceleration, and gravity must share length")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return len(self.orientation)

    def select(self, idx) -> "ImuSeries":
        """Sub-series at the given frame indices (interval sampling aware)."""
        idx = np.asarray(idx, dtype=int)
        step = int(idx[1] - idx[0]) if len(idx) > 1 else 1
        return replace(
            self,
            orientation=self.orientation[idx].copy(),
            acceleration=self.acceleration[idx].copy(),
            gravity=self.gravity[idx].copy(),
            dt=self.dt * max(step, 1),
        )


def relative_euler(series: ImuSeries) -> np.ndarray:
    """Inter-frame Euler angles from absolute orientations.

    Entry i is the rotation taking frame i's orientation onto frame i+1's,
    i.e. the decomposition of M(O_i)^-1 M(O_i+1).
    """
    if len(series) < 2:
        raise ValueError("need at least two IMU samples")
    out = np.empty((len(series) - 1, 3))
    mats = [geo.euler_to_rotation(o) for o in series.orientation]
    for i in range(len(series) - 1):
        out[i] = geo.rotation_to_euler(mats[i].T @ mats[i + 1])
    return out


def preprocess_acceleration(series: ImuSeries) -> np.ndarray:
    """Remove gravity and centre the series to zero mean per axis.

    The zero-mean adjustment encodes the rest-to-rest scan assumption; adding
    any constant bias to the raw samples leaves the output unchanged.
    """
    if len(series) < 1:
        raise ValueError("need at least one IMU sample")
    a = series.acceleration - series.gravity
    return a - a.mean(axis=0)


def acceleration_from_poses(poses) -> np.ndarray:
    """Pose-derived acceleration at interior frames, zero-mean per axis.

    For frame i (1-based 2..N-1) the raw value is the translation of the
    inverted previous pose plus the translation of the current pose; a uniform
    offset is then removed so the result is comparable to preprocessed IMU
    acceleration.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    if len(poses) < 2:
        raise ValueError("need at least 3 frames (2 inter-frame poses)")
    raw = np.empty((len(poses) - 1, 3))
    for i in range(1, len(poses)):
        R_prev = geo.euler_to_rotation(poses[i - 1, 3:6])
        inv_t = -R_prev.T @ poses[i - 1, :3]
        raw[i - 1] = inv_t + poses[i, :3]
    return raw - raw.mean(axis=0)
