"""On-disk formats: scan bundle directories, CSV sequences, volumes, reports.

A scan bundle directory holds meta.json, frames.raw (u8, row-major within a
frame, frame-major overall), imu.csv, poses_gt.csv when ground truth exists,
and masks.raw when vessel masks were computed. All text outputs are plain
CSV/JSON so runs diff cleanly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .compounding import Volume
from .imu import ImuSeries
from .simulator import ScanBundle

POSE_COLUMNS = ["tx", "ty", "tz", "rx", "ry", "rz"]
IMU_COLUMNS = ["frame_index", "Ox", "Oy", "Oz", "Ax", "Ay", "Az", "gx", "gy", "gz"]


def _write_csv(path, header: list[str], rows: np.ndarray):
    lines = [",".join(header)]
    for row in np.atleast_2d(rows):
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_csv(path, expected_header: list[str]) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    header = [h.strip() for h in lines[0].split(",")]
    if header != expected_header:
        raise ValueError(f"{path}: expected header {','.join(expected_header)}")
    if len(lines) == 1:
        return np.zeros((0, len(expected_header)))
    return np.array([[float(v) for v in line.split(",")] for line in lines[1:]])


def save_poses_csv(path, poses):
    _write_csv(path, POSE_COLUMNS, np.asarray(poses, dtype=float).reshape(-1, 6))


def load_poses_csv(path) -> np.ndarray:
    return _read_csv(path, POSE_COLUMNS)


def save_trajectory_csv(path, traj):
    rows = np.column_stack([np.arange(len(traj.positions)), traj.positions])
    _write_csv(path, ["frame_index", "x", "y", "z"], rows)


def save_imu_csv(path, imu: ImuSeries):
    rows = np.column_stack(
        [np.arange(len(imu)), imu.orientation, imu.acceleration, imu.gravity]
    )
    _write_csv(path, IMU_COLUMNS, rows)


def load_imu_csv(path, dt: float) -> ImuSeries:
    data = _read_csv(path, IMU_COLUMNS)
    return ImuSeries(
        orientation=data[:, 1:4], acceleration=data[:, 4:7], gravity=data[:, 7:10], dt=dt
    )


def save_bundle(directory, bundle: ScanBundle):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.meta)
    meta.update(
        {
            "frames": bundle.n_frames,
            "width": bundle.width,
            "height": bundle.height,
            "spacing": bundle.spacing,
            "dt": bundle.imu.dt,
            "has_poses_gt": bundle.poses_gt is not None,
            "has_masks": bundle.masks is not None,
        }
    )
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    np.clip(bundle.frames, 0, 255).astype(np.uint8).tofile(directory / "frames.raw")
    save_imu_csv(directory / "imu.csv", bundle.imu)
    if bundle.poses_gt is not None:
        save_poses_csv(directory / "poses_gt.csv", bundle.poses_gt)
    if bundle.masks is not None:
        bundle.masks.astype(np.uint8).tofile(directory / "masks.raw")


def load_bundle(directory) -> ScanBundle:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    n, h, w = int(meta["frames"]), int(meta["height"]), int(meta["width"])
    frames = (
        np.fromfile(directory / "frames.raw", dtype=np.uint8)
        .reshape(n, h, w)
        .astype(float)
    )
    imu = load_imu_csv(directory / "imu.csv", dt=float(meta["dt"]))
    poses = None
    if meta.get("has_poses_gt") and (directory / "poses_gt.csv").exists():
        poses = load_poses_csv(directory / "poses_gt.csv")
    masks = None
    if meta.get("has_masks") and (directory / "masks.raw").exists():
        masks = np.fromfile(directory / "masks.raw", dtype=np.uint8).reshape(n, h, w) > 0
    return ScanBundle(
        frames=frames,
        spacing=float(meta["spacing"]),
        imu=imu,
        poses_gt=poses,
        masks=masks,
        meta=meta,
    )


def save_volume(prefix, volume: Volume):
    """Write <prefix>.raw (f32, x varying fastest) and <prefix>.json."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    intensity = volume.intensity().astype(np.float32)
    # grid is indexed (x, y, z); transpose so x is the fastest-varying axis
    intensity.transpose(2, 1, 0).tofile(prefix.with_suffix(".raw"))
    header = {
        "dims": list(intensity.shape),
        "voxel_size_mm": volume.voxel_size,
        "origin_mm": volume.origin.tolist(),
        "dtype": "float32",
        "order": "x-fastest",
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=1))


def save_json(path, payload: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def save_trace_csv(path, trace: list[dict]):
    keys = ["total", "interval", "reorder", "patch", "imu"]
    lines = [",".join(["iteration"] + keys)]
    for i, entry in enumerate(trace):
        lines.append(",".join([str(i)] + [repr(float(entry[k])) for k in keys]))
    Path(path).write_text("\n".join(lines) + "\n")
