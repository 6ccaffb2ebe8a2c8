"""Ground-truthed synthetic scans: phantom, probe trajectories, rendering, IMU.

Everything here is deterministic for a fixed seed. The internal time unit is
one frame; ``dt`` is carried on the IMU series so physical rates can be
recovered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .imu import ImuSeries

TACTICS = ("linear", "curved", "loop", "sector")

DEFAULT_WIDTH = 248
DEFAULT_HEIGHT = 260
DEFAULT_SPACING = 0.15
DEFAULT_DT = 1.0 / 30.0
DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class Phantom:
    """Voxel intensity field with an optional analytic vessel tube."""

    grid: np.ndarray  # (nx, ny, nz) float32, 0..255
    voxel_size: float  # mm
    origin: np.ndarray  # world position of voxel (0,0,0)
    vessel_centerline: np.ndarray | None = None  # (C, 3) world mm
    vessel_radius: float = 0.0
    vessel_length_mm: float = 0.0
    vessel_volume_ml: float = 0.0

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points; zero outside the grid."""
        pts = (np.asarray(points, dtype=float) - self.origin) / self.voxel_size
        nx, ny, nz = self.grid.shape
        inside = (
            (pts[..., 0] >= 0)
            & (pts[..., 0] <= nx - 1)
            & (pts[..., 1] >= 0)
            & (pts[..., 1] <= ny - 1)
            & (pts[..., 2] >= 0)
            & (pts[..., 2] <= nz - 1)
        )
        p = np.clip(pts, 0, [nx - 1, ny - 1, nz - 1])
        base = np.minimum(np.floor(p).astype(int), [nx - 2, ny - 2, nz - 2])
        f = p - base
        ix, iy, iz = base[..., 0], base[..., 1], base[..., 2]
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        g = self.grid
        val = (
            g[ix, iy, iz] * (1 - fx) * (1 - fy) * (1 - fz)
            + g[ix + 1, iy, iz] * fx * (1 - fy) * (1 - fz)
            + g[ix, iy + 1, iz] * (1 - fx) * fy * (1 - fz)
            + g[ix, iy, iz + 1] * (1 - fx) * (1 - fy) * fz
            + g[ix + 1, iy + 1, iz] * fx * fy * (1 - fz)
            + g[ix + 1, iy, iz + 1] * fx * (1 - fy) * fz
            + g[ix, iy + 1, iz + 1] * (1 - fx) * fy * fz
            + g[ix + 1, iy + 1, iz + 1] * fx * fy * fz
        )
        return np.where(inside, val, 0.0)


@dataclass
class TrajectorySpec:
    """Probe motion recipe for one scan."""

    tactic: str = "linear"
    frames: int = 150
    speed: float = 0.5  # mm per frame along the sweep
    speed_variation: float = 0.0  # relative sinusoidal modulation amplitude
    variation_period: float = 40.0  # frames
    lateral_speed: float = 0.0  # mm per frame along image x
    curvature_deg: float = 0.4  # per-frame out-of-plane bend (curved)
    sweep_deg: float = 30.0  # total fan angle (sector)
    pivot_mm: float = 20.0  # fan pivot distance above the image centre (sector)
    loop_fractions: tuple = (0.3, 0.15, 0.15, 0.15, 0.25)
    seed: int = 0

    def __post_init__(self):
        if self.tactic not in TACTICS:
            raise ValueError(f"unknown tactic {self.tactic!r}")
        if self.frames < 3:
            raise ValueError("a scan needs at least 3 frames")
        if self.tactic == "loop":
            counts = _loop_segment_counts(self.frames, self.loop_fractions)
            if min(counts) < 2:
                raise ValueError("loop segments need at least 2 frames each")


@dataclass
class NoiseSpec:
    """Measurement-noise magnitudes for IMU synthesis."""

    orientation_sigma_deg: float = 0.0
    acceleration_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.orientation_sigma_deg < 0 or self.acceleration_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class ScanBundle:
    """One scan: frame stack, IMU series, and optional ground truth."""

    frames: np.ndarray  # (N, H, W) float64, 0..255
    spacing: float
    imu: ImuSeries
    poses_gt: np.ndarray | None = None  # (N-1, 6)
    masks: np.ndarray | None = None  # (N, H, W) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        n = len(self.frames)
        if len(self.imu) != n:
            raise ValueError("frame count and IMU sample count disagree")
        if self.poses_gt is not None:
            self.poses_gt = np.asarray(self.poses_gt, dtype=float)
            if len(self.poses_gt) != n - 1:
                raise ValueError("expected N-1 ground-truth poses")
        if self.masks is not None and len(self.masks) != n:
            raise ValueError("mask count and frame count disagree")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    def select(self, idx) -> "ScanBundle":
        """Sub-bundle at the given frame indices; ground truth is dropped."""
        idx = np.asarray(idx, dtype=int)
        return ScanBundle(
            frames=self.frames[idx].copy(),
            spacing=self.spacing,
            imu=self.imu.select(idx),
            poses_gt=None,
            masks=None if self.masks is None else self.masks[idx].copy(),
            meta=dict(self.meta),
        )


def _loop_segment_counts(n: int, fractions) -> list[int]:
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 5 or np.any(fr <= 0):
        raise ValueError("loop needs 5 positive segment fractions")
    fr = fr / fr.sum()
    counts = np.maximum(np.round(fr * n).astype(int), 2)
    counts[-1] += n - counts.sum()  # absorb rounding in the last segment
    return counts.tolist()


def _speed_profile(spec: TrajectorySpec, rng: np.random.Generator) -> np.ndarray:
    steps = spec.frames - 1
    base = np.full(steps, spec.speed)
    if spec.speed_variation > 0:
        phase = rng.uniform(0, 2 * np.pi)
        mod = np.sin(2 * np.pi * np.arange(steps) / spec.variation_period + phase)
        base = spec.speed * (1.0 + spec.speed_variation * mod)
    return np.maximum(base, 0.05 * spec.speed)


def generate_trajectory(spec: TrajectorySpec):
    """Ground-truth inter-frame poses for the requested tactic.

    Returns (poses, info); info records designed direction-change frames
    (0-based), the total sweep for sector scans, and the speed profile.
    """
    rng = np.random.default_rng(spec.seed)
    steps = spec.frames - 1
    speeds = _speed_profile(spec, rng)
    poses = np.zeros((steps, 6))
    info: dict = {"change_frames": [], "speeds": speeds}

    if spec.tactic == "linear":
        poses[:, 0] = spec.lateral_speed
        poses[:, 2] = speeds
    elif spec.tactic == "curved":
        poses[:, 2] = speeds
        poses[:, 3] = spec.curvature_deg
    elif spec.tactic == "sector":
        # per-frame fan steps follow the speed profile, normalized so the
        # total sweep is exact
        step_degs = spec.sweep_deg * speeds / speeds.sum()
        pivot = np.array([0.0, -spec.pivot_mm, 0.0])
        for p, step_deg in enumerate(step_degs):
            R = geo.euler_to_rotation([step_deg, 0.0, 0.0])
            poses[p, :3] = pivot - R @ pivot
            poses[p, 3] = step_deg
        info["sweep_deg"] = spec.sweep_deg
    elif spec.tactic == "loop":
        counts = _loop_segment_counts(spec.frames, spec.loop_fractions)
        boundaries = np.cumsum(counts)[:-1]  # first frame index of each later segment
        seg_of_frame = np.searchsorted(boundaries, np.arange(spec.frames), side="right")
        directions = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
        for p in range(steps):
            poses[p, 2] = directions[seg_of_frame[p + 1]] * speeds[p]
        info["change_frames"] = [int(b - 1) for b in boundaries]
        info["segment_counts"] = counts
    return poses, info


def build_phantom(
    size_mm,
    voxel_size: float = 0.5,
    origin=None,
    vessel_centerline=None,
    vessel_radius: float = 0.0,
    seed: int = 0,
    background_mean: float = 130.0,
    background_std: float = 30.0,
    vessel_intensity: float = 25.0,
    blur_sigma: float = 1.2,
) -> Phantom:
    """Speckle-textured block with an optional darker vessel tube.

    The vessel is an analytic tube around a polyline; its exact volume and
    length are recorded so reconstructions can be scored against closed-form
    values. A vessel touching the grid boundary or with non-positive radius
    is rejected.
    """
    size_mm = np.asarray(size_mm, dtype=float)
    shape = np.maximum(np.round(size_mm / voxel_size).astype(int) + 1, 2)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)

    rng = np.random.default_rng(seed)
    grid = rng.normal(0.0, 1.0, tuple(shape))
    grid = ndimage.gaussian_filter(grid, blur_sigma)
    grid -= grid.mean()
    std = grid.std()
    if std > 0:
        grid *= background_std / std
    grid += background_mean
    np.clip(grid, 0.0, 255.0, out=grid)
    grid = grid.astype(np.float32)

    length = 0.0
    volume_ml = 0.0
    centerline = None
    if vessel_centerline is not None:
        centerline = np.asarray(vessel_centerline, dtype=float).reshape(-1, 3)
        if vessel_radius <= 0:
            raise ValueError("vessel radius must be positive")
        upper = origin + (shape - 1) * voxel_size
        if np.any(centerline - vessel_radius <= origin) or np.any(centerline + vessel_radius >= upper):
            raise ValueError("vessel does not fit strictly inside the phantom")
        length = float(np.linalg.norm(np.diff(centerline, axis=0), axis=1).sum())
        volume_ml = float(np.pi * vessel_radius**2 * length / 1000.0)
        _carve_tube(grid, origin, voxel_size, centerline, vessel_radius, vessel_intensity)

    return Phantom(
        grid=grid,
        voxel_size=voxel_size,
        origin=origin,
        vessel_centerline=centerline,
        vessel_radius=vessel_radius,
        vessel_length_mm=length,
        vessel_volume_ml=volume_ml,
    )


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(points - proj, axis=-1)


def polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Minimum distance from points to a polyline (single point allowed)."""
    polyline = np.asarray(polyline, dtype=float).reshape(-1, 3)
    if len(polyline) == 1:
        return np.linalg.norm(points - polyline[0], axis=-1)
    best = None
    for a, b in zip(polyline[:-1], polyline[1:]):
        d = _segment_distance(points, a, b)
        best = d if best is None else np.minimum(best, d)
    return best


def _carve_tube(grid, origin, voxel_size, centerline, radius, intensity):
    lo = np.floor((centerline.min(axis=0) - radius - voxel_size - origin) / voxel_size).astype(int)
    hi = np.ceil((centerline.max(axis=0) + radius + voxel_size - origin) / voxel_size).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(grid.shape) - 1)
    axes = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
    ix, iy, iz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([ix, iy, iz], axis=-1) * voxel_size + origin
    dist = polyline_distance(pts.reshape(-1, 3), centerline).reshape(ix.shape)
    sub = grid[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    sub[dist <= radius] = intensity


def render_scan(phantom: Phantom, poses, width: int, height: int, spacing: float) -> np.ndarray:
    """Sample the phantom on every frame plane; out-of-grid pixels are 0.

    Frames are quantized to whole intensity units so in-memory scans match
    their on-disk representation bit for bit.
    """
    traj = geo.accumulate_trajectory(poses)
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    local = geo.pixel_to_local(u, v, width, height, spacing).reshape(-1, 3)
    frames = np.empty((len(traj), height, width))
    for i in range(len(traj)):
        world = local @ traj.rotations[i].T + traj.positions[i]
        frames[i] = phantom.sample(world).reshape(height, width)
    return np.round(np.clip(frames, 0.0, 255.0))


def vessel_masks(phantom: Phantom, poses, width: int, height: int, spacing: float) -> np.ndarray:
    """Analytic per-frame vessel cross-section masks (True inside the tube)."""
    if phantom.vessel_centerline is None:
        raise ValueError("phantom has no vessel")
    traj = geo.accumulate_trajectory(poses)
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    local = geo.pixel_to_local(u, v, width, height, spacing).reshape(-1, 3)
    line = phantom.vessel_centerline
    masks = np.empty((len(traj), height, width), dtype=bool)
    for i in range(len(traj)):
        world = local @ traj.rotations[i].T + traj.positions[i]
        if len(line) > 16:
            # only nearby polyline segments can be within one radius
            lo = max(i - 12, 0)
            hi = min(i + 13, len(line))
            seg = line[lo:hi]
        else:
            seg = line
        masks[i] = (polyline_distance(world, seg) <= phantom.vessel_radius).reshape(height, width)
    return masks


def synthesize_imu(poses, noise: NoiseSpec | None = None, gravity=None, dt: float = DEFAULT_DT) -> ImuSeries:
    """Per-frame IMU readings consistent with the given ground-truth poses.

    Orientation is the accumulated rotation as absolute Euler angles plus
    optional noise; acceleration is the second central difference of frame
    centres plus gravity expressed in the sensor frame (zero-padded at the
    scan ends where the difference is undefined). The gravity column carries
    the exact sensor-frame gravity so preprocessing can remove it.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    if len(poses) < 2:
        raise ValueError("need at least 3 frames of motion")
    noise = noise or NoiseSpec()
    gravity = DEFAULT_GRAVITY if gravity is None else np.asarray(gravity, dtype=float)
    rng = np.random.default_rng(noise.seed)

    traj = geo.accumulate_trajectory(poses)
    n = len(traj)
    orientation = np.array([geo.rotation_to_euler(traj.rotations[i]) for i in range(n)])
    accel = np.zeros((n, 3))
    accel[1:-1] = traj.positions[2:] - 2 * traj.positions[1:-1] + traj.positions[:-2]
    g_sensor = np.einsum("nij,j->ni", traj.rotations.transpose(0, 2, 1), gravity)

    if noise.orientation_sigma_deg > 0:
        orientation = geo.wrap_angle(
            orientation + rng.normal(0, noise.orientation_sigma_deg, orientation.shape)
        )
    measured = accel + g_sensor
    if noise.acceleration_sigma > 0:
        measured = measured + rng.normal(0, noise.acceleration_sigma, measured.shape)
    return ImuSeries(orientation=orientation, acceleration=measured, gravity=g_sensor, dt=dt)


def compose_pose_chain(poses, start: int, stop: int) -> np.ndarray:
    """Single pose equivalent to original poses start..stop-1."""
    return geo.matrix_to_pose(geo.chain_matrix(poses, start, stop))


def augment(bundle: ScanBundle, op: str, seed: int = 0, *, k: int | None = None, max_k: int = 11) -> ScanBundle:
    """Derive a new bundle by subsequence cut, interval sampling, or inversion.

    Ground-truth poses are carried through exactly: interval sampling composes
    consecutive originals, inversion reverses the order and inverts each pose.
    """
    rng = np.random.default_rng(seed)
    n = bundle.n_frames

    if op == "subsequence":
        length = int(rng.integers(3, n + 1))
        start = int(rng.integers(0, n - length + 1))
        idx = np.arange(start, start + length)
        new_poses = None
        if bundle.poses_gt is not None:
            new_poses = bundle.poses_gt[start : start + length - 1].copy()
    elif op == "interval":
        if k is None:
            k = int(rng.integers(1, max_k + 1))
        if k < 1:
            raise ValueError("interval must be >= 1")
        idx = np.arange(0, n, k)
        new_poses = None
        if bundle.poses_gt is not None:
            new_poses = np.array(
                [compose_pose_chain(bundle.poses_gt, a, b) for a, b in zip(idx[:-1], idx[1:])]
            )
    elif op == "invert":
        idx = np.arange(n)[::-1]
        new_poses = None
        if bundle.poses_gt is not None:
            new_poses = np.array(
                [geo.invert_pose(p) for p in bundle.poses_gt[::-1]]
            )
    else:
        raise ValueError(f"unknown augmentation {op!r}")

    if len(idx) < 3:
        raise ValueError("augmented scan would be shorter than 3 frames")

    out = bundle.select(idx)
    out.poses_gt = new_poses
    out.meta = dict(bundle.meta, augment=op)
    return out


def simulate_scan(
    spec: TrajectorySpec | None = None,
    *,
    noise: NoiseSpec | None = None,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    spacing: float = DEFAULT_SPACING,
    dt: float = DEFAULT_DT,
    voxel_size: float = 0.5,
    vessel: bool = True,
    vessel_radius: float = 1.8,
    compute_masks: bool = False,
    phantom: Phantom | None = None,
    **spec_kw,
):
    """Full synthetic scan: phantom, trajectory, rendered frames, IMU.

    Returns (bundle, phantom). Pass a prebuilt phantom to render several
    trajectories against the same anatomy.
    """
    spec = spec or TrajectorySpec(**spec_kw)
    poses, info = generate_trajectory(spec)
    traj = geo.accumulate_trajectory(poses)

    if phantom is None:
        phantom = _phantom_for_trajectory(
            traj, width, height, spacing, voxel_size, vessel, vessel_radius, spec
        )

    frames = render_scan(phantom, poses, width, height, spacing)
    series = synthesize_imu(poses, noise=noise, dt=dt)
    masks = None
    if compute_masks and phantom.vessel_centerline is not None:
        masks = vessel_masks(phantom, poses, width, height, spacing)

    step_sizes = np.linalg.norm(poses[:, :3], axis=1)
    meta = {
        "tactic": spec.tactic,
        "seed": spec.seed,
        "frames": spec.frames,
        "width": width,
        "height": height,
        "spacing": spacing,
        "dt": dt,
        "nominal_speed": float(step_sizes.mean()),
        "change_frames": info.get("change_frames", []),
        "vessel_volume_ml": phantom.vessel_volume_ml,
        "vessel_length_mm": phantom.vessel_length_mm,
        "vessel_radius": phantom.vessel_radius,
    }
    if "sweep_deg" in info:
        meta["sweep_deg"] = info["sweep_deg"]
    bundle = ScanBundle(
        frames=frames, spacing=spacing, imu=series, poses_gt=poses, masks=masks, meta=meta
    )
    return bundle, phantom


def _phantom_for_trajectory(traj, width, height, spacing, voxel_size, vessel, vessel_radius, spec):
    corners_px = np.array([[0, 0], [width, 0], [0, height], [width, height]], dtype=float)
    pts = []
    for i in range(len(traj)):
        local = geo.pixel_to_local(corners_px[:, 0], corners_px[:, 1], width, height, spacing)
        pts.append(local @ traj.rotations[i].T + traj.positions[i])
    pts = np.concatenate(pts, axis=0)
    margin = max(3.0, 2.5 * vessel_radius) + 2 * voxel_size
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    # snap the origin to the voxel lattice so identity-pose pixels align exactly
    lo = np.floor(lo / voxel_size) * voxel_size

    centerline = None
    radius = 0.0
    if vessel:
        radius = vessel_radius
        if spec.tactic == "loop":
            zs = traj.positions[:, 2]
            centerline = np.array(
                [traj.positions[int(np.argmin(zs))], traj.positions[int(np.argmax(zs))]]
            )
        elif spec.tactic == "linear":
            centerline = np.array([traj.positions[0], traj.positions[-1]])
        else:
            centerline = traj.positions.copy()
    return build_phantom(
        size_mm=hi - lo,
        voxel_size=voxel_size,
        origin=lo,
        vessel_centerline=centerline,
        vessel_radius=radius,
        seed=spec.seed,
    )
