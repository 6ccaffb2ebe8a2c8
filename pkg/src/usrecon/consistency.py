"""Online consistency losses and test-time refinement of the fusion model.

Four self-supervised signals are available on an unlabeled test scan:

* interval consistency: estimates over interval-sampled subsequences must
  compose like the transforms they claim to be;
* reorder consistency: for loop scans, re-estimating a reordered traversal of
  the loop segments must agree with the reordered original estimates;
* patch motion consistency: per-patch image content change (accumulated along
  an interpolated image geodesic) must co-vary with per-patch 3D displacement;
* IMU agreement: pose-derived acceleration must correlate with the measured
  acceleration, and estimated rotations must stay near the IMU Euler deltas.

``refine`` descends the weighted sum of these with respect to the fusion
model parameters, re-running the estimator on the scan and its subsequences
every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import diffgeo
from . import geometry as geo
from .estimator import (
    FEATURE_DIM,
    FusionModel,
    estimate_shift,
    forward,
    forward_batch,
    forward_core,
    pair_feature_matrix,
)
from .imu import ImuSeries, acceleration_from_poses, preprocess_acceleration, relative_euler
from .simulator import ScanBundle

log = logging.getLogger(__name__)

# Eight admissible reorderings of the five loop segments (index, flipped).
PATH_TEMPLATES = (
    ((0, False), (1, False), (4, False)),
    ((0, False), (2, True), (4, False)),
    ((0, False), (3, False), (4, False)),
    ((0, False), (1, False), (3, True), (2, True), (4, False)),
    ((0, False), (2, True), (1, True), (3, False), (4, False)),
    ((0, False), (2, True), (3, True), (1, False), (4, False)),
    ((0, False), (3, False), (1, True), (2, True), (4, False)),
    ((0, False), (3, False), (2, False), (1, False), (4, False)),
)


# --------------------------------------------------------------------------
# interval subsequences and interval consistency
# --------------------------------------------------------------------------


def interval_subsequences(n_frames: int, max_interval: int) -> dict[int, list[np.ndarray]]:
    """Frame index lists {k: [I_(k,s) for s in 0..k-1]} for k = 1..max_interval.

    For every interval k the subsequences partition the frame set.
    """
    if max_interval < 2:
        raise ValueError("max interval must be at least 2")
    if n_frames <= max_interval:
        raise ValueError("scan must be longer than the largest interval")
    return {
        k: [np.arange(s, n_frames, k) for s in range(k)]
        for k in range(1, max_interval + 1)
    }


def interval_consistency_loss(estimates: dict[int, np.ndarray]) -> float:
    """Deviation between interval-k estimates and composed shorter intervals.

    ``estimates[k]`` holds the pose between frames i and i+k at row i. For
    every (k, k1) split the mean absolute deviation over rows and components
    is computed, then averaged over all splits.
    """
    ks = sorted(estimates)
    if not ks or ks[0] != 1:
        raise ValueError("estimates must include interval 1")
    n = len(estimates[1]) + 1
    K = ks[-1]
    for k in range(1, K + 1):
        if k not in estimates or len(estimates[k]) != n - k:
            raise ValueError(f"missing or misshapen estimates for interval {k}")
    total = 0.0
    groups = 0
    for k in range(2, K + 1):
        for k1 in range(1, k):
            devs = []
            for i in range(n - k):
                combined = geo.compose_pose(estimates[k1][i], estimates[k - k1][i + k1])
                devs.append(np.abs(estimates[k][i] - combined).mean())
            total += float(np.mean(devs))
            groups += 1
    if groups == 0:
        raise ValueError("need max interval >= 2")
    return total / groups


# --------------------------------------------------------------------------
# direction changes, loop segments, reordering
# --------------------------------------------------------------------------


def detect_direction_changes(poses, threshold_deg: float = 90.0, min_norm: float = 1e-12) -> list[int]:
    """Frames where the translation direction turns by more than the threshold.

    Returns 0-based frame indices; frame f is reported when the translations
    arriving at and leaving f disagree. Pairs with a (near-)zero translation
    are skipped since their direction is undefined.
    """
    t = np.asarray(poses, dtype=float).reshape(-1, 6)[:, :3]
    if len(t) < 2:
        raise ValueError("need at least 3 frames (2 poses)")
    norms = np.linalg.norm(t, axis=1)
    cos_thr = np.cos(np.deg2rad(threshold_deg))
    changes = []
    for i in range(len(t) - 1):
        if norms[i] < min_norm or norms[i + 1] < min_norm:
            continue
        cosang = t[i] @ t[i + 1] / (norms[i] * norms[i + 1])
        if cosang < cos_thr:
            changes.append(i + 1)
    return changes


def split_segments(n_frames: int, change_frames) -> list[tuple[int, int]] | None:
    """Split frames into five segments at four turning frames.

    Returns inclusive (start, end) ranges, or None (reorder-skip) when the
    change count is not four or any segment would be shorter than 2 frames.
    """
    changes = sorted(int(c) for c in change_frames)
    if len(changes) != 4:
        return None
    bounds = [-1] + changes + [n_frames - 1]
    segments = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < 2:  # fewer than two frames
            return None
        segments.append((a + 1, b))
    return segments


def reorder_frame_order(segments, template) -> np.ndarray:
    """Frame index sequence visiting the template's segments in order."""
    order = []
    for seg_id, flipped in template:
        start, end = segments[seg_id]
        idx = np.arange(start, end + 1)
        order.append(idx[::-1] if flipped else idx)
    return np.concatenate(order)


def reorder_sequence(bundle: ScanBundle, template, segments):
    """Reordered bundle for one path template.

    The IMU orientation is carried per frame; the acceleration channel is
    zeroed (its temporal meaning does not survive reordering) by copying the
    gravity column. Returns (bundle, frame_order, junctions) where junctions
    lists (slot, frame_a, frame_b) for the non-adjacent joins.
    """
    order = reorder_frame_order(segments, template)
    imu = bundle.imu
    new_imu = ImuSeries(
        orientation=imu.orientation[order].copy(),
        acceleration=imu.gravity[order].copy(),
        gravity=imu.gravity[order].copy(),
        dt=imu.dt,
    )
    new_bundle = ScanBundle(
        frames=bundle.frames[order].copy(),
        spacing=bundle.spacing,
        imu=new_imu,
        poses_gt=None,
        masks=None,
        meta=dict(bundle.meta, reordered=True),
    )
    junctions = [
        (m, int(order[m]), int(order[m + 1]))
        for m in range(len(order) - 1)
        if abs(int(order[m + 1]) - int(order[m])) != 1
    ]
    return new_bundle, order, junctions


def reorder_targets(poses, frame_order) -> np.ndarray:
    """Pose targets for a reordered traversal, built from original estimates.

    Adjacent original frames reuse the original pose (inverted when walked
    backwards); non-adjacent joins compose the original chain between the two
    frames.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    order = np.asarray(frame_order, dtype=int)
    out = np.empty((len(order) - 1, 6))
    for m in range(len(order) - 1):
        fa, fb = int(order[m]), int(order[m + 1])
        if fb - fa == 1:
            out[m] = poses[fa]
        elif fa - fb == 1:
            out[m] = geo.invert_pose(poses[fb])
        else:
            out[m] = geo.matrix_to_pose(geo.chain_matrix(poses, fa, fb))
    return out


def reorder_consistency_loss(
    model: FusionModel,
    bundle: ScanBundle,
    poses,
    seed: int = 0,
    template=None,
    threshold_deg: float = 90.0,
    segments=None,
):
    """(loss, skipped): re-estimate one reordered traversal vs reordered poses.

    Non-loop scans (no valid five-segment split) return (0.0, True). Segments
    are detected from ``poses`` unless given explicitly.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    if segments is None:
        changes = detect_direction_changes(poses, threshold_deg)
        segments = split_segments(bundle.n_frames, changes)
    if segments is None:
        return 0.0, True
    if template is None:
        rng = np.random.default_rng(seed)
        template = PATH_TEMPLATES[int(rng.integers(len(PATH_TEMPLATES)))]
    reordered, order, _ = reorder_sequence(bundle, template, segments)
    est = forward(model, reordered).poses
    targets = reorder_targets(poses, order)
    return float(np.abs(est - targets).mean()), False


# --------------------------------------------------------------------------
# image interpolation and patch machinery
# --------------------------------------------------------------------------


def interpolate_images(frame_a, frame_b, count: int, mode: str = "linear"):
    """``count`` intermediate images between two frames.

    linear: plain cross-fade with weights t/(count+1). flow: a translation-only
    warp (correlation-peak shift) combined with the cross-fade, giving a
    nonlinear image path.
    """
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("frames must share a size")
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.empty((0,) + a.shape)
    w = np.arange(1, count + 1) / (count + 1)
    if mode == "linear":
        return (1 - w)[:, None, None] * a + w[:, None, None] * b
    if mode == "flow":
        dy, dx = estimate_shift(a, b)
        out = np.empty((count,) + a.shape)
        for t, wt in enumerate(w):
            a_w = ndimage.shift(a, (wt * dy, wt * dx), order=1, mode="nearest")
            b_w = ndimage.shift(b, (-(1 - wt) * dy, -(1 - wt) * dx), order=1, mode="nearest")
            out[t] = (1 - wt) * a_w + wt * b_w
        return out
    raise ValueError(f"unknown interpolator {mode!r}")


def _pad_to_grid(img: np.ndarray, grid) -> np.ndarray:
    p, q = grid
    h, w = img.shape
    return np.pad(img, ((0, (-h) % p), (0, (-w) % q)), mode="edge")


def _patch_l1(img: np.ndarray, grid) -> np.ndarray:
    """Per-patch L1 mass of an image, flattened row-major over the grid."""
    p, q = grid
    padded = _pad_to_grid(np.abs(img), grid)
    h, w = padded.shape
    return padded.reshape(p, h // p, q, w // q).sum(axis=(1, 3)).ravel()


def patch_content_difference(frame_a, frame_b, count: int, grid=(32, 32), mode: str = "linear") -> np.ndarray:
    """Per-patch content change accumulated along the interpolated image path.

    The path includes the endpoints, so with zero intermediates this is the
    direct per-patch L1 difference; with the linear interpolator the sum
    telescopes to the same value for any count.
    """
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    mids = interpolate_images(a, b, count, mode=mode)
    seq = [a, *mids, b]
    total = np.zeros(grid[0] * grid[1])
    for s, t in zip(seq[:-1], seq[1:]):
        total += _patch_l1(s - t, grid)
    return total


def direct_patch_content_difference(frame_a, frame_b, grid=(32, 32)) -> np.ndarray:
    """Endpoint-only per-patch L1 difference (linear-path shortcut)."""
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("frames must share a size")
    return _patch_l1(a - b, grid)


def patch_sample_points(width: int, height: int, grid) -> np.ndarray:
    """(P*Q, 5, 2) pixel coordinates: four corners plus centre per patch.

    Patches tile the edge-padded image, so the rightmost/bottom patches may
    extend past the original frame; their geometry stays consistent across
    frames.
    """
    p, q = grid
    ph = -(-height // p)  # padded patch height in px
    pw = -(-width // q)
    pts = np.empty((p, q, 5, 2))
    for r in range(p):
        v0, v1 = r * ph, (r + 1) * ph
        for c in range(q):
            u0, u1 = c * pw, (c + 1) * pw
            pts[r, c] = [
                [u0, v0],
                [u1, v0],
                [u0, v1],
                [u1, v1],
                [(u0 + u1) / 2, (v0 + v1) / 2],
            ]
    return pts.reshape(p * q, 5, 2)


def patch_3d_distance(transform_a, transform_b, width: int, height: int, spacing: float, grid=(32, 32)) -> np.ndarray:
    """Mean 3D displacement of each patch between two frame placements.

    ``transform_a/b`` are 4x4 world transforms of the frames; each patch is
    represented by its corners and centre.
    """
    pts = patch_sample_points(width, height, grid)
    local = geo.pixel_to_local(pts[..., 0], pts[..., 1], width, height, spacing)
    Ta = np.asarray(transform_a, dtype=float)
    Tb = np.asarray(transform_b, dtype=float)
    wa = local @ Ta[:3, :3].T + Ta[:3, 3]
    wb = local @ Tb[:3, :3].T + Tb[:3, 3]
    return np.linalg.norm(wa - wb, axis=-1).mean(axis=-1)


def _zscore(values: np.ndarray, eps: float = 1e-12):
    mu = values.mean()
    sd = values.std()
    if sd < eps:
        return None
    return (values - mu) / sd


def patch_motion_consistency_loss(
    bundle: ScanBundle,
    poses,
    max_interval: int = 11,
    grid=(32, 32),
    interp_count: int = 63,
    mode: str = "linear",
    use_direct_linear: bool = True,
    pairs=None,
):
    """(loss, degenerate): z-scored content change vs z-scored 3D displacement.

    Statistics are pooled over every frame pair (i, i+k) for k up to
    ``max_interval`` and every patch. ``poses`` is either the main pose
    sequence (pair transforms come from the accumulated trajectory) or a dict
    of per-interval estimates {k: (N-k, 6)} whose rows are used directly. A
    constant c or d pool (for example a static scan) is degenerate: the loss
    is defined as 0 and flagged.
    """
    by_interval = isinstance(poses, dict)
    if not by_interval:
        poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    n = bundle.n_frames
    if pairs is None:
        pairs = [(i, i + k) for k in range(1, max_interval + 1) for i in range(n - k)]
    traj = None if by_interval else geo.accumulate_trajectory(poses)
    c_rows = []
    d_rows = []
    identity = np.eye(4)
    for i, j in pairs:
        if use_direct_linear and mode == "linear":
            c_rows.append(direct_patch_content_difference(bundle.frames[i], bundle.frames[j], grid))
        else:
            c_rows.append(
                patch_content_difference(bundle.frames[i], bundle.frames[j], interp_count, grid, mode)
            )
        if by_interval:
            pair_transform = geo.pose_to_matrix(poses[j - i][i])
            d_rows.append(
                patch_3d_distance(
                    identity, pair_transform, bundle.width, bundle.height, bundle.spacing, grid
                )
            )
        else:
            d_rows.append(
                patch_3d_distance(
                    traj.transform(i), traj.transform(j), bundle.width, bundle.height, bundle.spacing, grid
                )
            )
    c = np.concatenate(c_rows)
    d = np.concatenate(d_rows)
    zc = _zscore(c)
    zd = _zscore(d)
    if zc is None or zd is None:
        log.warning("degenerate patch statistics; patch consistency loss fixed at 0")
        return 0.0, True
    return float(np.abs(zc - zd).mean()), False


# --------------------------------------------------------------------------
# IMU agreement
# --------------------------------------------------------------------------


def imu_agreement_loss(poses, imu: ImuSeries):
    """(loss, degenerate): acceleration correlation plus rotation agreement.

    The correlation term compares pose-derived acceleration with preprocessed
    IMU acceleration at interior frames; the rotation term is the mean
    absolute difference between estimated rotations and the IMU Euler deltas.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    if len(poses) < 3:
        raise ValueError("need at least 4 frames for the acceleration term")
    a_hat = acceleration_from_poses(poses)
    a_imu = preprocess_acceleration(imu)[1:-1]
    r, degenerate = diffgeo.pearson_t(diffgeo.to_tensor(a_hat), diffgeo.to_tensor(a_imu))
    if degenerate:
        log.warning("zero-variance acceleration; correlation term fixed at 1")
    phi = relative_euler(imu)
    euler_term = float(np.abs(poses[:, 3:] - phi).mean())
    return (1.0 - float(r)) + euler_term, degenerate


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------


@dataclass
class RefineConfig:
    """Hyperparameters of the online refinement loop."""

    iterations: int = 60
    learning_rate: float = 2e-6
    w_interval: float = 1.0
    w_reorder: float = 1.0
    w_patch: float = 1.0
    w_imu: float = 1.0
    max_interval: int = 11
    interp_count: int = 63
    patch_grid: tuple = (32, 32)
    interpolator: str = "linear"
    use_direct_linear: bool = True
    direction_threshold_deg: float = 90.0
    optimizer: str = "sgd"
    max_triples: int = 8000
    max_patch_pairs: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.max_interval < 2:
            raise ValueError("max interval must be >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class RefineResult:
    model: FusionModel
    poses: np.ndarray
    trace: list
    flags: list = field(default_factory=list)


class OnlineProblem:
    """Precomputed inputs for all online losses on one test scan.

    The loop split, reorder template, and any budget subsets are frozen at
    construction (seeded), so the total loss is a deterministic, smooth
    function of the model parameters across iterations.
    """

    def __init__(
        self,
        bundle: ScanBundle,
        config: RefineConfig,
        reference_model: FusionModel,
        detect_poses=None,
    ):
        self.bundle = bundle
        self.config = config
        n = bundle.n_frames
        self.K = max(2, min(config.max_interval, n - 1))
        rng = np.random.default_rng(config.seed)

        # ---- subsequence rows (batched estimator inputs)
        feats_cache: dict[tuple[int, int], np.ndarray] = {}

        def pair_rows(pairs):
            missing = [p for p in pairs if p not in feats_cache]
            if missing:
                rows = pair_feature_matrix(bundle.frames, missing)
                feats_cache.update({p: rows[i] for i, p in enumerate(missing)})
            return np.array([feats_cache[p] for p in pairs])

        rows = []
        for k in range(1, self.K + 1):
            for s in range(k):
                idx = np.arange(s, n, k)
                if len(idx) < 2:
                    continue
                pairs = list(zip(idx[:-1], idx[1:]))
                sub = bundle.imu.select(idx)
                rows.append(
                    {
                        "kind": "interval",
                        "k": k,
                        "feats": pair_rows(pairs),
                        "phis": relative_euler(sub),
                        "accs": preprocess_acceleration(sub)[: len(pairs)],
                        "positions": idx[:-1],
                    }
                )

        # ---- reorder row (loops only); the split is frozen from the reference
        # model's estimates (or an explicit pose sequence, e.g. dead reckoning)
        self.reorder_row = None
        if detect_poses is None:
            detect_poses = forward(reference_model, bundle).poses
        changes = detect_direction_changes(
            np.asarray(detect_poses, dtype=float), config.direction_threshold_deg
        )
        segments = split_segments(n, changes)
        self.reorder_skipped = segments is None
        if segments is not None:
            template = PATH_TEMPLATES[int(rng.integers(len(PATH_TEMPLATES)))]
            reordered, order, _ = reorder_sequence(bundle, template, segments)
            pairs = list(zip(order[:-1], order[1:]))
            self.reorder_row = len(rows)
            rows.append(
                {
                    "kind": "reorder",
                    "k": 0,
                    "feats": pair_feature_matrix(reordered.frames, [(m, m + 1) for m in range(len(order) - 1)]),
                    "phis": relative_euler(reordered.imu),
                    "accs": np.zeros((len(order) - 1, 3)),
                    "positions": np.arange(len(order) - 1),
                }
            )
            self.reorder_order = order.astype(int)

        # ---- padded batch tensors
        B = len(rows)
        P = max(len(r["positions"]) for r in rows)
        feats = np.zeros((B, P, FEATURE_DIM))
        phis = np.zeros((B, P, 3))
        accs = np.zeros((B, P, 3))
        mask = np.zeros((B, P), dtype=bool)
        for b, r in enumerate(rows):
            m = len(r["positions"])
            feats[b, :m] = r["feats"]
            phis[b, :m] = r["phis"]
            accs[b, :m] = r["accs"]
            mask[b, :m] = True
        self.feats_t = diffgeo.to_tensor(feats)
        self.phis_t = diffgeo.to_tensor(phis)
        self.accs_t = diffgeo.to_tensor(accs)
        self.mask_t = torch.as_tensor(mask)
        self.rows = rows

        # assembly plan: theta_all = cat over k of theta^k rows (ordered by i)
        self.k_offsets = {}
        offset = 0
        self.k_gather = []  # (row index, pair slot) in theta_all order
        for k in range(1, self.K + 1):
            self.k_offsets[k] = offset
            entries = []
            for b, r in enumerate(rows):
                if r["kind"] == "interval" and r["k"] == k:
                    entries.extend((b, j, int(i)) for j, i in enumerate(r["positions"]))
            entries.sort(key=lambda e: e[2])
            if [e[2] for e in entries] != list(range(n - k)):
                raise AssertionError("interval estimates do not cover the scan")
            self.k_gather.extend((b, j) for b, j, _ in entries)
            offset += n - k
        self.gather_rows = torch.as_tensor([g[0] for g in self.k_gather])
        self.gather_slots = torch.as_tensor([g[1] for g in self.k_gather])
        self.n_frames = n

        # ---- interval-consistency triples (optionally budget-subsampled)
        triples = [
            (k, k1, i)
            for k in range(2, self.K + 1)
            for k1 in range(1, k)
            for i in range(n - k)
        ]
        if len(triples) > config.max_triples:
            keep = rng.choice(len(triples), size=config.max_triples, replace=False)
            triples = [triples[int(t)] for t in sorted(keep)]
        counts: dict[tuple[int, int], int] = {}
        for k, k1, _ in triples:
            counts[(k, k1)] = counts.get((k, k1), 0) + 1
        groups = len(counts)
        self.tri_left = torch.as_tensor([self.k_offsets[k] + i for k, k1, i in triples])
        self.tri_a = torch.as_tensor([self.k_offsets[k1] + i for k, k1, i in triples])
        self.tri_b = torch.as_tensor([self.k_offsets[k - k1] + i + k1 for k, k1, i in triples])
        self.tri_w = diffgeo.to_tensor(
            np.array([1.0 / (groups * counts[(k, k1)]) for k, k1, i in triples])
        )

        # ---- patch-consistency pairs, content differences, local sample points
        pair_list = [(i, i + k, k) for k in range(1, self.K + 1) for i in range(n - k)]
        if len(pair_list) > config.max_patch_pairs:
            keep = rng.choice(len(pair_list), size=config.max_patch_pairs, replace=False)
            pair_list = [pair_list[int(t)] for t in sorted(keep)]
        self.patch_theta_idx = torch.as_tensor(
            [self.k_offsets[k] + i for i, _, k in pair_list]
        )
        c_rows = []
        for i, j, _ in pair_list:
            if config.use_direct_linear and config.interpolator == "linear":
                c_rows.append(
                    direct_patch_content_difference(bundle.frames[i], bundle.frames[j], config.patch_grid)
                )
            else:
                c_rows.append(
                    patch_content_difference(
                        bundle.frames[i], bundle.frames[j], config.interp_count,
                        config.patch_grid, config.interpolator,
                    )
                )
        c = np.concatenate(c_rows) if c_rows else np.zeros(0)
        zc = _zscore(c) if len(c) else None
        self.patch_degenerate = zc is None
        self.z_content = None if zc is None else diffgeo.to_tensor(zc)
        pts = patch_sample_points(bundle.width, bundle.height, config.patch_grid)
        local = geo.pixel_to_local(pts[..., 0], pts[..., 1], bundle.width, bundle.height, bundle.spacing)
        hom = np.concatenate([local, np.ones(local.shape[:-1] + (1,))], axis=-1)
        self.patch_points = diffgeo.to_tensor(hom.reshape(-1, 4))  # (P*Q*5, 4)
        self.patch_local = diffgeo.to_tensor(local.reshape(-1, 3))

        # ---- IMU agreement constants
        self.phi_main = diffgeo.to_tensor(relative_euler(bundle.imu))
        self.acc_interior = diffgeo.to_tensor(preprocess_acceleration(bundle.imu)[1:-1])

        # ---- reorder target plan
        if self.reorder_row is not None:
            order = self.reorder_order
            spans = np.diff(order)
            self.re_plus_slots = np.nonzero(spans == 1)[0]
            self.re_minus_slots = np.nonzero(spans == -1)[0]
            self.re_junction_slots = np.nonzero(np.abs(spans) != 1)[0]
            slot_order = np.concatenate(
                [self.re_plus_slots, self.re_minus_slots, self.re_junction_slots]
            )
            self.re_perm = torch.as_tensor(np.argsort(slot_order))
            self.re_plus_idx = torch.as_tensor(order[self.re_plus_slots])
            self.re_minus_idx = torch.as_tensor(order[self.re_minus_slots + 1])
            self.re_junctions = [
                (int(order[m]), int(order[m + 1])) for m in self.re_junction_slots
            ]

    # ------------------------------------------------------------------

    def theta_tensors(self, params):
        theta_batch = forward_batch(params, self.feats_t, self.phis_t, self.accs_t, self.mask_t)
        theta_all = theta_batch[self.gather_rows, self.gather_slots]
        return theta_batch, theta_all

    def theta_main(self, theta_all):
        return theta_all[: self.n_frames - 1]

    def interval_loss(self, theta_all) -> torch.Tensor:
        left = theta_all[self.tri_left]
        Ta = diffgeo.pose_to_matrix_t(theta_all[self.tri_a])
        Tb = diffgeo.pose_to_matrix_t(theta_all[self.tri_b])
        combined = diffgeo.matrix_to_pose_t(Ta @ Tb)
        dev = (left - combined).abs().mean(dim=-1)
        return (dev * self.tri_w).sum()

    def reorder_loss(self, theta_batch, theta_all) -> torch.Tensor:
        if self.reorder_row is None:
            return torch.zeros((), dtype=torch.float64)
        theta_main = self.theta_main(theta_all)
        m = len(self.reorder_order) - 1
        est = theta_batch[self.reorder_row, :m]
        pieces = []
        if len(self.re_plus_idx):
            pieces.append(theta_main[self.re_plus_idx])
        if len(self.re_minus_idx):
            pieces.append(diffgeo.invert_pose_t(theta_main[self.re_minus_idx]))
        if self.re_junctions:
            chains = []
            for fa, fb in self.re_junctions:
                if fa < fb:
                    T = diffgeo.pose_to_matrix_t(theta_main[fa])
                    for f in range(fa + 1, fb):
                        T = T @ diffgeo.pose_to_matrix_t(theta_main[f])
                else:
                    T = diffgeo.pose_to_matrix_t(theta_main[fb])
                    for f in range(fb + 1, fa):
                        T = T @ diffgeo.pose_to_matrix_t(theta_main[f])
                    T = diffgeo.invert_t(T)
                chains.append(diffgeo.matrix_to_pose_t(T))
            pieces.append(torch.stack(chains))
        targets = torch.cat(pieces)[self.re_perm]
        return (est - targets).abs().mean()

    def patch_loss(self, theta_all):
        if self.patch_degenerate:
            return torch.zeros((), dtype=torch.float64), True
        T = diffgeo.pose_to_matrix_t(theta_all[self.patch_theta_idx])  # (pairs, 4, 4)
        moved = torch.einsum("pij,nj->pni", T, self.patch_points)[..., :3]
        delta = moved - self.patch_local
        grid_cells = self.config.patch_grid[0] * self.config.patch_grid[1]
        d = (
            torch.linalg.vector_norm(delta, dim=-1)
            .reshape(len(T), grid_cells, 5)
            .mean(dim=-1)
            .reshape(-1)
        )
        sd = d.std(unbiased=False)
        if float(sd.detach()) < 1e-12:
            return d.sum() * 0.0, True
        zd = (d - d.mean()) / sd
        return (self.z_content - zd).abs().mean(), False

    def imu_loss(self, theta_all):
        theta_main = self.theta_main(theta_all)
        R_prev = diffgeo.euler_to_rotation_t(theta_main[:-1, 3:])
        inv_t = -torch.einsum("nji,nj->ni", R_prev, theta_main[:-1, :3])
        a_raw = inv_t + theta_main[1:, :3]
        a_hat = a_raw - a_raw.mean(dim=0, keepdim=True)
        r, degenerate = diffgeo.pearson_t(a_hat, self.acc_interior)
        corr_term = 1.0 - r
        euler_term = (theta_main[:, 3:] - self.phi_main).abs().mean()
        return corr_term + euler_term, degenerate

    def losses(self, params) -> dict[str, torch.Tensor]:
        theta_batch, theta_all = self.theta_tensors(params)
        patch, _ = self.patch_loss(theta_all)
        imu, _ = self.imu_loss(theta_all)
        return {
            "interval": self.interval_loss(theta_all),
            "reorder": self.reorder_loss(theta_batch, theta_all),
            "patch": patch,
            "imu": imu,
        }

    def total(self, params) -> torch.Tensor:
        terms = self.losses(params)
        c = self.config
        return (
            c.w_interval * terms["interval"]
            + c.w_reorder * terms["reorder"]
            + c.w_patch * terms["patch"]
            + c.w_imu * terms["imu"]
        )


def online_loss_functions(model: FusionModel, bundle: ScanBundle, config: RefineConfig, detect_poses=None):
    """Named loss callables (model, bundle) -> tensor over a frozen problem.

    Intended for gradient checking and diagnostics; the problem structure
    (template, subsets) is frozen from the given model.
    """
    problem = OnlineProblem(bundle, config, model, detect_poses=detect_poses)

    def make(name):
        def fn(m, _bundle):
            return problem.losses(m.params)[name]

        return fn

    fns = {name: make(name) for name in ("interval", "reorder", "patch", "imu")}
    fns["total"] = lambda m, _bundle: problem.total(m.params)
    return fns


def refine(
    model: FusionModel,
    bundle: ScanBundle,
    config: RefineConfig | None = None,
    detect_poses=None,
) -> RefineResult:
    """Tune the fusion model on one unlabeled scan by descending the online losses.

    Runs ``config.iterations`` plain gradient steps (or Adam when configured)
    on the weighted sum of the four losses, re-running the estimator on the
    scan, its interval subsequences, and (for loops) one reordered traversal
    at every step. Returns the refined model, its estimates, and a per-
    iteration loss trace whose last entry reflects the returned parameters.
    Non-finite losses abort, returning the best parameters seen.
    """
    config = config or RefineConfig()
    problem = OnlineProblem(bundle, config, model, detect_poses=detect_poses)
    work = model.copy().requires_grad_(True)
    params = list(work.params.values())
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=config.learning_rate)

    flags = []
    if problem.reorder_skipped:
        flags.append("reorder_skipped")
    if problem.patch_degenerate:
        flags.append("patch_degenerate")

    trace = []
    best_state = {k: v.detach().clone() for k, v in work.params.items()}
    best_total = np.inf
    for step in range(config.iterations + 1):
        terms = problem.losses(work.params)
        total = (
            config.w_interval * terms["interval"]
            + config.w_reorder * terms["reorder"]
            + config.w_patch * terms["patch"]
            + config.w_imu * terms["imu"]
        )
        record = {name: float(t.detach()) for name, t in terms.items()}
        record["total"] = float(total.detach())
        trace.append(record)
        if not np.isfinite(record["total"]):
            flags.append("aborted_non_finite")
            work = FusionModel(best_state, embed_dim=model.embed_dim, seed=model.seed)
            break
        if record["total"] < best_total:
            best_total = record["total"]
            best_state = {k: v.detach().clone() for k, v in work.params.items()}
        if step == config.iterations:
            break
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            work.params["alpha"].clamp_(1e-3, 1 - 1e-3)

    refined = work.requires_grad_(False).copy()
    poses = forward(refined, bundle).poses
    return RefineResult(model=refined, poses=poses, trace=trace, flags=flags)


def run_on_frames(model: FusionModel, bundle: ScanBundle, idx) -> np.ndarray:
    """Estimator output over an arbitrary frame index subsequence."""
    idx = np.asarray(idx, dtype=int)
    pairs = list(zip(idx[:-1], idx[1:]))
    feats = pair_feature_matrix(bundle.frames, pairs)
    sub = bundle.imu.select(idx)
    with torch.no_grad():
        theta = forward_core(
            model.params,
            diffgeo.to_tensor(feats),
            diffgeo.to_tensor(relative_euler(sub)),
            diffgeo.to_tensor(preprocess_acceleration(sub)),
        )
    return theta.numpy()


def estimates_by_interval(model: FusionModel, bundle: ScanBundle, max_interval: int) -> dict[int, np.ndarray]:
    """Interval estimates {k: (N-k, 6)} assembled from per-subsequence runs.

    Row i of estimates[k] is the model's pose between frames i and i+k,
    contributed by the subsequence starting at i mod k.
    """
    n = bundle.n_frames
    out = {}
    for k, seqs in interval_subsequences(n, max_interval).items():
        arr = np.full((n - k, 6), np.nan)
        for idx in seqs:
            if len(idx) < 2:
                continue
            theta = run_on_frames(model, bundle, idx)
            arr[idx[:-1]] = theta
        if np.isnan(arr).any():
            raise AssertionError("interval estimates do not cover the scan")
        out[k] = arr
    return out
