"""Trajectory drift metrics, angle errors, and detection scoring.

Drift metrics compare per-frame world positions of an estimated and a
ground-truth trajectory; angle metrics compare pose rotations on the shortest
arc. Detection scoring matches two index sets with an order-preserving
minimum-cost assignment and counts hits within a tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import geometry as geo

log = logging.getLogger(__name__)

TINY_PREFIX_MM = 1e-6


def _positions(traj) -> np.ndarray:
    if isinstance(traj, geo.Trajectory):
        return traj.positions
    return np.asarray(traj, dtype=float)


def _check_lengths(est: np.ndarray, gt: np.ndarray):
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(est) < 2:
        raise ValueError("need at least two frames")


def final_drift_rate(est, gt) -> float:
    """Final-frame drift divided by total ground-truth path length."""
    p_est, p_gt = _positions(est), _positions(gt)
    _check_lengths(p_est, p_gt)
    steps = np.linalg.norm(np.diff(p_gt, axis=0), axis=1)
    length = steps.sum()
    if length == 0.0:
        raise ValueError("ground-truth path has zero length")
    return float(np.linalg.norm(p_est[-1] - p_gt[-1]) / length)


def average_drift_rate(est, gt) -> float:
    """Mean over frames of drift divided by the path length up to that frame."""
    p_est, p_gt = _positions(est), _positions(gt)
    _check_lengths(p_est, p_gt)
    steps = np.linalg.norm(np.diff(p_gt, axis=0), axis=1)
    prefix = np.cumsum(steps)
    if np.any(prefix == 0.0):
        raise ValueError("ground-truth prefix path has zero length")
    if np.any(prefix < TINY_PREFIX_MM):
        log.warning("prefix path below %g mm; drift rate may be ill-conditioned", TINY_PREFIX_MM)
    drift = np.linalg.norm(p_est[1:] - p_gt[1:], axis=1)
    return float(np.mean(drift / prefix))


def max_drift(est, gt) -> float:
    p_est, p_gt = _positions(est), _positions(gt)
    _check_lengths(p_est, p_gt)
    return float(np.linalg.norm(p_est - p_gt, axis=1).max())


def sum_drift(est, gt) -> float:
    p_est, p_gt = _positions(est), _positions(gt)
    _check_lengths(p_est, p_gt)
    return float(np.linalg.norm(p_est - p_gt, axis=1).sum())


def hausdorff_distance(est, gt) -> float:
    """Symmetric Hausdorff distance between the two position point sets."""
    p_est, p_gt = _positions(est), _positions(gt)
    _check_lengths(p_est, p_gt)
    d = cdist(p_est, p_gt)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def mean_angle_error(est_poses, gt_poses) -> float:
    """Mean absolute shortest-arc difference of pose Euler angles (degrees)."""
    est = np.asarray(est_poses, dtype=float).reshape(-1, 6)
    gt = np.asarray(gt_poses, dtype=float).reshape(-1, 6)
    if est.shape != gt.shape:
        raise ValueError("pose sequences must have equal length")
    return float(np.abs(geo.angle_difference(est[:, 3:], gt[:, 3:])).mean())


@dataclass
class PlaneErrors:
    """Per-frame displacement and orientation errors."""

    inplane: np.ndarray  # (N-1,) mm
    outplane: np.ndarray  # (N-1,) mm
    dihedral: np.ndarray  # (N,) degrees, angle between frame normals


def plane_errors(est_poses, gt_poses) -> PlaneErrors:
    est = np.asarray(est_poses, dtype=float).reshape(-1, 6)
    gt = np.asarray(gt_poses, dtype=float).reshape(-1, 6)
    if est.shape != gt.shape:
        raise ValueError("pose sequences must have equal length")
    diff = est[:, :3] - gt[:, :3]
    inplane = np.hypot(diff[:, 0], diff[:, 1])
    outplane = np.abs(diff[:, 2])
    t_est = geo.accumulate_trajectory(est)
    t_gt = geo.accumulate_trajectory(gt)
    dots = np.array(
        [
            np.clip(geo.frame_normal(t_est, i) @ geo.frame_normal(t_gt, i), -1.0, 1.0)
            for i in range(len(t_est))
        ]
    )
    dihedral = np.degrees(np.arccos(dots))
    return PlaneErrors(inplane=inplane, outplane=outplane, dihedral=dihedral)


def optimal_index_matching(s, s_hat):
    """Order-preserving injective matching from the smaller set to the larger.

    Minimizes the total absolute index difference (dynamic program over the
    sorted sets; ties resolved toward smaller indices). Returns a list of
    (value_from_smaller, matched_value) pairs; the boolean second return is
    True when s was the smaller set.
    """
    s = sorted(int(v) for v in s)
    s_hat = sorted(int(v) for v in s_hat)
    s_is_smaller = len(s) <= len(s_hat)
    small, large = (s, s_hat) if s_is_smaller else (s_hat, s)
    m, M = len(small), len(large)
    if m == 0:
        return [], s_is_smaller
    inf = float("inf")
    dp = np.full((m + 1, M + 1), inf)
    dp[0, :] = 0.0
    for i in range(1, m + 1):
        for j in range(i, M + 1):
            match = dp[i - 1, j - 1] + abs(small[i - 1] - large[j - 1])
            skip = dp[i, j - 1] if j > i else inf
            dp[i, j] = min(match, skip)
    pairs = []
    i, j = m, M
    while i > 0:
        if j > i and dp[i, j] == dp[i, j - 1]:
            j -= 1
        else:
            pairs.append((small[i - 1], large[j - 1]))
            i -= 1
            j -= 1
    pairs.reverse()
    return pairs, s_is_smaller


def matching_cost(s, s_hat) -> float:
    pairs, _ = optimal_index_matching(s, s_hat)
    return float(sum(abs(a - b) for a, b in pairs))


def tp_count(s, s_hat, k: int) -> int:
    """Matches whose index distance is within the tolerance k."""
    if k < 0:
        raise ValueError("tolerance must be non-negative")
    pairs, _ = optimal_index_matching(s, s_hat)
    return int(sum(1 for a, b in pairs if abs(a - b) <= k))


def detection_scores(s, s_hat, k: int):
    """(precision, recall, f1) of detected indices at tolerance k.

    Empty sets make the affected ratio undefined; it is reported as 0 and a
    warning is logged. F1 is 0 whenever precision + recall is 0.
    """
    s = list(s)
    s_hat = list(s_hat)
    tp = tp_count(s, s_hat, k) if s and s_hat else 0
    if not s_hat:
        log.warning("empty detection set; precision reported as 0")
        precision = 0.0
    else:
        precision = tp / len(s_hat)
    if not s:
        log.warning("empty reference set; recall reported as 0")
        recall = 0.0
    else:
        recall = tp / len(s)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass
class MetricReport:
    """All drift and angle metrics for one (estimated, ground-truth) pair."""

    fdr: float
    adr: float
    md_mm: float
    sd_mm: float
    hd_mm: float
    mea_deg: float
    inplane_mean_mm: float
    outplane_mean_mm: float
    dihedral_mean_deg: float
    series: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "fdr": self.fdr,
            "adr": self.adr,
            "md_mm": self.md_mm,
            "sd_mm": self.sd_mm,
            "hd_mm": self.hd_mm,
            "mea_deg": self.mea_deg,
            "inplane_mean_mm": self.inplane_mean_mm,
            "outplane_mean_mm": self.outplane_mean_mm,
            "dihedral_mean_deg": self.dihedral_mean_deg,
            "flags": list(self.flags),
            "series": {k: np.asarray(v).tolist() for k, v in self.series.items()},
        }
        return out


def evaluate(est_poses, gt_poses) -> MetricReport:
    """Score an estimated pose sequence against ground truth."""
    est = np.asarray(est_poses, dtype=float).reshape(-1, 6)
    gt = np.asarray(gt_poses, dtype=float).reshape(-1, 6)
    if est.shape != gt.shape:
        raise ValueError("pose sequences must have equal length")
    t_est = geo.accumulate_trajectory(est)
    t_gt = geo.accumulate_trajectory(gt)
    pe = plane_errors(est, gt)
    drift = np.linalg.norm(t_est.positions - t_gt.positions, axis=1)
    return MetricReport(
        fdr=final_drift_rate(t_est, t_gt),
        adr=average_drift_rate(t_est, t_gt),
        md_mm=max_drift(t_est, t_gt),
        sd_mm=sum_drift(t_est, t_gt),
        hd_mm=hausdorff_distance(t_est, t_gt),
        mea_deg=mean_angle_error(est, gt),
        inplane_mean_mm=float(pe.inplane.mean()),
        outplane_mean_mm=float(pe.outplane.mean()),
        dihedral_mean_deg=float(pe.dihedral.mean()),
        series={
            "drift_mm": drift,
            "inplane_mm": pe.inplane,
            "outplane_mm": pe.outplane,
            "dihedral_deg": pe.dihedral,
        },
    )
