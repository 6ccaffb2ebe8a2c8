import itertools

import numpy as np
import pytest

from usrecon import geometry as geo
from usrecon import metrics as mx


def traj(points):
    pts = np.asarray(points, dtype=float)
    return geo.Trajectory(positions=pts, rotations=np.tile(np.eye(3), (len(pts), 1, 1)))


GT3 = traj([[0, 0, 0], [0, 0, 1], [0, 0, 2]])
EST3 = traj([[0, 0, 0], [0, 0, 1], [0, 0, 2.5]])


def test_fdr_hand_case():
    assert mx.final_drift_rate(GT3, GT3) == 0.0
    assert mx.final_drift_rate(EST3, GT3) == pytest.approx(0.25)


def test_fdr_scale_invariance():
    a = traj(np.random.default_rng(0).normal(size=(6, 3)))
    b = traj(np.random.default_rng(1).normal(size=(6, 3)))
    r1 = mx.final_drift_rate(a, b)
    r2 = mx.final_drift_rate(traj(2 * a.positions), traj(2 * b.positions))
    assert r1 == pytest.approx(r2)
    r1 = mx.average_drift_rate(a, b)
    r2 = mx.average_drift_rate(traj(2 * a.positions), traj(2 * b.positions))
    assert r1 == pytest.approx(r2)


def test_fdr_zero_path_raises():
    static = traj([[0, 0, 0], [0, 0, 0]])
    with pytest.raises(ValueError):
        mx.final_drift_rate(static, static)


def test_adr_hand_case_and_oracle():
    assert mx.average_drift_rate(EST3, GT3) == pytest.approx((0.0 / 1 + 0.5 / 2) / 2)
    rng = np.random.default_rng(2)
    gt = np.cumsum(rng.uniform(0.2, 1.0, (8, 3)), axis=0)
    est = gt + rng.normal(0, 0.3, gt.shape)
    # brute-force loop oracle
    total = 0.0
    for i in range(1, len(gt)):
        prefix = sum(np.linalg.norm(gt[k + 1] - gt[k]) for k in range(i))
        total += np.linalg.norm(est[i] - gt[i]) / prefix
    assert mx.average_drift_rate(traj(est), traj(gt)) == pytest.approx(total / (len(gt) - 1))


def test_md_sd_hd_single_offset():
    gt = traj([[0, 0, 0], [0, 0, 1], [0, 0, 2]])
    est_pts = gt.positions.copy()
    est_pts[1] += [3, 0, 0]
    est = traj(est_pts)
    assert mx.max_drift(est, gt) == pytest.approx(3.0)
    assert mx.sum_drift(est, gt) == pytest.approx(3.0)
    # nearest-point distance can undercut the index-matched one
    assert mx.hausdorff_distance(est, gt) <= 3.0


def test_hd_matches_brute_force():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(7, 3))
    b = rng.normal(size=(7, 3))
    direct = max(
        max(min(np.linalg.norm(pa - pb) for pb in b) for pa in a),
        max(min(np.linalg.norm(pb - pa) for pa in a) for pb in b),
    )
    assert mx.hausdorff_distance(traj(a), traj(b)) == pytest.approx(direct)


def test_hd_never_exceeds_md():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(9, 3))
        b = rng.normal(size=(9, 3))
        assert mx.hausdorff_distance(traj(a), traj(b)) <= mx.max_drift(traj(a), traj(b)) + 1e-12


def test_mea_cases():
    gt = np.zeros((5, 6))
    assert mx.mean_angle_error(gt, gt) == 0.0
    est = gt.copy()
    est[:, 3] += 2.0
    assert mx.mean_angle_error(est, gt) == pytest.approx(2.0 / 3.0)
    a = np.zeros((1, 6))
    b = np.zeros((1, 6))
    a[0, 5] = 179.0
    b[0, 5] = -179.0
    assert mx.mean_angle_error(a, b) == pytest.approx(2.0 / 3.0)


def test_plane_errors():
    gt = np.tile([0, 0, 1.0, 0, 0, 0], (4, 1))
    est = gt.copy()
    est[:, 0] += 3.0
    est[:, 1] += 4.0
    pe = mx.plane_errors(est, gt)
    assert np.allclose(pe.inplane, 5.0)
    assert np.allclose(pe.outplane, 0.0)
    assert np.allclose(pe.dihedral, 0.0)
    same = mx.plane_errors(gt, gt)
    assert np.allclose(same.inplane, 0)
    assert np.allclose(same.dihedral, 0)
    assert not np.isnan(same.dihedral).any()  # clamped dot product


def test_plane_errors_outplane():
    gt = np.tile([0, 0, 1.0, 0, 0, 0], (3, 1))
    est = gt.copy()
    est[:, 2] += 0.7
    pe = mx.plane_errors(est, gt)
    assert np.allclose(pe.outplane, 0.7)
    assert np.allclose(pe.inplane, 0.0)


def brute_force_cost(s, s_hat):
    small, large = (s, s_hat) if len(s) <= len(s_hat) else (s_hat, s)
    best = None
    for perm in itertools.permutations(large, len(small)):
        cost = sum(abs(a - b) for a, b in zip(small, perm))
        best = cost if best is None else min(best, cost)
    return best


def test_matching_small_hand_cases():
    assert mx.tp_count([10], [12], 1) == 0
    assert mx.tp_count([10], [12], 2) == 1
    p, r, f = mx.detection_scores([3, 7], [3, 7], 0)
    assert (p, r, f) == (1.0, 1.0, 1.0)


def test_matching_equals_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(200):
        s = sorted(rng.choice(20, size=rng.integers(0, 5), replace=False).tolist())
        s_hat = sorted(rng.choice(20, size=rng.integers(0, 5), replace=False).tolist())
        if not s or not s_hat:
            continue
        assert mx.matching_cost(s, s_hat) == pytest.approx(brute_force_cost(s, s_hat))


def test_detection_scores_monotone_in_k():
    rng = np.random.default_rng(6)
    s = sorted(rng.choice(40, size=5, replace=False).tolist())
    s_hat = sorted(rng.choice(40, size=7, replace=False).tolist())
    prev = (0.0, 0.0, 0.0)
    for k in range(0, 15):
        cur = mx.detection_scores(s, s_hat, k)
        assert all(c >= p - 1e-12 for c, p in zip(cur, prev))
        prev = cur


def test_detection_scores_empty_sets():
    p, r, f = mx.detection_scores([], [1, 2], 3)
    assert (p, r, f) == (0.0, 0.0, 0.0)
    p, r, f = mx.detection_scores([1, 2], [], 3)
    assert (p, r, f) == (0.0, 0.0, 0.0)


def test_evaluate_zero_for_identical():
    rng = np.random.default_rng(7)
    poses = np.column_stack([rng.normal(0, 1, (9, 3)) + [0, 0, 1], rng.normal(0, 2, (9, 3))])
    report = mx.evaluate(poses, poses)
    for value in (report.fdr, report.adr, report.md_mm, report.sd_mm, report.hd_mm, report.mea_deg):
        assert value == pytest.approx(0.0, abs=1e-9)
    d = report.to_dict()
    assert "drift_mm" in d["series"]
