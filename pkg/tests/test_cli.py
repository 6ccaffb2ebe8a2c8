import json

import numpy as np
import pytest

from usrecon import bundle_io
from usrecon.cli import main
from usrecon import simulator as sim


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        code = run(
            "simulate", "--tactic", "linear", "--frames", 20, "--seed", 3,
            "--width", 32, "--height", 32, "--spacing", 0.5, "--out", out,
        )
        assert code == 0
    for name in ("frames.raw", "imu.csv", "poses_gt.csv", "meta.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_bundle_round_trip(tmp_path):
    bundle, _ = sim.simulate_scan(
        tactic="loop", frames=20, seed=4, width=32, height=32, spacing=0.5,
        noise=sim.NoiseSpec(0.3, 0.05, seed=4), compute_masks=True,
    )
    bundle_io.save_bundle(tmp_path / "scan", bundle)
    back = bundle_io.load_bundle(tmp_path / "scan")
    assert np.array_equal(back.frames, bundle.frames)
    assert np.array_equal(back.masks, bundle.masks)
    assert np.allclose(back.imu.orientation, bundle.imu.orientation)
    assert np.allclose(back.poses_gt, bundle.poses_gt)
    assert back.meta["tactic"] == "loop"


def test_full_cli_flow(tmp_path):
    scan = tmp_path / "scan"
    train_scan = tmp_path / "train_scan"
    for seed, out in ((5, scan), (6, train_scan)):
        assert run(
            "simulate", "--tactic", "linear", "--frames", 16, "--seed", seed,
            "--width", 32, "--height", 32, "--spacing", 0.5, "--speed-variation", 0.3,
            "--masks", "--out", out,
        ) == 0

    model = tmp_path / "model.json"
    assert run("train", "--scans", train_scan, "--out", model, "--dim", 6,
               "--epochs", 30, "--seed", 1) == 0

    est = tmp_path / "poses_est.csv"
    assert run("estimate", "--scan", scan, "--model", model, "--out", est) == 0
    poses = bundle_io.load_poses_csv(est)
    assert poses.shape == (15, 6)

    refined = tmp_path / "poses_refined.csv"
    trace = tmp_path / "trace.csv"
    assert run(
        "refine", "--scan", scan, "--model", model, "--out", refined,
        "--iters", 3, "--lr", "1e-4", "--max-interval", 3, "--patches", "4x4",
        "--trace", trace, "--seed", 2,
    ) == 0
    assert len(trace.read_text().strip().splitlines()) == 5  # header + 4 entries

    report = tmp_path / "report.json"
    curve = tmp_path / "pr.csv"
    assert run(
        "evaluate", "--est", refined, "--gt", scan / "poses_gt.csv",
        "--out", report, "--pr-curve", curve, "--kmax", 3,
    ) == 0
    payload = json.loads(report.read_text())
    for key in ("fdr", "adr", "md_mm", "sd_mm", "hd_mm", "mea_deg", "series"):
        assert key in payload
    assert len(curve.read_text().strip().splitlines()) == 5

    vol = tmp_path / "vol"
    assert run("compound", "--scan", scan, "--poses", scan / "poses_gt.csv",
               "--voxel", 0.5, "--out", vol) == 0
    header = json.loads((tmp_path / "vol.json").read_text())
    raw = np.fromfile(tmp_path / "vol.raw", dtype=np.float32)
    assert raw.size == int(np.prod(header["dims"]))

    stats = tmp_path / "vessel.json"
    assert run("vessel-stats", "--scan", scan, "--poses", scan / "poses_gt.csv",
               "--gt-poses", scan / "poses_gt.csv", "--out", stats) == 0
    vs = json.loads(stats.read_text())
    assert vs["length_ratio"] == pytest.approx(1.0)
    assert vs["d_mean_mm"] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_identical_is_zero(tmp_path):
    scan = tmp_path / "scan"
    assert run("simulate", "--tactic", "curved", "--frames", 12, "--seed", 7,
               "--width", 24, "--height", 24, "--spacing", 0.5, "--out", scan) == 0
    report = tmp_path / "report.json"
    assert run("evaluate", "--est", scan / "poses_gt.csv", "--gt", scan / "poses_gt.csv",
               "--out", report) == 0
    payload = json.loads(report.read_text())
    for key in ("fdr", "adr", "md_mm", "sd_mm", "hd_mm", "mea_deg"):
        assert abs(payload[key]) < 1e-9


def test_direction_changes_cli(tmp_path, capsys):
    scan = tmp_path / "scan"
    assert run("simulate", "--tactic", "loop", "--frames", 25, "--seed", 8,
               "--width", 24, "--height", 24, "--spacing", 0.5, "--out", scan) == 0
    assert run("direction-changes", "--poses", scan / "poses_gt.csv") == 0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    meta = json.loads((scan / "meta.json").read_text())
    assert payload["change_frames"] == meta["change_frames"]


def test_cli_error_paths(tmp_path):
    assert run("estimate", "--scan", tmp_path / "missing", "--out", tmp_path / "x.csv") == 1
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--tactic", "bogus", "--out", tmp_path / "y")
    assert exc.value.code == 2


def test_pipeline_cli(tmp_path):
    work = tmp_path / "run"
    assert run(
        "pipeline", "--workdir", work, "--tactic", "loop", "--frames", 40,
        "--width", 40, "--height", 40, "--iters", 4, "--train-epochs", 30,
        "--seed", 11,
    ) == 0
    summary = json.loads((work / "summary.json").read_text())
    for key in ("initial", "refined", "vessel", "loss_start", "loss_end"):
        assert key in summary
    assert (work / "volume.raw").exists()
    assert len((work / "trace.csv").read_text().strip().splitlines()) == 6


def test_augment_cli(tmp_path):
    scan = tmp_path / "scan"
    assert run("simulate", "--tactic", "linear", "--frames", 14, "--seed", 9,
               "--width", 24, "--height", 24, "--spacing", 0.5, "--out", scan) == 0
    out = tmp_path / "aug"
    assert run("augment", "--scan", scan, "--op", "interval", "--k", 2, "--out", out) == 0
    bundle = bundle_io.load_bundle(out)
    assert bundle.n_frames == 7
