"""Command-line interface covering the full pipeline.

Subcommands: simulate, augment, train, estimate, refine, evaluate, compound,
vessel-stats, direction-changes, pipeline. Every stage is deterministic for a
fixed seed. Set RECON_LOG=DEBUG|INFO|... to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, bundle_io, compounding, consistency, estimator, metrics, simulator


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        p, q = text.lower().split("x")
        return int(p), int(q)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("patch grid must look like 32x32") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usrecon",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"usrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    p = add("simulate", "generate a ground-truthed synthetic scan bundle")
    p.add_argument("--tactic", choices=simulator.TACTICS, default="linear")
    p.add_argument("--frames", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--width", type=int, default=simulator.DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=simulator.DEFAULT_HEIGHT)
    p.add_argument("--spacing", type=float, default=simulator.DEFAULT_SPACING, help="mm per pixel")
    p.add_argument("--speed", type=float, default=0.5, help="mm per frame along the sweep")
    p.add_argument("--speed-variation", type=float, default=0.0)
    p.add_argument("--curvature", type=float, default=0.4, help="deg per frame (curved tactic)")
    p.add_argument("--sweep", type=float, default=30.0, help="total fan angle in deg (sector)")
    p.add_argument("--noise-orientation", type=float, default=0.0, help="deg sigma on IMU orientation")
    p.add_argument("--noise-acceleration", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--voxel-size", type=float, default=0.5, help="phantom voxel size in mm")
    p.add_argument("--masks", action="store_true", help="store analytic vessel masks")
    p.add_argument("--no-vessel", action="store_true", help="plain speckle phantom")
    p.add_argument("--dt", type=float, default=simulator.DEFAULT_DT, help="seconds per frame")

    p = add("augment", "derive a new bundle (subsequence/interval/invert)")
    p.add_argument("--scan", required=True)
    p.add_argument("--op", choices=("subsequence", "interval", "invert"), required=True)
    p.add_argument("--k", type=int, default=None, help="interval; random in 1..11 when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", "fit the fusion model on ground-truthed bundles")
    p.add_argument("--scans", nargs="+", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--dim", type=int, default=16, help="embedding width")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)

    p = add("estimate", "estimate inter-frame poses for a scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True, help="pose CSV path")
    p.add_argument("--model", default=None, help="fusion model JSON (omit for dead reckoning)")
    p.add_argument("--nominal-step", type=float, default=None, help="dead-reckoning elevation step")
    p.add_argument("--trajectory", default=None, help="optional trajectory CSV output")

    p = add("refine", "online-refine a fusion model on one scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="refined pose CSV")
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--lr", type=float, default=2e-6)
    p.add_argument("--max-interval", type=int, default=11)
    p.add_argument("--patches", type=_parse_grid, default=(32, 32), metavar="PxQ")
    p.add_argument("--interp", type=int, default=63, help="interpolated images per pair")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", default=None, help="per-iteration loss CSV")
    p.add_argument("--out-model", default=None, help="refined model JSON")
    p.add_argument(
        "--detect",
        choices=("model", "dead-reckoning"),
        default="model",
        help="pose source for loop detection",
    )

    p = add("evaluate", "drift metrics for an estimated pose CSV vs ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--pr-curve", default=None, help="direction-change P/R/F1 CSV")
    p.add_argument("--kmax", type=int, default=20)
    p.add_argument("--threshold", type=float, default=90.0, help="direction-change angle (deg)")

    p = add("compound", "splat a scan into a voxel volume under given poses")
    p.add_argument("--scan", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--voxel", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output prefix (writes .raw and .json)")

    p = add("vessel-stats", "vessel volume/length from masks under given poses")
    p.add_argument("--scan", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--gt-poses", default=None, help="reference poses for ratios/distances")
    p.add_argument("--out", required=True)

    p = add("direction-changes", "detect direction-change frames in a pose CSV")
    p.add_argument("--poses", required=True)
    p.add_argument("--threshold", type=float, default=90.0)
    p.add_argument("--out", default=None, help="JSON output (stdout when omitted)")

    p = add("pipeline", "simulate, train, estimate, refine, evaluate, compound")
    p.add_argument("--tactic", choices=simulator.TACTICS, default="loop")
    p.add_argument("--frames", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.3)
    p.add_argument("--train-epochs", type=int, default=150)
    p.add_argument("--dim", type=int, default=12)
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3, help="online refinement learning rate")
    p.add_argument("--max-interval", type=int, default=5)
    p.add_argument("--patches", type=_parse_grid, default=(8, 8), metavar="PxQ")
    p.add_argument("--noise-orientation", type=float, default=0.5)
    p.add_argument("--noise-acceleration", type=float, default=0.02)

    return parser


def _cmd_simulate(args) -> int:
    noise = simulator.NoiseSpec(
        orientation_sigma_deg=args.noise_orientation,
        acceleration_sigma=args.noise_acceleration,
        seed=args.seed if args.noise_seed is None else args.noise_seed,
    )
    spec = simulator.TrajectorySpec(
        tactic=args.tactic,
        frames=args.frames,
        seed=args.seed,
        speed=args.speed,
        speed_variation=args.speed_variation,
        curvature_deg=args.curvature,
        sweep_deg=args.sweep,
    )
    bundle, _ = simulator.simulate_scan(
        spec,
        noise=noise,
        width=args.width,
        height=args.height,
        spacing=args.spacing,
        dt=args.dt,
        voxel_size=args.voxel_size,
        vessel=not args.no_vessel,
        compute_masks=args.masks and not args.no_vessel,
    )
    bundle_io.save_bundle(args.out, bundle)
    print(f"wrote bundle: {args.out} ({bundle.n_frames} frames, tactic {args.tactic})")
    return 0


def _cmd_augment(args) -> int:
    bundle = bundle_io.load_bundle(args.scan)
    out = simulator.augment(bundle, args.op, seed=args.seed, k=args.k)
    bundle_io.save_bundle(args.out, out)
    print(f"wrote bundle: {args.out} ({out.n_frames} frames, op {args.op})")
    return 0


def _cmd_train(args) -> int:
    bundles = [bundle_io.load_bundle(path) for path in args.scans]
    model = estimator.FusionModel.create(embed_dim=args.dim, seed=args.seed)
    model = estimator.train(model, bundles, epochs=args.epochs, lr=args.lr, seed=args.seed)
    model.save(args.out)
    print(f"wrote model: {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    bundle = bundle_io.load_bundle(args.scan)
    if args.model:
        model = estimator.FusionModel.load(args.model)
        poses = estimator.forward(model, bundle).poses
    else:
        poses = estimator.dead_reckoning_estimate(bundle, nominal_step=args.nominal_step).poses
    bundle_io.save_poses_csv(args.out, poses)
    if args.trajectory:
        from .geometry import accumulate_trajectory

        bundle_io.save_trajectory_csv(args.trajectory, accumulate_trajectory(poses))
    print(f"wrote poses: {args.out}")
    return 0


def _cmd_refine(args) -> int:
    bundle = bundle_io.load_bundle(args.scan)
    model = estimator.FusionModel.load(args.model)
    config = consistency.RefineConfig(
        iterations=args.iters,
        learning_rate=args.lr,
        max_interval=args.max_interval,
        patch_grid=args.patches,
        interp_count=args.interp,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    detect = None
    if args.detect == "dead-reckoning":
        detect = estimator.dead_reckoning_estimate(bundle).poses
    result = consistency.refine(model, bundle, config, detect_poses=detect)
    bundle_io.save_poses_csv(args.out, result.poses)
    if args.trace:
        bundle_io.save_trace_csv(args.trace, result.trace)
    if args.out_model:
        result.model.save(args.out_model)
    start, end = result.trace[0]["total"], result.trace[-1]["total"]
    print(f"refined {args.scan}: loss {start:.6g} -> {end:.6g}; flags {result.flags}")
    return 0


def _cmd_evaluate(args) -> int:
    est = bundle_io.load_poses_csv(args.est)
    gt = bundle_io.load_poses_csv(args.gt)
    report = metrics.evaluate(est, gt)
    bundle_io.save_json(args.out, report.to_dict())
    if args.pr_curve:
        s_gt = consistency.detect_direction_changes(gt, args.threshold)
        s_est = consistency.detect_direction_changes(est, args.threshold)
        lines = ["k,precision,recall,f1"]
        for k in range(args.kmax + 1):
            prec, rec, f1 = metrics.detection_scores(s_gt, s_est, k)
            lines.append(f"{k},{prec!r},{rec!r},{f1!r}")
        Path(args.pr_curve).write_text("\n".join(lines) + "\n")
    print(
        "FDR {fdr:.4f}  ADR {adr:.4f}  MD {md_mm:.3f}mm  SD {sd_mm:.2f}mm  "
        "HD {hd_mm:.3f}mm  MEA {mea_deg:.4f}deg".format(**report.to_dict())
    )
    return 0


def _cmd_compound(args) -> int:
    bundle = bundle_io.load_bundle(args.scan)
    poses = bundle_io.load_poses_csv(args.poses)
    volume = compounding.compound(bundle, poses, voxel_size=args.voxel)
    bundle_io.save_volume(args.out, volume)
    print(f"wrote volume: {args.out}.raw / .json (dims {volume.sums.shape})")
    return 0


def _cmd_vessel_stats(args) -> int:
    bundle = bundle_io.load_bundle(args.scan)
    poses = bundle_io.load_poses_csv(args.poses)
    stats = compounding.vessel_stats(bundle, poses)
    payload = {
        "volume_ml": stats.volume_ml,
        "length_mm": stats.length_mm,
        "analytic_volume_ml": bundle.meta.get("vessel_volume_ml"),
        "analytic_length_mm": bundle.meta.get("vessel_length_mm"),
    }
    if args.gt_poses:
        gt_stats = compounding.vessel_stats(bundle, bundle_io.load_poses_csv(args.gt_poses))
        dist = compounding.voxel_distance_model(stats.centroids_mm, gt_stats.centroids_mm)
        payload.update(
            {
                "reference_volume_ml": gt_stats.volume_ml,
                "reference_length_mm": gt_stats.length_mm,
                "volume_ratio": stats.volume_ml / gt_stats.volume_ml,
                "length_ratio": stats.length_mm / gt_stats.length_mm,
                "d_mean_mm": dist.d_mean_mm,
                "d_std_mm": dist.d_std_mm,
                "d_max_mm": dist.d_max_mm,
            }
        )
    bundle_io.save_json(args.out, payload)
    print(f"vessel volume {stats.volume_ml:.4f} ml, length {stats.length_mm:.2f} mm")
    return 0


def _cmd_direction_changes(args) -> int:
    poses = bundle_io.load_poses_csv(args.poses)
    changes = consistency.detect_direction_changes(poses, args.threshold)
    payload = {"change_frames": changes, "threshold_deg": args.threshold}
    if args.out:
        bundle_io.save_json(args.out, payload)
    else:
        print(json.dumps(payload))
    return 0


def _cmd_pipeline(args) -> int:
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    common = dict(width=args.width, height=args.height, spacing=args.spacing, voxel_size=0.5)

    noise = simulator.NoiseSpec(args.noise_orientation, args.noise_acceleration, seed=args.seed)
    test_bundle, _ = simulator.simulate_scan(
        tactic=args.tactic, frames=args.frames, seed=args.seed,
        speed_variation=0.3, noise=noise, compute_masks=True, **common,
    )
    bundle_io.save_bundle(work / "scan", test_bundle)

    train_bundles = []
    for offset, tactic in enumerate(simulator.TACTICS):
        b, _ = simulator.simulate_scan(
            tactic=tactic, frames=args.frames, seed=args.seed + 1000 + offset,
            speed_variation=0.3,
            noise=simulator.NoiseSpec(
                args.noise_orientation, args.noise_acceleration, seed=args.seed + 1000 + offset
            ),
            vessel=False, **common,
        )
        train_bundles.append(b)
    model = estimator.FusionModel.create(embed_dim=args.dim, seed=args.seed)
    model = estimator.train(model, train_bundles, epochs=args.train_epochs, lr=1e-3, seed=args.seed)
    model.save(work / "model.json")

    initial = estimator.forward(model, test_bundle).poses
    bundle_io.save_poses_csv(work / "poses_initial.csv", initial)
    report_initial = metrics.evaluate(initial, test_bundle.poses_gt)
    bundle_io.save_json(work / "report_initial.json", report_initial.to_dict())

    config = consistency.RefineConfig(
        iterations=args.iters,
        learning_rate=args.lr,
        max_interval=args.max_interval,
        patch_grid=args.patches,
        seed=args.seed,
    )
    detect = estimator.dead_reckoning_estimate(test_bundle).poses
    result = consistency.refine(model, test_bundle, config, detect_poses=detect)
    bundle_io.save_poses_csv(work / "poses_refined.csv", result.poses)
    bundle_io.save_trace_csv(work / "trace.csv", result.trace)
    result.model.save(work / "model_refined.json")
    report_refined = metrics.evaluate(result.poses, test_bundle.poses_gt)
    bundle_io.save_json(work / "report_refined.json", report_refined.to_dict())

    volume = compounding.compound(test_bundle, result.poses, voxel_size=0.5)
    bundle_io.save_volume(work / "volume", volume)
    est_stats = compounding.vessel_stats(test_bundle, result.poses)
    gt_stats = compounding.vessel_stats(test_bundle, test_bundle.poses_gt)
    dist = compounding.voxel_distance_model(est_stats.centroids_mm, gt_stats.centroids_mm)
    summary = {
        "initial": report_initial.to_dict(),
        "refined": report_refined.to_dict(),
        "vessel": {
            "estimated_volume_ml": est_stats.volume_ml,
            "estimated_length_mm": est_stats.length_mm,
            "reference_volume_ml": gt_stats.volume_ml,
            "reference_length_mm": gt_stats.length_mm,
            "volume_ratio": est_stats.volume_ml / gt_stats.volume_ml,
            "length_ratio": est_stats.length_mm / gt_stats.length_mm,
            "d_mean_mm": dist.d_mean_mm,
            "d_std_mm": dist.d_std_mm,
            "d_max_mm": dist.d_max_mm,
        },
        "refine_flags": result.flags,
        "loss_start": result.trace[0]["total"],
        "loss_end": result.trace[-1]["total"],
    }
    for key in ("initial", "refined"):
        summary[key].pop("series", None)
    bundle_io.save_json(work / "summary.json", summary)
    print(
        f"pipeline done: FDR {report_initial.fdr:.4f} -> {report_refined.fdr:.4f}, "
        f"summary at {work / 'summary.json'}"
    )
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "estimate": _cmd_estimate,
    "refine": _cmd_refine,
    "evaluate": _cmd_evaluate,
    "compound": _cmd_compound,
    "vessel-stats": _cmd_vessel_stats,
    "direction-changes": _cmd_direction_changes,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RECON_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
