"""Command-line front end.

Subcommands: synth (write a synthetic multi-scene dataset), train (run
the staged schedule from a config file), infer (online depth prediction
over one scene), eval (metrics report with figures), select-frames
(dump keyframe-buffer decisions and measurement rankings).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import report as report_mod
from .config import parse_config, write_config
from .dataset import load_dataset, load_depth_png, save_dataset, save_depth_png
from .errors import ContractError, DatasetError, TrainingDiverged
from .geometry import keyframe_penalty, relative_pose, sample_planes
from .metrics import aggregate_metrics, compute_metrics
from .pipeline import (
    KeyframeBuffer,
    load_model,
    online_infer,
    run_training,
    select_measurements,
)
from .synthetic import generate_scene, render_scene


def _add_plane_flags(p):
    p.add_argument("--planes", type=int, default=64,
                   help="number of depth plane hypotheses")
    p.add_argument("--near", type=float, default=0.25,
                   help="nearest plane depth in meters")
    p.add_argument("--far", type=float, default=20.0,
                   help="farthest plane depth in meters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videodepth",
        description="online multi-view stereo depth from posed video")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--step-distance", type=float, default=0.13)
    p.add_argument("--rotation-share", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.0,
                   help="gaussian image noise sigma")

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir from the config")
    p.add_argument("--seed", type=int, help="override seed from the config")

    p = sub.add_parser("infer", help="online inference over one scene")
    p.add_argument("--data", required=True, help="scene dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("pair", "naive", "warped"),
                   default="warped")
    p.add_argument("--measurements", type=int, default=1)
    p.add_argument("--cell-kind", choices=("convlstm", "convgru"),
                   default="convlstm")
    p.add_argument("--cell-configuration", type=int, default=5)
    _add_plane_flags(p)

    p = sub.add_parser("eval", help="evaluate predictions against groundtruth")
    p.add_argument("--pred", required=True, help="directory of depth PNGs")
    p.add_argument("--gt", required=True, help="groundtruth scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--min-depth", type=float, default=0.5)

    p = sub.add_parser("select-frames",
                       help="dump buffer decisions and rankings per frame")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--measurements", type=int, default=2)
    return parser


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_scene(args.seed * 1009 + i, args.frames,
                               args.step_distance,
                               image_size=args.image_size,
                               rotation_share=args.rotation_share)
        frames = render_scene(scene, noise_sigma=args.noise,
                              noise_seed=args.seed * 2003 + i)
        save_dataset(os.path.join(args.out, f"scene_{i:04d}"),
                     scene.intrinsics, frames)
    print(f"wrote {args.scenes} scenes under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    summary = run_training(cfg)
    write_config(cfg, os.path.join(cfg.out_dir, "resolved.cfg"))
    report_mod.render_loss_curve(summary["loss_log"],
                                 os.path.join(cfg.out_dir, "loss_curve.png"))
    print(f"final checkpoint: {summary['checkpoints']['final']}")
    return 0


def cmd_infer(args) -> int:
    k, frames = load_dataset(args.data)
    net, cell = load_model(args.checkpoint, d_near=args.near, d_far=args.far,
                           num_planes=args.planes, cell_kind=args.cell_kind,
                           cell_configuration=args.cell_configuration)
    if args.fusion != "pair" and cell is None:
        raise ContractError(
            f"checkpoint {args.checkpoint} has no cell parameters; "
            f"use --fusion pair")
    planes = sample_planes(args.near, args.far, args.planes)
    records = online_infer(net, cell, frames, k, planes, args.fusion,
                           args.measurements)
    depth_dir = os.path.join(args.out, "depth")
    os.makedirs(depth_dir, exist_ok=True)
    run = {"fusion": args.fusion, "measurements": args.measurements,
           "frames": len(records), "skipped": [], "measurement_indices": {}}
    for rec in records:
        if rec.depth is None:
            run["skipped"].append(rec.index)
            continue
        save_depth_png(rec.depth,
                       os.path.join(depth_dir, f"{rec.index:06d}.png"))
        run["measurement_indices"][str(rec.index)] = rec.measurement_indices
    report_mod.save_report(run, os.path.join(args.out, "run.json"))
    print(f"wrote {len(records) - len(run['skipped'])} depth maps "
          f"({len(run['skipped'])} skipped) to {depth_dir}")
    return 0


def cmd_eval(args) -> int:
    k, frames = load_dataset(args.gt)
    rows = []
    previews = []
    for frame in frames:
        pred_path = os.path.join(args.pred, f"{frame.index:06d}.png")
        if not os.path.exists(pred_path):
            rows.append((frame.index, None))
            continue
        if frame.depth is None:
            raise DatasetError(f"{args.gt}: frame {frame.index} has no "
                               f"groundtruth depth")
        pred = load_depth_png(pred_path)
        rows.append((frame.index, compute_metrics(pred, frame.depth,
                                                  args.min_depth)))
        if len(previews) < 2:
            previews.append((frame.index, pred.values, frame.depth.values))
    summary = aggregate_metrics([r for _, r in rows])
    if summary is None:
        print("no evaluable frames", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "frame_metrics.csv")
    report_mod.save_frame_metrics_csv(rows, csv_path)
    figures = report_mod.render_metric_figures(rows, args.out)
    for index, pred_vals, gt_vals in previews:
        figures.append(report_mod.render_depth_figure(
            pred_vals, gt_vals,
            os.path.join(args.out, f"depth_preview_{index:06d}.png")))
    report = {
        "metrics": summary.as_dict(),
        "evaluated-frames": sum(1 for _, r in rows if r is not None),
        "missing-frames": sum(1 for _, r in rows if r is None),
        "min-depth": args.min_depth,
        "metadata": {
            "pred": os.path.basename(os.path.abspath(args.pred)),
            "gt": os.path.basename(os.path.abspath(args.gt)),
        },
        "files": {"frame_metrics": os.path.basename(csv_path),
                  "figures": [os.path.basename(p) for p in figures]},
    }
    report_mod.save_report(report, os.path.join(args.out, "report.json"))
    print(f"abs={summary.abs_err:.6f} abs-rel={summary.abs_rel:.6f} "
          f"abs-inv={summary.abs_inv:.6f} inlier={summary.inlier_ratio:.6f}")
    return 0


def cmd_select_frames(args) -> int:
    _, frames = load_dataset(args.data)
    buffer = KeyframeBuffer()
    with open(args.out, "w") as f:
        f.write("frame,decision,ranking\n")
        for frame in frames:
            decision = buffer.update(frame.index, frame.pose, None)
            chosen = select_measurements(buffer, frame.pose,
                                         args.measurements,
                                         exclude_index=frame.index)
            ranking = ";".join(
                f"{kf.index}:{keyframe_penalty(relative_pose(frame.pose, kf.pose)):.6f}"
                for kf in chosen)
            f.write(f"{frame.index},{decision},{ranking}\n")
    print(f"wrote buffer log to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "select-frames": cmd_select_frames,
    }
    try:
        return handlers[args.command](args)
    except (ContractError, DatasetError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
