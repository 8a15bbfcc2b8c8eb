"""Pilot run for the fusion-ordering experiment; prints timings and the
held-out abs-inv for pair / naive / warped."""

import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from videodepth.config import TrainConfig
from videodepth.dataset import list_scene_dirs, load_dataset, save_dataset
from videodepth.geometry import sample_planes
from videodepth.metrics import aggregate_metrics, compute_metrics
from videodepth.pipeline import load_model, online_infer, run_training
from videodepth.synthetic import generate_scene, render_scene


def make_dataset(root, n_scenes, frames, step, rot_share, noise, seed0=100):
    os.makedirs(root, exist_ok=True)
    for i in range(n_scenes):
        scene = generate_scene(seed0 + i, frames, step,
                               rotation_share=rot_share)
        fr = render_scene(scene, noise_sigma=noise, noise_seed=seed0 + i)
        save_dataset(os.path.join(root, f"scene_{i:04d}"), scene.intrinsics, fr)


def evaluate(checkpoint, scene_dirs, fusion, k_meas=1):
    net, cell = load_model(checkpoint)
    planes = sample_planes(0.25, 20.0, 64)
    reports = []
    for d in scene_dirs:
        k, frames = load_dataset(d)
        records = online_infer(net, cell, frames, k, planes, fusion, k_meas)
        for rec in records:
            if rec.depth is None:
                continue
            reports.append(compute_metrics(rec.depth, frames[rec.index].depth))
    return aggregate_metrics(reports)


def main():
    work = sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot"
    train_root = os.path.join(work, "train")
    test_root = os.path.join(work, "test")
    budgets = dict(
        pair_iterations=int(os.environ.get("PAIR_IT", 240)),
        cell_decoder_iterations=int(os.environ.get("CD_IT", 90)),
        full_iterations=int(os.environ.get("FULL_IT", 120)),
        finetune_iterations=int(os.environ.get("FT_IT", 40)),
        learning_rate=float(os.environ.get("LR", 1e-4)),
    )
    noise = float(os.environ.get("NOISE", 0.03))
    rot_raw = os.environ.get("ROT", "0.6")
    rot = (tuple(float(v) for v in rot_raw.split(","))
           if "," in rot_raw else float(rot_raw))
    n_train = int(os.environ.get("NSCENES", 22))
    frames = int(os.environ.get("FRAMES", 26))
    seed = int(os.environ.get("SEED", 0))

    if not os.path.exists(train_root):
        t0 = time.time()
        make_dataset(train_root, n_train, frames, 0.13, rot, noise, 100)
        make_dataset(test_root, 6, frames, 0.13, rot, noise, 900)
        print(f"dataset: {time.time() - t0:.1f}s", flush=True)

    t0 = time.time()
    pair_cfg = TrainConfig(dataset=train_root,
                           out_dir=os.path.join(work, f"pair_s{seed}"),
                           seed=seed, fusion="pair", val_fraction=0.1,
                           val_interval=20, **budgets)
    pair_sum = run_training(pair_cfg, log=lambda m: print(m, flush=True))
    print(f"pair training: {time.time() - t0:.1f}s", flush=True)
    pair_ckpt = pair_sum["checkpoints"]["final"]

    results = {}
    for fusion in ("naive", "warped"):
        t0 = time.time()
        cfg = TrainConfig(dataset=train_root,
                          out_dir=os.path.join(work, f"{fusion}_s{seed}"),
                          seed=seed, fusion=fusion, val_fraction=0.1,
                          val_interval=20, pair_checkpoint=pair_ckpt,
                          **budgets)
        summary = run_training(cfg, log=lambda m: print(m, flush=True))
        print(f"{fusion} training: {time.time() - t0:.1f}s", flush=True)
        results[fusion] = summary["checkpoints"]["final"]

    test_dirs = list_scene_dirs(test_root)
    t0 = time.time()
    pair_m = evaluate(pair_ckpt, test_dirs, "pair")
    naive_m = evaluate(results["naive"], test_dirs, "naive")
    warped_m = evaluate(results["warped"], test_dirs, "warped")
    print(f"evaluation: {time.time() - t0:.1f}s", flush=True)
    print(f"pair   abs-inv {pair_m.abs_inv:.5f} abs {pair_m.abs_err:.4f} "
          f"inlier {pair_m.inlier_ratio:.4f}")
    print(f"naive  abs-inv {naive_m.abs_inv:.5f} abs {naive_m.abs_err:.4f} "
          f"inlier {naive_m.inlier_ratio:.4f}")
    print(f"warped abs-inv {warped_m.abs_inv:.5f} abs {warped_m.abs_err:.4f} "
          f"inlier {warped_m.inlier_ratio:.4f}")
    print(f"warped/pair {warped_m.abs_inv / pair_m.abs_inv:.4f} "
          f"warped/naive {warped_m.abs_inv / naive_m.abs_inv:.4f}")


if __name__ == "__main__":
    main()
