"""Online operation and training.

The online loop keeps a ring of recent keyframes admitted by pose
distance, ranks them with the keyframe penalty to pick measurement
frames, and runs one of three per-frame predictors: the stateless pair
network, naive recurrent fusion, or fusion with hidden-state warping.
Frames that find no usable measurement produce skip records.

Training follows the staged schedule: the pair network first, then the
fusion model initialized from it with progressively unfrozen modules
(groundtruth drives the state warp), and a final cell-only finetune
that warps with the model's own predictions at a reduced learning rate.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import make_cell, naive_fusion_step
from .cost_volume import FeatureMap
from .errors import ContractError, TrainingDiverged
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Frame,
    PlaneHypotheses,
    Pose,
    keyframe_penalty,
    pose_distance,
    relative_pose,
    sample_planes,
)
from .network import (
    DepthNetwork,
    assign_parameters,
    load_checkpoint,
    multiscale_loss,
    save_checkpoint,
)
from .warping import fused_step

BUFFER_CAPACITY = 30
ADMISSION_DISTANCE = 0.1

FUSION_MODES = ("pair", "naive", "warped")


@dataclass
class Keyframe:
    index: int
    pose: Pose
    features: FeatureMap  # cached half-resolution feature map (batch 1)


class KeyframeBuffer:
    """Ring of the most recent keyframes admitted by pose distance."""

    def __init__(self, capacity: int = BUFFER_CAPACITY,
                 admission_distance: float = ADMISSION_DISTANCE):
        self.capacity = capacity
        self.admission_distance = admission_distance
        self.entries: deque = deque()

    def update(self, index: int, pose: Pose, features: FeatureMap) -> str:
        """Admit the frame iff the buffer is empty or its pose distance to
        the most recent keyframe exceeds the threshold."""
        if self.entries:
            dist = pose_distance(relative_pose(self.entries[-1].pose, pose))
            if dist <= self.admission_distance:
                return "skipped"
        self.entries.append(Keyframe(index, pose, features))
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        return "added"

    def __len__(self):
        return len(self.entries)


def select_measurements(buffer: KeyframeBuffer, cur_pose: Pose, k: int,
                        exclude_index: int | None = None) -> list:
    """The k buffered keyframes with the smallest penalty w.r.t. the
    current pose, ties broken by older keyframe first."""
    if len(buffer) == 0:
        return []
    ranked = sorted(
        (kf for kf in buffer.entries if kf.index != exclude_index),
        key=lambda kf: (keyframe_penalty(relative_pose(cur_pose, kf.pose)),
                        kf.index))
    return ranked[:k]


@dataclass
class InferenceRecord:
    index: int
    depth: DepthMap | None
    skipped: bool = False
    reason: str | None = None
    measurement_indices: list = field(default_factory=list)


def online_infer(net: DepthNetwork, cell_cfg, frames, k: CameraIntrinsics,
                 planes: PlaneHypotheses, fusion: str = "warped",
                 k_measurements: int = 1) -> list:
    """Causal pass over a time-ordered frame stream; emits one record per
    frame, either a depth map or a skip."""
    if fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {fusion!r}")
    if fusion != "pair" and cell_cfg is None:
        raise ContractError(f"fusion mode {fusion!r} needs a recurrent cell")
    k_half = k.scaled(0.5)
    buffer = KeyframeBuffer()
    records = []
    state = None
    prev_depth = None
    prev_pose = None
    with ad.no_grad():
        for frame in frames:
            images = Tensor(np.moveaxis(frame.image, -1, 0)[None])
            pyr = net.extract_features(images)
            fm = FeatureMap(pyr[0], k_half, frame.pose)
            buffer.update(frame.index, frame.pose, fm)
            chosen = select_measurements(buffer, frame.pose, k_measurements,
                                         exclude_index=frame.index)
            if not chosen:
                records.append(InferenceRecord(frame.index, None, True,
                                               "no admissible measurement"))
                continue
            meas = [kf.features for kf in chosen]
            if fusion == "pair":
                res = net.pair_step(images, frame.pose, meas, k, planes,
                                    ref_pyramid=pyr)
            elif fusion == "naive":
                res = naive_fusion_step(net, cell_cfg, images, frame.pose,
                                        meas, k, planes, state,
                                        ref_pyramid=pyr)
            else:
                res = fused_step(net, cell_cfg, images, frame.pose, meas, k,
                                 planes, state, prev_depth,
                                 prev_depth_pose=prev_pose, ref_pyramid=pyr)
            records.append(InferenceRecord(
                frame.index, res.output.depth_map(0),
                measurement_indices=[kf.index for kf in chosen]))
            state = res.state
            prev_depth = res.output.depth_values()
            prev_pose = frame.pose
    return records


# -- training data sampling --------------------------------------------


def sample_subsequence(frames: list, length: int, rng,
                       pose_span: tuple = (0.30, 0.40),
                       trans_span: tuple = (0.05, 0.15),
                       retries: int = 24):
    """Subsequence whose consecutive members each stay within thresholds
    drawn once per call; greedy farthest-admissible stepping. Returns None
    when the sequence admits no such subsequence (skip signal)."""
    if len(frames) < length:
        return None
    for _ in range(retries):
        pose_t = rng.uniform(*pose_span)
        trans_t = rng.uniform(*trans_span)
        start = int(rng.integers(0, len(frames)))
        picked = [frames[start]]
        i = start
        while len(picked) < length:
            j = i + 1
            last_ok = None
            while j < len(frames):
                rel = relative_pose(frames[i].pose, frames[j].pose)
                if (pose_distance(rel) <= pose_t
                        and np.linalg.norm(rel.translation) <= trans_t):
                    last_ok = j
                    j += 1
                else:
                    break
            if last_ok is None:
                break
            picked.append(frames[last_ok])
            i = last_ok
        if len(picked) == length:
            return picked
    return None


@dataclass
class AugmentConfig:
    lo: float = 0.666
    hi: float = 1.5


def effective_scale_bounds(frames: list, config: AugmentConfig,
                           d_near: float, d_far: float) -> tuple:
    """Scale bounds shrunk so every scaled groundtruth depth stays inside
    the plane-sweep range."""
    lo, hi = config.lo, config.hi
    gt_vals = [f.depth.values[f.depth.valid] for f in frames
               if f.depth is not None and f.depth.valid.any()]
    if gt_vals:
        min_gt = min(float(v.min()) for v in gt_vals)
        max_gt = max(float(v.max()) for v in gt_vals)
        lo = max(lo, d_near / min_gt)
        hi = min(hi, d_far / max_gt)
    return lo, hi


def scale_augment(frames: list, config: AugmentConfig, rng,
                  d_near: float, d_far: float):
    """One geometric scale factor per subsequence: groundtruth depths and
    pose translations are multiplied, images and rotations untouched."""
    lo, hi = effective_scale_bounds(frames, config, d_near, d_far)
    if lo > hi:
        return frames, 1.0
    s = float(rng.uniform(lo, hi))
    out = []
    for f in frames:
        depth = None
        if f.depth is not None:
            depth = DepthMap(f.depth.values * s, f.depth.valid.copy())
        out.append(Frame(f.index, f.image,
                         Pose(f.pose.rotation, f.pose.translation * s), depth))
    return out, s


# -- optimizer -----------------------------------------------------------


class Adam:
    """First-order adaptive moment optimizer.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- staged training ------------------------------------------------------

STAGE_TRAINABLE = {
    "pair": ("extractor.", "encoder.", "decoder."),
    "cell+decoder": ("cell.", "decoder."),
    "+encoder": ("cell.", "decoder.", "encoder."),
    "full": ("cell.", "decoder.", "encoder.", "extractor."),
    "cell-finetune": ("cell.",),
}


@dataclass
class TrainStage:
    name: str  # key into STAGE_TRAINABLE
    iterations: int
    learning_rate: float
    warp_source: str = "groundtruth"  # or "prediction"

    def __post_init__(self):
        if self.name not in STAGE_TRAINABLE:
            raise ContractError(f"unknown training stage {self.name!r}")
        if self.warp_source not in ("groundtruth", "prediction"):
            raise ContractError(f"unknown warp source {self.warp_source!r}")

    def trainable(self, params: dict) -> dict:
        prefixes = STAGE_TRAINABLE[self.name]
        return {n: p for n, p in params.items()
                if any(n.startswith(pre) for pre in prefixes)}


def batch_images(frames_row: list) -> Tensor:
    return Tensor(np.stack([np.moveaxis(f.image, -1, 0) for f in frames_row]))


def _batch_gt(frames_row: list):
    vals = np.stack([f.depth.values for f in frames_row])
    valid = np.stack([f.depth.valid for f in frames_row])
    return vals, valid


def run_subsequence(net: DepthNetwork, cell_cfg, batch: list,
                    k: CameraIntrinsics, planes: PlaneHypotheses,
                    fusion: str, warp_source: str = "groundtruth"):
    """Unrolled loss over a batch of equally long subsequences. The first
    frame only provides measurement features; every later frame is
    predicted with the previous frame as its measurement. For warped
    fusion the state warp uses the previous frame's groundtruth or the
    previous prediction, per warp_source."""
    length = len(batch[0])
    if any(len(row) != length for row in batch):
        raise ContractError("subsequences in a batch must share their length")
    k_half = k.scaled(0.5)
    total = Tensor(np.zeros(()))
    state = None
    prev_fm = None
    prev_poses = None
    last_prediction = None
    for t in range(length):
        row = [batch[b][t] for b in range(len(batch))]
        poses = [f.pose for f in row]
        images = batch_images(row)
        if t == 0:
            pyr = net.extract_features(images)
            prev_fm = FeatureMap(pyr[0], k_half, poses)
            prev_poses = poses
            continue
        meas = [prev_fm]
        if fusion == "pair":
            res = net.pair_step(images, poses, meas, k, planes)
        elif fusion == "naive":
            res = naive_fusion_step(net, cell_cfg, images, poses, meas,
                                    k, planes, state)
        else:
            if warp_source == "groundtruth":
                pv, pm = _batch_gt([batch[b][t - 1] for b in range(len(batch))])
                prev_depth, prev_valid = np.where(pm, pv, 1.0), pm
            else:
                prev_depth, prev_valid = last_prediction, None
            res = fused_step(net, cell_cfg, images, poses, meas, k, planes,
                             state, prev_depth, prev_valid,
                             prev_depth_pose=prev_poses)
        gt_vals, gt_valid = _batch_gt(row)
        total = ad.add(total, multiscale_loss(res.output, gt_vals, gt_valid))
        state = res.state
        prev_fm = FeatureMap(res.pyramid[0], k_half, poses)
        prev_poses = poses
        last_prediction = res.output.depth_values()
    return total * (1.0 / (length - 1))


def _pair_loss(net, batch, k, planes, symmetric: bool):
    loss = run_subsequence(net, None, batch, k, planes, "pair")
    if symmetric:
        flipped = [list(reversed(row)) for row in batch]
        loss = ad.add(loss, run_subsequence(net, None, flipped, k, planes,
                                            "pair")) * 0.5
    return loss


def build_stages(cfg) -> list:
    """Staged schedule from a TrainConfig; the pair stage is skipped when a
    pair checkpoint is provided, fusion stages when training pair-only."""
    stages = []
    if not cfg.pair_checkpoint:
        stages.append(TrainStage("pair", cfg.pair_iterations,
                                 cfg.learning_rate))
    if cfg.fusion != "pair":
        stages.append(TrainStage("cell+decoder", cfg.cell_decoder_iterations,
                                 cfg.learning_rate))
        if cfg.encoder_iterations:
            stages.append(TrainStage("+encoder", cfg.encoder_iterations,
                                     cfg.learning_rate))
        stages.append(TrainStage("full", cfg.full_iterations,
                                 cfg.learning_rate))
        stages.append(TrainStage("cell-finetune", cfg.finetune_iterations,
                                 cfg.finetune_learning_rate,
                                 warp_source="prediction"))
    return stages


def _sample_batch(scenes: list, length: int, batch_size: int, rng,
                  augment: bool, d_near: float, d_far: float) -> list:
    batch = []
    attempts = 0
    while len(batch) < batch_size:
        if attempts > 60 * batch_size:
            raise ContractError(
                "could not sample enough admissible subsequences")
        attempts += 1
        frames = scenes[int(rng.integers(0, len(scenes)))]
        sub = sample_subsequence(frames, length, rng)
        if sub is None:
            continue
        if augment:
            sub, _ = scale_augment(sub, AugmentConfig(), rng, d_near, d_far)
        batch.append(sub)
    return batch


def _all_params(net: DepthNetwork, cell_cfg) -> dict:
    params = dict(net.parameters())
    if cell_cfg is not None:
        params.update(cell_cfg.parameters())
    return params


def _stage_filename(index: int, name: str) -> str:
    safe = name.replace("+", "plus_").replace("-", "_")
    return f"stage{index}_{safe}.ckpt"


def run_training(cfg, log=print) -> dict:
    """Execute the staged schedule; writes checkpoints and a loss log under
    cfg.out_dir and returns a run summary."""
    from .dataset import list_scene_dirs, load_dataset

    if cfg.fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {cfg.fusion!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    scene_dirs = list_scene_dirs(cfg.dataset)
    loaded = [load_dataset(d) for d in scene_dirs]
    k = loaded[0][0]
    for d, (ki, _) in zip(scene_dirs, loaded):
        if ki != k:
            raise ContractError(f"{d}: intrinsics differ across scenes")
    all_scenes = [frames for _, frames in loaded]
    n_val = min(max(1, int(round(cfg.val_fraction * len(all_scenes)))),
                len(all_scenes) - 1) if len(all_scenes) > 1 else 0
    train_scenes = all_scenes[:len(all_scenes) - n_val]
    val_scenes = all_scenes[len(all_scenes) - n_val:]

    planes = sample_planes(cfg.d_near, cfg.d_far, cfg.planes)
    init_rng = np.random.default_rng([cfg.seed, 11])
    net = DepthNetwork(init_rng, cfg.d_near, cfg.d_far, num_planes=cfg.planes)
    cell_cfg = None
    if cfg.fusion != "pair":
        cell_cfg = make_cell(np.random.default_rng([cfg.seed, 12]),
                             cfg.cell_kind, cfg.cell_configuration)
    if cfg.pair_checkpoint:
        assign_parameters(net.parameters(), load_checkpoint(cfg.pair_checkpoint),
                          strict=True)
    params = _all_params(net, cell_cfg)

    sample_rng = np.random.default_rng([cfg.seed, 13])
    val_rng = np.random.default_rng([cfg.seed, 14])
    stages = build_stages(cfg)
    log_rows = []
    checkpoints = {}
    summary_stages = []

    for idx, stage in enumerate(stages):
        fusion = "pair" if stage.name == "pair" else cfg.fusion
        length = 2 if stage.name == "pair" else cfg.subsequence_length
        val_batches = []
        if val_scenes and stage.iterations > 0:
            for _ in range(2):
                try:
                    val_batches.append(_sample_batch(
                        val_scenes, length, cfg.batch_size, val_rng,
                        False, cfg.d_near, cfg.d_far))
                except ContractError:
                    break

        def stage_loss(batch):
            if stage.name == "pair":
                return _pair_loss(net, batch, k, planes, cfg.symmetric_pair)
            return run_subsequence(net, cell_cfg, batch, k, planes, fusion,
                                   stage.warp_source)

        def val_loss():
            with ad.no_grad():
                vals = [float(stage_loss(b).data) for b in val_batches]
            return float(np.mean(vals)) if vals else None

        trainable = stage.trainable(params)
        for name, p in params.items():
            p.requires_grad = name in trainable
        best = None
        first_loss = last_loss = None
        if stage.iterations > 0 and trainable:
            if val_batches:
                # seed the best snapshot with the incoming parameters so a
                # stage that only degrades the model is rolled back
                best = (val_loss(), {n: p.data.copy()
                                     for n, p in trainable.items()})
            opt = Adam(trainable, stage.learning_rate)
            for it in range(stage.iterations):
                batch = _sample_batch(train_scenes, length, cfg.batch_size,
                                      sample_rng, cfg.augment, cfg.d_near,
                                      cfg.d_far)
                loss = stage_loss(batch)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(stage.name, it, value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                first_loss = value if first_loss is None else first_loss
                last_loss = value
                vl = None
                if val_batches and ((it + 1) % cfg.val_interval == 0
                                    or it + 1 == stage.iterations):
                    vl = val_loss()
                    if best is None or vl < best[0]:
                        best = (vl, {n: p.data.copy()
                                     for n, p in trainable.items()})
                log_rows.append((stage.name, it, value, vl))
            if best is not None:
                for n, snap in best[1].items():
                    trainable[n].data = snap
        ckpt = os.path.join(cfg.out_dir, _stage_filename(idx, stage.name))
        save_checkpoint(params, ckpt)
        checkpoints[stage.name] = ckpt
        summary_stages.append({
            "name": stage.name,
            "iterations": stage.iterations,
            "first_loss": first_loss,
            "last_loss": last_loss,
            "best_val_loss": best[0] if best else None,
        })
        log(f"[stage {stage.name}] iterations={stage.iterations} "
            f"first={first_loss} last={last_loss} "
            f"best_val={best[0] if best else None}")

    for p in params.values():
        p.requires_grad = True
    final = os.path.join(cfg.out_dir, "model.ckpt")
    save_checkpoint(params, final)
    checkpoints["final"] = final

    log_path = os.path.join(cfg.out_dir, "loss_log.csv")
    with open(log_path, "w") as fh:
        fh.write("stage,iteration,train_loss,val_loss\n")
        for stage_name, it, value, vl in log_rows:
            fh.write(f"{stage_name},{it},{value!r},"
                     f"{'' if vl is None else repr(vl)}\n")
    return {
        "stages": summary_stages,
        "checkpoints": checkpoints,
        "loss_log": log_path,
        "intrinsics": k,
        "planes": planes,
    }


def load_model(checkpoint_path, d_near: float = 0.25, d_far: float = 20.0,
               num_planes: int = 64, cell_kind: str = "convlstm",
               cell_configuration: int = 5):
    """Rebuild (net, cell or None) from a checkpoint file."""
    values = load_checkpoint(checkpoint_path)
    net = DepthNetwork(np.random.default_rng(0), d_near, d_far,
                       num_planes=num_planes)
    assign_parameters(net.parameters(), values, strict=True)
    cell_cfg = None
    if any(name.startswith("cell.") for name in values):
        cell_cfg = make_cell(np.random.default_rng(0), cell_kind,
                             cell_configuration)
        assign_parameters(cell_cfg.parameters(), values, strict=True)
    return net, cell_cfg
