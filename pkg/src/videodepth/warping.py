"""Hidden-state propagation between viewpoints.

Before each fused step, the previous depth estimate is splatted into
the current camera at bottleneck resolution with z-buffer occlusion
handling, giving a partial depth proxy. That proxy drives an inverse
warp: each covered bottleneck pixel is lifted to 3-D, moved into the
previous camera and bilinearly sampled from the previous hidden state.
Uncovered pixels and out-of-frustum samples read zero, which the cell
learns to treat as absent memory. Gradients never flow through the
depth used for warping; they do flow into the sampled hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import CellConfig, RecurrentState, cell_step, zero_state
from .errors import ContractError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    is_near_identity,
    project_points,
    relative_pose,
    unproject,
)
from .network import DepthNetwork, StepResult

_FAR_OOB = -1e6


@dataclass
class PartialDepth:
    """Depth proxy at bottleneck resolution with a coverage mask."""

    values: np.ndarray  # (H_b, W_b) meters, meaningful where covered
    coverage: np.ndarray  # bool


def render_partial_depth(prev_depth, prev_pose: Pose, cur_pose: Pose,
                         k: CameraIntrinsics) -> PartialDepth:
    """Splat the previous depth into the current camera, keeping the
    smallest depth per pixel (z-buffer) and marking uncovered pixels.

    prev_depth is a DepthMap or plain array at bottleneck resolution.
    """
    if not isinstance(prev_depth, DepthMap):
        prev_depth = DepthMap(np.asarray(prev_depth, dtype=np.float64))
    rel = relative_pose(cur_pose, prev_pose)
    if is_near_identity(rel):
        return PartialDepth(prev_depth.values.copy(), prev_depth.valid.copy())
    points = unproject(k, prev_depth)
    coords, z = project_points(k, rel, points)
    ix = np.rint(coords[:, 0]).astype(np.int64)
    iy = np.rint(coords[:, 1]).astype(np.int64)
    keep = (ix >= 0) & (ix < k.width) & (iy >= 0) & (iy < k.height)
    zbuf = np.full((k.height, k.width), np.inf)
    np.minimum.at(zbuf, (iy[keep], ix[keep]), z[keep])
    coverage = np.isfinite(zbuf)
    return PartialDepth(np.where(coverage, zbuf, 0.0), coverage)


def warp_grid(partial: PartialDepth, prev_pose: Pose, cur_pose: Pose,
              k: CameraIntrinsics) -> np.ndarray:
    """Sampling grid into the previous hidden state for one batch item.

    Covered current pixels are unprojected with the depth proxy and
    projected into the previous camera; uncovered pixels get a far
    out-of-bounds coordinate so the sampler reads zero.
    """
    rel = relative_pose(prev_pose, cur_pose)
    grid = np.full((k.height, k.width, 2), _FAR_OOB)
    if is_near_identity(rel):
        ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
        grid[partial.coverage, 0] = xs[partial.coverage]
        grid[partial.coverage, 1] = ys[partial.coverage]
        return grid
    cov = partial.coverage
    if not cov.any():
        return grid
    depth = DepthMap(np.where(cov, partial.values, 1.0), cov)
    points = unproject(k, depth)
    pts_prev = rel.apply(points)
    z = pts_prev[:, 2]
    good = z > 1e-6
    u = np.where(good, k.fx * pts_prev[:, 0] / np.where(good, z, 1.0) + k.cx,
                 _FAR_OOB)
    v = np.where(good, k.fy * pts_prev[:, 1] / np.where(good, z, 1.0) + k.cy,
                 _FAR_OOB)
    grid[cov, 0] = u
    grid[cov, 1] = v
    return grid


def _as_list(x, n):
    if isinstance(x, (list, tuple)):
        if len(x) != n:
            raise ContractError(f"expected {n} entries, got {len(x)}")
        return list(x)
    return [x] * n


def warp_hidden(h_prev: Tensor, partial, prev_pose, cur_pose,
                k: CameraIntrinsics) -> Tensor:
    """Bilinearly resample the previous hidden state into the current
    camera plane; differentiable w.r.t. h_prev only."""
    b = h_prev.shape[0]
    partials = _as_list(partial, b)
    prevs = _as_list(prev_pose, b)
    curs = _as_list(cur_pose, b)
    if (k.height, k.width) != tuple(h_prev.shape[2:]):
        raise ContractError("hidden state does not match bottleneck intrinsics")
    grid = np.stack([warp_grid(pt, pp, cp, k)
                     for pt, pp, cp in zip(partials, prevs, curs)])
    return ad.grid_sample_bilinear(h_prev, grid)


def downsample_depth_nearest(values: np.ndarray, valid: np.ndarray,
                             scale: int):
    """Centered nearest-neighbor depth reduction by an integer factor."""
    off = (scale - 1) // 2
    return values[..., off::scale, off::scale], valid[..., off::scale, off::scale]


def fused_step(net: DepthNetwork, cfg: CellConfig, ref_images: Tensor,
               ref_poses, measurements: list, k: CameraIntrinsics, planes,
               prev_state: RecurrentState | None,
               prev_depth=None, prev_valid=None, prev_depth_pose=None,
               ref_pyramid: list | None = None) -> StepResult:
    """One step of fusion with hidden-state warping.

    prev_depth is the full-resolution warp source for the previous frame
    (the previous prediction at test time, groundtruth during the staged
    training); it must have been produced under the state's pose.
    Gradients are blocked through it. Only the hidden state is warped;
    the cell state is carried unchanged.
    """
    pyr = ref_pyramid or net.extract_features(ref_images)
    enc = net.encode_frame(pyr, ref_images, ref_poses, measurements, k, planes)
    b, _, hb, wb = enc.bottleneck.shape
    k_b = k.scaled(1.0 / 32.0)
    cur_poses = _as_list(ref_poses, b)

    if prev_state is None or prev_depth is None:
        if prev_state is None:
            prev_state = zero_state(cfg, b, hb, wb, ref_poses, k,
                                    channels=enc.bottleneck.shape[1])
        warped = prev_state.hidden
    else:
        state_poses = prev_state.poses()
        if prev_depth_pose is not None:
            for sp, dp in zip(state_poses, _as_list(prev_depth_pose, b)):
                if not (np.allclose(sp.rotation, dp.rotation, atol=1e-9)
                        and np.allclose(sp.translation, dp.translation,
                                        atol=1e-9)):
                    raise ContractError(
                        "warp-source depth pose does not match the stored "
                        "recurrent state pose")
        if isinstance(prev_depth, Tensor):
            prev_depth = ad.stop_gradient(prev_depth).data
        depth = np.asarray(prev_depth, dtype=np.float64)
        if depth.ndim == 2:
            depth = depth[None]
        valid = (np.ones(depth.shape, dtype=bool) if prev_valid is None
                 else np.asarray(prev_valid, dtype=bool).reshape(depth.shape))
        dvals, dvalid = downsample_depth_nearest(depth, valid, 32)
        partials = [
            render_partial_depth(DepthMap(dvals[i], dvalid[i] & (dvals[i] > 0)),
                                 state_poses[i], cur_poses[i], k_b)
            for i in range(b)
        ]
        warped = warp_hidden(prev_state.hidden, partials, state_poses,
                             cur_poses, k_b)

    carried = RecurrentState(warped, prev_state.cell, ref_poses, k)
    state = cell_step(enc.bottleneck, carried, cfg)
    state.source_pose = ref_poses
    state.source_intrinsics = k
    out = net.decode_full(state.hidden, enc.skips, ref_images)
    return StepResult(out, state, pyr)
