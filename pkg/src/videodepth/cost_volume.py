"""Plane-sweep matching-cost volumes from half-resolution feature maps.

For each depth hypothesis the measurement features are warped into the
reference view and scored with a negative channel-averaged inner
product, so a good match produces a low (negative) cost. Out-of-frustum
samples read zero features, giving cost 0 there: no evidence rather
than a good match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _accum, _bilinear_parts, _coerce, _node
from .errors import ContractError
from .geometry import (
    CameraIntrinsics,
    PlaneHypotheses,
    Pose,
    planesweep_grids,
    relative_pose,
)


@dataclass
class FeatureMap:
    """Half-resolution feature tensor plus the originating camera.

    pose may be a single Pose or one pose per batch item.
    """

    data: Tensor  # (B, CH, H/2, W/2)
    intrinsics: CameraIntrinsics
    pose: object

    def poses(self) -> list:
        b = self.data.shape[0]
        if isinstance(self.pose, Pose):
            return [self.pose] * b
        poses = list(self.pose)
        if len(poses) != b:
            raise ContractError(f"expected {b} poses, got {len(poses)}")
        return poses


@dataclass
class CostVolume:
    data: Tensor  # (B, M, H/2, W/2)
    planes: PlaneHypotheses

    def __post_init__(self):
        if self.data.shape[1] != len(self.planes):
            raise ContractError("cost volume plane count mismatch")


def sweep_grids(k_half: CameraIntrinsics, rels: list, depths) -> np.ndarray:
    """Per-item plane-sweep grids stacked to (B, M, H, W, 2)."""
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    return np.stack([planesweep_grids(k_half, rel, depths) for rel in rels])


def _plane_correlation(ref: Tensor, meas: Tensor, grids: np.ndarray,
                       scale: float) -> Tensor:
    """scale * sum_c(ref * bilinear_sample(meas, grids[m])) over all planes.

    grids is (B, M, H', W', 2); output is (B, M, H', W'). One fused graph
    node: the warped features are never stored, the backward pass
    re-gathers the taps and scatters into the measurement map with a
    channel-expanded bincount.
    """
    ref = _coerce(ref)
    meas = _coerce(meas)
    b, c, h, w = meas.shape
    ho, wo = grids.shape[2], grids.shape[3]
    n_src = ho * wo
    n_tgt = h * w
    bi = np.arange(b)[:, None, None, None]
    src = meas.data.reshape(b, c, n_tgt)
    refm = ref.data.reshape(b, c, n_src)
    # all-pairs channel dot products once via BLAS; taps gather scalars
    dots = np.matmul(src.transpose(0, 2, 1), refm)  # (B, n_tgt, n_src)
    taps, _, _ = _bilinear_parts(grids, h, w)
    ij = np.arange(n_src).reshape(1, 1, ho, wo)
    flat = dots.reshape(-1)
    out = np.zeros(grids.shape[:4])
    for yc, xc, valid, wt in taps:
        lin = ((bi * h + yc) * w + xc) * n_src + ij
        out += (wt * valid) * flat[lin]
    out *= scale

    def bwd(g):
        # Collapse planes and taps into one (target pixel, source pixel)
        # weight matrix per batch item; both gradients are then matmuls:
        #   d_meas[p, c] = sum_q W[p, q] ref[q, c]
        #   d_ref[q, c]  = sum_p W[p, q] meas[p, c]
        gs = g * scale  # (B, M, H', W')
        wmat = np.zeros(b * n_tgt * n_src)
        for yc, xc, valid, wt in taps:
            lin = ((bi * h + yc) * w + xc) * n_src + ij
            wg = (wt * valid * gs).ravel()
            wmat += np.bincount(lin.ravel(), weights=wg,
                                minlength=wmat.size)
        wmat = wmat.reshape(b, n_tgt, n_src)
        if ref.requires_grad:
            dref = np.matmul(src, wmat)  # (B, C, n_src)
            _accum(ref, dref.reshape(ref.data.shape))
        if meas.requires_grad:
            dmeas = np.matmul(refm, wmat.transpose(0, 2, 1))
            _accum(meas, dmeas.reshape(meas.data.shape))

    return _node(out, (ref, meas), bwd)


def _correlation_sample(ref: Tensor, meas: Tensor, grid: np.ndarray,
                        scale: float) -> Tensor:
    """Single-grid correlation, (B, 1, H', W'); see _plane_correlation."""
    return _plane_correlation(ref, meas, grid[:, None], scale)


def build_cost_volume(ref: FeatureMap, meas: FeatureMap,
                      planes: PlaneHypotheses,
                      k_half: CameraIntrinsics | None = None) -> CostVolume:
    """Negative correlation cost per pixel and plane, differentiable into
    both feature maps."""
    if ref.data.shape != meas.data.shape:
        raise ContractError(
            f"feature shapes differ: {ref.data.shape} vs {meas.data.shape}")
    k_half = k_half or ref.intrinsics
    if (k_half.height, k_half.width) != tuple(ref.data.shape[2:]):
        raise ContractError("intrinsics do not match feature resolution")
    ch = ref.data.shape[1]
    rels = [relative_pose(mp, rp) for mp, rp in zip(meas.poses(), ref.poses())]
    grids = sweep_grids(k_half, rels, planes.depths)
    return CostVolume(_plane_correlation(ref.data, meas.data, grids, -1.0 / ch),
                      planes)


def average_cost_volumes(volumes: list) -> CostVolume:
    """Elementwise arithmetic mean of cost volumes over measurement frames."""
    if not volumes:
        raise ContractError("cannot average an empty list of cost volumes")
    first = volumes[0]
    for v in volumes[1:]:
        if v.data.shape != first.data.shape:
            raise ContractError("cost volume shapes differ")
        if not np.array_equal(v.planes.depths, first.planes.depths):
            raise ContractError("cost volume plane sets differ")
    if len(volumes) == 1:
        return first
    acc = volumes[0].data
    for v in volumes[1:]:
        acc = acc + v.data
    return CostVolume(acc * (1.0 / len(volumes)), first.planes)
