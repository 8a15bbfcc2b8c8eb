"""Depth evaluation metrics with the low-depth mask.

Groundtruth pixels below min_depth (default 0.5 m) or marked invalid
are excluded from every metric. Predictions at a lower resolution are
upsampled with nearest neighbor before comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import DepthMap

MIN_EVAL_DEPTH = 0.5


@dataclass
class MetricsReport:
    abs_err: float  # meters
    abs_rel: float
    abs_inv: float  # 1 / meters
    inlier_ratio: float  # fraction with gt/1.25 < pred < 1.25*gt
    valid_count: int

    def as_dict(self) -> dict:
        return {
            "abs": self.abs_err,
            "abs-rel": self.abs_rel,
            "abs-inv": self.abs_inv,
            "inlier-1.25": self.inlier_ratio,
            "valid-pixels": self.valid_count,
        }


def upsample_nearest(values: np.ndarray, shape) -> np.ndarray:
    """Integer-factor nearest-neighbor upsampling (top-left anchored)."""
    fy, ry = divmod(shape[0], values.shape[0])
    fx, rx = divmod(shape[1], values.shape[1])
    if ry or rx or fy < 1 or fx < 1:
        raise ContractError(
            f"cannot upsample {values.shape} to {shape} by an integer factor")
    return np.repeat(np.repeat(values, fy, axis=0), fx, axis=1)


def compute_metrics(pred: DepthMap, gt: DepthMap,
                    min_depth: float = MIN_EVAL_DEPTH):
    """MetricsReport over valid groundtruth >= min_depth, or None if the
    mask is empty."""
    pv = pred.values
    if pv.shape != gt.values.shape:
        pv = upsample_nearest(pv, gt.values.shape)
    mask = gt.valid & (gt.values >= min_depth)
    n = int(mask.sum())
    if n == 0:
        return None
    d = gt.values[mask]
    dh = pv[mask]
    if np.any(dh <= 0):
        raise ContractError("predictions must be positive depths")
    err = np.abs(d - dh)
    inlier = (dh > d / 1.25) & (dh < 1.25 * d)
    return MetricsReport(
        abs_err=float(err.mean()),
        abs_rel=float((err / d).mean()),
        abs_inv=float(np.abs(1.0 / d - 1.0 / dh).mean()),
        inlier_ratio=float(inlier.mean()),
        valid_count=n,
    )


def aggregate_metrics(reports: list):
    """Unweighted mean over per-frame reports (frames with no valid pixels
    are skipped); returns None when nothing qualifies."""
    reports = [r for r in reports if r is not None and r.valid_count > 0]
    if not reports:
        return None
    return MetricsReport(
        abs_err=float(np.mean([r.abs_err for r in reports])),
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        abs_inv=float(np.mean([r.abs_inv for r in reports])),
        inlier_ratio=float(np.mean([r.inlier_ratio for r in reports])),
        valid_count=int(sum(r.valid_count for r in reports)),
    )
