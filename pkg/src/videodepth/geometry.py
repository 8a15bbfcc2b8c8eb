"""Pinhole camera and SE(3) pose algebra.

Poses are stored camera-to-world; the camera looks along +z with x
right and y down, so depth maps hold the camera-frame z coordinate.
Pixel (x, y) = (column, row) with integer coordinates at pixel centers.
All functions here are pure numpy; warp grids produced for the sampler
are plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ContractError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Rescale to a resized image, pixel-center convention.

        A pixel center c maps to (c + 0.5) * factor - 0.5, which keeps
        warp geometry exact under power-of-two down-sampling.
        """
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=w,
            height=h,
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ContractError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ContractError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1]):
            raise ContractError("pose matrix must be 4x4 rigid")
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of b expressed in a's frame: a^-1 o b."""
    return a.inverse().compose(b)


def is_near_identity(pose: Pose, tol: float = 1e-12) -> bool:
    return (np.abs(pose.rotation - np.eye(3)).max() <= tol
            and np.abs(pose.translation).max() <= tol)


def pose_distance(rel: Pose) -> float:
    """Combined translation / rotation magnitude of a relative pose."""
    trace_term = (2.0 / 3.0) * float(np.trace(np.eye(3) - rel.rotation))
    return float(np.sqrt(rel.translation @ rel.translation + max(trace_term, 0.0)))


def keyframe_penalty(rel: Pose) -> float:
    """Ranking score preferring ~15 cm baselines with little rotation."""
    tnorm = float(np.linalg.norm(rel.translation))
    alpha = 5.0 if tnorm <= 0.15 else 1.0
    rot = (2.0 / 3.0) * float(np.trace(np.eye(3) - rel.rotation))
    return alpha * (tnorm - 0.15) ** 2 + rot


@dataclass(frozen=True)
class PlaneHypotheses:
    depths: np.ndarray  # (M,), strictly increasing, meters
    d_near: float
    d_far: float

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        object.__setattr__(self, "depths", d)
        if d.ndim != 1 or len(d) < 2:
            raise ContractError("need at least two plane depths")
        if np.any(np.diff(d) <= 0):
            raise ContractError("plane depths must be strictly increasing")

    def __len__(self):
        return len(self.depths)


def sample_planes(d_near: float, d_far: float, m: int) -> PlaneHypotheses:
    """M plane depths uniformly spaced in inverse depth (uniform disparity)."""
    if not (0 < d_near < d_far):
        raise ContractError(f"need 0 < d_near < d_far, got {d_near}, {d_far}")
    if m < 2:
        raise ContractError("need at least two planes")
    inv = np.linspace(1.0 / d_near, 1.0 / d_far, m)
    depths = 1.0 / inv
    depths[0] = d_near
    depths[-1] = d_far
    return PlaneHypotheses(depths, d_near, d_far)


def _pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Homogeneous pixel grid (3, H*W) in x, y, 1 order."""
    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    return np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])


_FAR_OOB = -1e6  # sentinel coordinate, guaranteed outside any image


def planesweep_grids(k: CameraIntrinsics, rel: Pose, depths) -> np.ndarray:
    """Sampling grids (M, H, W, 2) mapping reference pixels into the
    measurement image through fronto-parallel planes z = depths[m] in the
    reference frame.

    rel is the reference camera's pose in the measurement frame
    (relative_pose(measurement, reference)). Points behind the measurement
    camera get far out-of-bounds coordinates so the sampler reads zeros.
    """
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    if np.any(depths <= 0):
        raise ContractError("plane depth must be positive")
    h, w = k.height, k.width
    if is_near_identity(rel):
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        grid = np.stack([xs, ys], axis=-1)
        return np.broadcast_to(grid, (len(depths), h, w, 2)).copy()
    km = k.matrix()
    kinv = np.linalg.inv(km)
    p = km @ rel.rotation @ kinv
    q = km @ rel.translation
    pu = p @ _pixel_rays(k)  # (3, N)
    inv = (1.0 / depths)[:, None]
    hom = pu[None] + q[None, :, None] * inv[:, None]  # (M, 3, N)
    z = hom[:, 2]
    good = z > 1e-9
    zsafe = np.where(good, z, 1.0)
    u = np.where(good, hom[:, 0] / zsafe, _FAR_OOB)
    v = np.where(good, hom[:, 1] / zsafe, _FAR_OOB)
    return np.stack([u, v], axis=-1).reshape(len(depths), h, w, 2)


def planesweep_grid(k: CameraIntrinsics, rel: Pose, depth: float) -> np.ndarray:
    """Single-plane sweep grid (H, W, 2); see planesweep_grids."""
    return planesweep_grids(k, rel, [float(depth)])[0]


def unproject(k: CameraIntrinsics, depth) -> np.ndarray:
    """Lift a depth map to camera-frame 3-D points, row-major over valid pixels.

    depth may be a DepthMap or a plain (H, W) array (all pixels valid).
    """
    if isinstance(depth, DepthMap):
        values, valid = depth.values, depth.valid
    else:
        values = np.asarray(depth, dtype=np.float64)
        valid = np.ones(values.shape, dtype=bool)
    if values.shape != (k.height, k.width):
        raise ContractError(
            f"depth shape {values.shape} does not match intrinsics "
            f"{k.height}x{k.width}")
    if np.any(values[valid] <= 0):
        raise ContractError("cannot unproject non-positive depths")
    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    d = values[valid]
    x = (xs[valid] - k.cx) / k.fx * d
    y = (ys[valid] - k.cy) / k.fy * d
    return np.stack([x, y, d], axis=-1)


def project_points(k: CameraIntrinsics, rel: Pose, points: np.ndarray):
    """Map 3-D points into a camera: continuous pixel coords plus depths.

    rel transforms the points into the target camera frame. Points that
    land at depth <= 1e-6 m are discarded. Returns (coords (N,2), z (N,)).
    """
    pts = rel.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pts[:, 2]
    keep = z > 1e-6
    pts = pts[keep]
    z = z[keep]
    u = k.fx * pts[:, 0] / z + k.cx
    v = k.fy * pts[:, 1] / z + k.cy
    return np.stack([u, v], axis=-1), z


@dataclass
class DepthMap:
    """Metric depth values with a per-pixel validity mask."""

    values: np.ndarray  # (H, W) meters
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ContractError("depth validity mask shape mismatch")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Frame:
    """One posed video frame with optional groundtruth depth."""

    index: int
    image: np.ndarray  # (H, W, 3) floats in [0, 1]
    pose: Pose
    depth: DepthMap | None = None
