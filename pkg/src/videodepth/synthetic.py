"""Synthetic posed RGB-D scenes with analytically exact depth.

A scene is an axis-aligned box room (optionally with interior boxes)
textured by seeded 3-D value noise, viewed along a smooth random-walk
trajectory with a controllable inter-frame pose distance. Depth comes
from ray-box intersection in closed form, so oracles built on these
scenes have zero model error.

World axes follow the camera convention at zero rotation: x right,
y down, z forward; the room is centered at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import CameraIntrinsics, DepthMap, Frame, Pose

_MIN_DEPTH = 0.3
_MAX_DEPTH = 18.0
_CLEARANCE = 0.45


def _hash01(ix, iy, iz, salt: int):
    """Deterministic uint64 lattice hash to [0, 1); wraparound intended."""
    salted = np.uint64((salt * 0x165667B19E3779F9) % (1 << 64))
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.int64).astype(np.uint64) * np.uint64(0xD6E8FEB86659FD93)
         ^ salted)
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise_3d(points: np.ndarray, salt: int) -> np.ndarray:
    """Trilinear lattice noise at continuous 3-D points, roughly [-1, 1]."""
    out = np.zeros(points.shape[:-1])
    for octave, (freq, amp) in enumerate([(2.2, 0.6), (4.5, 0.8), (9.0, 1.0)]):
        p = points * freq
        i0 = np.floor(p)
        f = p - i0
        ix, iy, iz = (i0[..., a] for a in range(3))
        acc = np.zeros(points.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = _hash01(ix + dx, iy + dy, iz + dz,
                                salt * 7919 + octave)
                    wx = f[..., 0] if dx else 1.0 - f[..., 0]
                    wy = f[..., 1] if dy else 1.0 - f[..., 1]
                    wz = f[..., 2] if dz else 1.0 - f[..., 2]
                    acc += v * wx * wy * wz
        out += amp * (acc - 0.5)
    return out


@dataclass
class BoxRoom:
    size: np.ndarray  # (Lx, Ly, Lz) meters, centered at the origin
    boxes: list = field(default_factory=list)  # (min_corner, max_corner) pairs
    texture_seed: int = 0

    def half(self) -> np.ndarray:
        return np.asarray(self.size, dtype=np.float64) / 2.0

    def contains_with_margin(self, p: np.ndarray, margin: float) -> bool:
        if np.any(np.abs(p) > self.half() - margin):
            return False
        for lo, hi in self.boxes:
            if np.all(p > lo - margin) and np.all(p < hi + margin):
                return False
        return True


@dataclass
class SyntheticScene:
    room: BoxRoom
    intrinsics: CameraIntrinsics
    poses: list


def _face_color(face_id: int, seed: int) -> np.ndarray:
    arr = np.asarray([face_id * 3 + c for c in range(3)], dtype=np.int64)
    vals = _hash01(arr, arr * 0 + face_id, arr * 0 + 7, seed * 131 + 17)
    return 0.35 + 0.65 * vals


def render_frame(scene: SyntheticScene, pose: Pose,
                 noise_sigma: float = 0.0, noise_rng=None):
    """Analytic render: returns (image (H,W,3) in [0,1], depth (H,W) meters)."""
    k = scene.intrinsics
    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    dirs_cam = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy,
                         np.ones_like(xs)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T  # (H, W, 3) world
    origin = pose.translation
    half = scene.room.half()

    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    # room exit: positive crossing per axis, then the closest one
    t_room = np.full(xs.shape, np.inf)
    face = np.full(xs.shape, -1, dtype=np.int64)
    for a in range(3):
        bound = np.where(dirs[..., a] > 0, half[a], -half[a])
        t = (bound - origin[a]) * inv[..., a]
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        closer = t < t_room
        t_room = np.where(closer, t, t_room)
        face = np.where(closer, a * 2 + (dirs[..., a] > 0), face)

    depth = t_room
    for b, (lo, hi) in enumerate(scene.room.boxes):
        t_near = np.full(xs.shape, -np.inf)
        t_far = np.full(xs.shape, np.inf)
        axis_near = np.zeros(xs.shape, dtype=np.int64)
        for a in range(3):
            t1 = (lo[a] - origin[a]) * inv[..., a]
            t2 = (hi[a] - origin[a]) * inv[..., a]
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            closer = tmin > t_near
            axis_near = np.where(closer, a, axis_near)
            t_near = np.maximum(t_near, tmin)
            t_far = np.minimum(t_far, tmax)
        hit = (t_near > 1e-9) & (t_near <= t_far) & (t_near < depth)
        depth = np.where(hit, t_near, depth)
        face = np.where(hit, 6 + b * 3 + axis_near, face)

    points = origin + depth[..., None] * dirs
    tex = value_noise_3d(points, scene.room.texture_seed)
    shade = np.clip(0.5 + 0.75 * tex, 0.0, 1.0)
    image = np.zeros(xs.shape + (3,))
    for fid in np.unique(face):
        base = _face_color(int(fid), scene.room.texture_seed)
        sel = face == fid
        image[sel] = base * (0.25 + 0.75 * shade[sel, None])
    if noise_sigma > 0:
        image = image + noise_rng.normal(0.0, noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), depth


def _rot_y(a):
    return np.array([[np.cos(a), 0.0, np.sin(a)],
                     [0.0, 1.0, 0.0],
                     [-np.sin(a), 0.0, np.cos(a)]])


def _rot_x(a):
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, np.cos(a), -np.sin(a)],
                     [0.0, np.sin(a), np.cos(a)]])


def _trajectory(rng, room: BoxRoom, n_frames: int, step_distance: float,
                rotation_share) -> list:
    """Smooth random walk; consecutive pose distance equals step_distance
    by construction (rotation + translation split by rotation_share).

    rotation_share may be a scalar or a (lo, hi) range sampled per step;
    rotation-dominant steps mimic handheld panning, where single-pair
    triangulation is weak and temporal memory has to carry the scene.
    """
    half = room.half()

    def split(share):
        trans = step_distance * np.sqrt(max(1.0 - share, 0.0))
        cos_theta = 1.0 - 0.75 * share * step_distance ** 2
        return trans, float(np.arccos(np.clip(cos_theta, -1.0, 1.0)))

    def draw_share():
        if np.isscalar(rotation_share):
            return float(rotation_share)
        return float(rng.uniform(rotation_share[0], rotation_share[1]))

    yaw = rng.uniform(-np.pi, np.pi)
    pitch = rng.uniform(-0.15, 0.15)
    pos = None
    for _ in range(50):
        candidate = np.array([rng.uniform(-0.45, 0.45) * half[0],
                              rng.uniform(-0.3, 0.3) * half[1],
                              rng.uniform(-0.45, 0.45) * half[2]])
        if room.contains_with_margin(candidate, _CLEARANCE):
            pos = candidate
            break
    if pos is None:
        return []
    yaw_dir = rng.choice([-1.0, 1.0])
    pitch_phase = rng.uniform(0, 2 * np.pi)
    drift = rng.uniform(-0.4, 0.4)
    poses = []
    for t in range(n_frames):
        rot = _rot_y(yaw) @ _rot_x(pitch)
        poses.append(Pose(rot, pos.copy()))
        if t == n_frames - 1:
            break
        trans_mag, theta = split(draw_share())
        # rotation split between yaw and a gentle pitch oscillation
        pitch_target = 0.12 * np.sin(0.35 * t + pitch_phase)
        dpitch = np.clip(pitch_target - pitch, -0.25 * theta, 0.25 * theta)
        dyaw = yaw_dir * np.sqrt(max(theta ** 2 - dpitch ** 2, 0.0))
        step_cam = np.array([drift, 0.12 * np.sin(0.23 * t + pitch_phase), 1.0])
        step_cam /= np.linalg.norm(step_cam)
        for _ in range(24):
            candidate = pos + rot @ step_cam * trans_mag
            if room.contains_with_margin(candidate, _CLEARANCE):
                break
            yaw_dir = -yaw_dir
            dyaw = yaw_dir * abs(dyaw)
            yaw += 8 * dyaw
            drift = rng.uniform(-0.4, 0.4)
            rot = _rot_y(yaw) @ _rot_x(pitch)
        else:
            return []  # caller retries with a fresh start
        pos = candidate
        yaw += dyaw
        pitch += dpitch
    return poses


def generate_scene(seed: int, n_frames: int, step_distance: float,
                   image_size: int = 64, rotation_share=0.5,
                   n_boxes: int | None = None,
                   fov_focal: float | None = None) -> SyntheticScene:
    """Deterministic scene: room, interior boxes and a smooth trajectory."""
    if n_frames < 2:
        raise ContractError("a scene needs at least two frames")
    rng = np.random.default_rng(seed)
    focal = fov_focal if fov_focal is not None else image_size * 0.9
    c = (image_size - 1) / 2.0
    k = CameraIntrinsics(fx=focal, fy=focal, cx=c, cy=c,
                         width=image_size, height=image_size)
    for attempt in range(40):
        size = np.array([rng.uniform(4.5, 6.0), rng.uniform(2.6, 3.2),
                         rng.uniform(4.5, 6.0)])
        room = BoxRoom(size, texture_seed=int(rng.integers(1 << 31)))
        count = int(rng.integers(0, 3)) if n_boxes is None else n_boxes
        half = room.half()
        for _ in range(count):
            extent = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.55),
                               rng.uniform(0.3, 0.7)])
            center = np.array([
                rng.uniform(-0.55, 0.55) * half[0],
                half[1] - extent[1],  # resting on the floor (y points down)
                rng.uniform(-0.55, 0.55) * half[2],
            ])
            room.boxes.append((center - extent, center + extent))
        poses = _trajectory(rng, room, n_frames, step_distance, rotation_share)
        if poses:
            return SyntheticScene(room, k, poses)
    raise ContractError(f"could not fit a trajectory in scene seed {seed}")


def render_scene(scene: SyntheticScene, noise_sigma: float = 0.0,
                 noise_seed: int = 0) -> list:
    """All frames of a scene as Frame objects with groundtruth depth."""
    frames = []
    noise_rng = np.random.default_rng(noise_seed)
    for i, pose in enumerate(scene.poses):
        image, depth = render_frame(scene, pose, noise_sigma, noise_rng)
        if depth.min() < _MIN_DEPTH or depth.max() > _MAX_DEPTH:
            raise ContractError(
                f"rendered depth out of range: [{depth.min():.3f}, "
                f"{depth.max():.3f}]")
        frames.append(Frame(i, image, pose, DepthMap(depth)))
    return frames
