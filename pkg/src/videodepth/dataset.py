"""On-disk dataset format and depth-map PNG I/O.

A dataset directory holds:

    intrinsics.txt   fx fy cx cy width height
    poses.txt        one 4x4 row-major camera-to-world matrix per line
    images/NNNNNN.png   8-bit RGB
    depth/NNNNNN.png    16-bit grayscale, millimeters, 0 = invalid

Depth PNGs clamp at 65.535 m; if that ever happens a sidecar note
(<file>.saturated.txt) records how many pixels were clipped.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import CameraIntrinsics, DepthMap, Frame, Pose

DEPTH_SCALE = 1000.0  # millimeters per meter


def save_depth_png(depth: DepthMap, path):
    mm = np.where(depth.valid, np.round(depth.values * DEPTH_SCALE), 0.0)
    clipped = int(np.count_nonzero(mm > 65535))
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)
    if clipped:
        with open(f"{path}.saturated.txt", "w") as f:
            f.write(f"{clipped} pixels clipped at 65535 mm\n")


def load_depth_png(path) -> DepthMap:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    valid = arr > 0
    return DepthMap(np.where(valid, arr / DEPTH_SCALE, 0.0), valid)


def save_image_png(image: np.ndarray, path):
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_dataset(path, intrinsics: CameraIntrinsics, frames: list):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "depth"), exist_ok=True)
    with open(os.path.join(path, "intrinsics.txt"), "w") as f:
        f.write(f"{intrinsics.fx!r} {intrinsics.fy!r} {intrinsics.cx!r} "
                f"{intrinsics.cy!r} {intrinsics.width} {intrinsics.height}\n")
    with open(os.path.join(path, "poses.txt"), "w") as f:
        for frame in frames:
            f.write(" ".join(repr(float(v)) for v in frame.pose.matrix().ravel()))
            f.write("\n")
    for i, frame in enumerate(frames):
        save_image_png(frame.image, os.path.join(path, "images", f"{i:06d}.png"))
        if frame.depth is not None:
            save_depth_png(frame.depth, os.path.join(path, "depth", f"{i:06d}.png"))


def load_dataset(path) -> tuple:
    """Returns (CameraIntrinsics, list[Frame]); depth is optional per frame."""
    intr_file = os.path.join(path, "intrinsics.txt")
    poses_file = os.path.join(path, "poses.txt")
    for required in (intr_file, poses_file, os.path.join(path, "images")):
        if not os.path.exists(required):
            raise DatasetError(f"{path}: missing {os.path.basename(required)}")
    with open(intr_file) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise DatasetError(f"{intr_file}: expected 6 values, got {len(parts)}")
    k = CameraIntrinsics(fx=float(parts[0]), fy=float(parts[1]),
                         cx=float(parts[2]), cy=float(parts[3]),
                         width=int(parts[4]), height=int(parts[5]))
    if k.width % 64 or k.height % 64:
        raise DatasetError(
            f"{path}: image size {k.width}x{k.height} not divisible by 64")
    poses = []
    with open(poses_file) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            vals = np.array([float(v) for v in line.split()])
            if vals.size != 16:
                raise DatasetError(
                    f"{poses_file}:{line_no + 1}: expected 16 values")
            if not np.all(np.isfinite(vals)):
                raise DatasetError(
                    f"{poses_file}:{line_no + 1}: non-finite pose entry")
            poses.append(Pose.from_matrix(vals.reshape(4, 4)))
    image_files = sorted(os.listdir(os.path.join(path, "images")))
    if len(image_files) != len(poses):
        raise DatasetError(
            f"{path}: {len(poses)} poses but {len(image_files)} images")
    depth_dir = os.path.join(path, "depth")
    frames = []
    for i, name in enumerate(image_files):
        image = load_image_png(os.path.join(path, "images", name))
        if image.shape[:2] != (k.height, k.width):
            raise DatasetError(f"{path}/images/{name}: size mismatch")
        depth = None
        depth_path = os.path.join(depth_dir, name)
        if os.path.exists(depth_path):
            depth = load_depth_png(depth_path)
            if depth.shape != (k.height, k.width):
                raise DatasetError(f"{depth_path}: size mismatch")
        frames.append(Frame(i, image, poses[i], depth))
    return k, frames


def list_scene_dirs(root) -> list:
    """Scene subdirectories of a multi-scene dataset root, sorted."""
    if os.path.exists(os.path.join(root, "intrinsics.txt")):
        return [root]
    out = []
    for name in sorted(os.listdir(root)):
        full = os.path.join(root, name)
        if os.path.isdir(full) and os.path.exists(
                os.path.join(full, "intrinsics.txt")):
            out.append(full)
    if not out:
        raise DatasetError(f"{root}: no scene directories found")
    return out
