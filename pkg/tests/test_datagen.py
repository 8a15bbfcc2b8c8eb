import numpy as np
import pytest

from videodepth.dataset import (
    load_dataset,
    load_depth_png,
    save_dataset,
    save_depth_png,
)
from videodepth.errors import ContractError, DatasetError
from videodepth.geometry import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    pose_distance,
    relative_pose,
)
from videodepth.metrics import aggregate_metrics, compute_metrics, upsample_nearest
from videodepth.synthetic import (
    BoxRoom,
    SyntheticScene,
    generate_scene,
    render_frame,
    render_scene,
)


class TestRenderer:
    def test_wall_straight_ahead_is_exact(self):
        room = BoxRoom(np.array([6.0, 3.0, 4.0]), texture_seed=5)
        k = CameraIntrinsics(fx=55.0, fy=55.0, cx=31.5, cy=31.5,
                             width=64, height=64)
        scene = SyntheticScene(room, k, [Pose.identity()])
        _, depth = render_frame(scene, Pose.identity())
        # fronto-parallel wall at z = +2: exact z-depth for every pixel on it
        assert depth[31, 31] == 2.0
        assert depth[32, 32] == 2.0

    def test_same_seed_bit_identical(self):
        a = render_scene(generate_scene(7, 4, 0.12))
        b = render_scene(generate_scene(7, 4, 0.12))
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.image, fb.image)
            np.testing.assert_array_equal(fa.depth.values, fb.depth.values)
            np.testing.assert_array_equal(fa.pose.matrix(), fb.pose.matrix())

    def test_consecutive_pose_distance_near_target(self):
        scene = generate_scene(3, 10, 0.15)
        for a, b in zip(scene.poses, scene.poses[1:]):
            d = pose_distance(relative_pose(a, b))
            assert abs(d - 0.15) <= 0.2 * 0.15

    @pytest.mark.parametrize("seed", [0, 11, 42])
    def test_depth_range_invariant(self, seed):
        frames = render_scene(generate_scene(seed, 6, 0.12))
        for f in frames:
            assert f.depth.values.min() >= 0.3
            assert f.depth.values.max() <= 18.0

    def test_camera_stays_inside_room(self):
        scene = generate_scene(9, 24, 0.15)
        half = scene.room.half()
        for p in scene.poses:
            assert np.all(np.abs(p.translation) < half)

    def test_too_few_frames_rejected(self):
        with pytest.raises(ContractError):
            generate_scene(0, 1, 0.1)


class TestDatasetIO:
    def test_roundtrip_within_quantization(self, tmp_path):
        frames = render_scene(generate_scene(5, 3, 0.1))
        scene = generate_scene(5, 3, 0.1)
        save_dataset(tmp_path, scene.intrinsics, frames)
        k, loaded = load_dataset(tmp_path)
        assert k == scene.intrinsics
        assert len(loaded) == 3
        for orig, back in zip(frames, loaded):
            assert np.abs(back.depth.values - orig.depth.values).max() <= 5e-4
            np.testing.assert_array_equal(back.pose.matrix(),
                                          orig.pose.matrix())
            assert np.abs(back.image - orig.image).max() <= 1.0 / 255.0

    def test_depth_png_scale(self, tmp_path):
        path = tmp_path / "d.png"
        save_depth_png(DepthMap(np.full((4, 4), 2.0)), path)
        back = load_depth_png(path)
        np.testing.assert_array_equal(back.values, 2.0)
        save_depth_png(DepthMap(np.full((4, 4), 1.5)), path)
        arr = np.asarray(load_depth_png(path).values)
        np.testing.assert_array_equal(arr, 1.5)

    def test_invalid_zero_is_masked(self, tmp_path):
        path = tmp_path / "d.png"
        vals = np.array([[2.0, 0.5], [1.0, 3.0]])
        valid = np.array([[True, False], [True, True]])
        save_depth_png(DepthMap(vals, valid), path)
        back = load_depth_png(path)
        np.testing.assert_array_equal(back.valid, valid)

    def test_pose_count_mismatch_is_descriptive(self, tmp_path):
        frames = render_scene(generate_scene(6, 3, 0.1))
        scene = generate_scene(6, 3, 0.1)
        save_dataset(tmp_path, scene.intrinsics, frames)
        identity = np.eye(4).ravel()
        with open(tmp_path / "poses.txt", "a") as f:
            f.write(" ".join(str(v) for v in identity) + "\n")
        with pytest.raises(DatasetError, match="poses"):
            load_dataset(tmp_path)

    def test_missing_intrinsics_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="intrinsics"):
            load_dataset(tmp_path)

    def test_saturation_sidecar(self, tmp_path):
        path = tmp_path / "big.png"
        save_depth_png(DepthMap(np.full((2, 2), 100.0)), path)
        assert (tmp_path / "big.png.saturated.txt").exists()


class TestMetrics:
    def test_perfect_prediction(self):
        gt = DepthMap(np.full((8, 8), 2.0))
        r = compute_metrics(DepthMap(gt.values.copy()), gt)
        assert r.abs_err == 0.0 and r.abs_rel == 0.0 and r.abs_inv == 0.0
        assert r.inlier_ratio == 1.0
        assert r.valid_count == 64

    def test_single_pixel_worked_example(self):
        gt = DepthMap(np.array([[1.0]]))
        pred = DepthMap(np.array([[2.0]]))
        r = compute_metrics(pred, gt)
        assert r.abs_err == 1.0
        assert r.abs_rel == 1.0
        assert r.abs_inv == 0.5
        assert r.inlier_ratio == 0.0  # 2 >= 1.25 * 1

    def test_below_min_depth_excluded(self):
        gt = DepthMap(np.array([[0.4, 2.0]]))
        pred = DepthMap(np.array([[9.0, 2.0]]))
        r = compute_metrics(pred, gt)
        assert r.valid_count == 1
        assert r.abs_err == 0.0

    def test_empty_mask_returns_none(self):
        gt = DepthMap(np.full((2, 2), 0.4))
        assert compute_metrics(DepthMap(np.ones((2, 2))), gt) is None

    def test_resolution_mismatch_upsampled_nearest(self):
        gt = DepthMap(np.full((4, 4), 2.0))
        pred = DepthMap(np.array([[2.0, 4.0], [2.0, 4.0]]))
        r = compute_metrics(pred, gt)
        assert r.valid_count == 16
        assert abs(r.abs_err - 1.0) < 1e-12

    def test_upsample_nearest_blocks(self):
        up = upsample_nearest(np.array([[1.0, 2.0]]), (2, 4))
        np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_aggregate_skips_empty(self):
        gt = DepthMap(np.full((2, 2), 2.0))
        r = compute_metrics(DepthMap(np.full((2, 2), 2.5)), gt)
        agg = aggregate_metrics([r, None])
        assert agg.valid_count == 4
        assert abs(agg.abs_err - 0.5) < 1e-12
