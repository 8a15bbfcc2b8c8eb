import numpy as np
import pytest

from videodepth.autodiff import (
    Tensor,
    grid_sample_bilinear,
    mul,
    sum_channels,
)
from videodepth.cost_volume import (
    CostVolume,
    FeatureMap,
    _correlation_sample,
    average_cost_volumes,
    build_cost_volume,
    sweep_grids,
)
from videodepth.errors import ContractError
from videodepth.geometry import CameraIntrinsics, Pose, sample_planes

from helpers import check_gradients, feature_plane_pair

K_HALF = CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=23.5, width=48, height=48)
PLANES = sample_planes(0.25, 20.0, 64)


def fmap(data, pose=None, k=K_HALF):
    return FeatureMap(Tensor(np.asarray(data, dtype=np.float64)), k,
                      pose or Pose.identity())


class TestBuildCostVolume:
    def test_zero_measurement_gives_zero_volume(self):
        rng = np.random.default_rng(0)
        ref = fmap(rng.standard_normal((1, 4, 48, 48)))
        meas = fmap(np.zeros((1, 4, 48, 48)),
                    Pose(np.eye(3), np.array([0.1, 0, 0])))
        vol = build_cost_volume(ref, meas, PLANES)
        np.testing.assert_array_equal(vol.data.data, 0.0)

    def test_identity_pose_all_ones_gives_minus_one(self):
        ones = np.ones((1, 8, 48, 48))
        vol = build_cost_volume(fmap(ones), fmap(ones), PLANES)
        np.testing.assert_allclose(vol.data.data, -1.0)

    def test_identity_pose_constant_across_planes(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((1, 4, 48, 48))
        g = rng.standard_normal((1, 4, 48, 48))
        vol = build_cost_volume(fmap(f), fmap(g), PLANES).data.data
        np.testing.assert_array_equal(vol, np.broadcast_to(vol[:, :1], vol.shape))

    def test_cauchy_schwarz_bound(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((1, 6, 48, 48))
        g = rng.standard_normal((1, 6, 48, 48))
        meas_pose = Pose(np.eye(3), np.array([0.05, 0.02, 0.0]))
        vol = build_cost_volume(fmap(f), fmap(g, meas_pose), PLANES).data.data
        norm_f = np.linalg.norm(f, axis=1)
        bound = norm_f * np.abs(g).sum(axis=1).max() / 6.0 + 1e-12
        assert np.all(np.abs(vol) <= bound[:, None])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            build_cost_volume(fmap(np.zeros((1, 4, 48, 48))),
                              fmap(np.zeros((1, 5, 48, 48))), PLANES)

    def test_localizes_fronto_parallel_plane(self):
        hits, total = 0, 0
        for seed in range(3):
            frac, n = plane_argmin_fraction(seed)
            hits += frac * n
            total += n
        assert hits / total >= 0.95

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        k = CameraIntrinsics(fx=8.0, fy=8.0, cx=3.5, cy=3.5, width=8, height=8)
        planes = sample_planes(0.5, 4.0, 4)
        ref_d = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
        meas_d = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
        pose = Pose(np.eye(3), np.array([0.08, 0.0, 0.0]))

        def loss():
            ref = FeatureMap(ref_d, k, Pose.identity())
            meas = FeatureMap(meas_d, k, pose)
            v = build_cost_volume(ref, meas, planes)
            return (v.data * v.data).sum()

        check_gradients(loss, [ref_d, meas_d], rng=rng, samples=40)


def plane_argmin_fraction(seed, contrast_tau=0.05, tx=1.2):
    """Fraction of textured, visible pixels whose cost argmin is the plane
    nearest the true depth. Returns (fraction, n_evaluated).

    The true depth is placed within 15% of a plane step of some plane so
    that "nearest plane" has a margin; a midway depth would make the two
    straddling planes equally good for any matcher.
    """
    rng = np.random.default_rng(900 + seed)
    inv = 1.0 / PLANES.depths
    # depths >= ~1.7 m keep the true disparity well inside the image at
    # this baseline
    m_star = int(rng.integers(55, 62))
    jitter = rng.uniform(-0.15, 0.15) * (inv[m_star + 1] - inv[m_star])
    d_true = 1.0 / (inv[m_star] + jitter)
    ref_feat, meas_feat = feature_plane_pair(K_HALF, d_true, tx, channels=32,
                                             seed=seed)
    ref = fmap(ref_feat)
    meas = fmap(meas_feat, Pose(np.eye(3), np.array([tx, 0.0, 0.0])))
    vol = build_cost_volume(ref, meas, PLANES).data.data[0]
    argmin = vol.argmin(axis=0)
    nearest = int(np.argmin(np.abs(inv - 1.0 / d_true)))
    # evaluate where the texture has contrast and the true correspondence
    # is inside the measurement image
    contrast = np.mean([np.hypot(*np.gradient(ch)[::-1]) for ch in ref_feat[0]],
                       axis=0)
    xs = np.arange(K_HALF.width)[None, :] - K_HALF.fx * tx / d_true
    visible = np.broadcast_to(xs >= 0, argmin.shape)
    mask = (contrast > contrast_tau) & visible
    n = int(mask.sum())
    frac = float((argmin[mask] == nearest).mean())
    return frac, n


class TestAverageCostVolumes:
    def _vol(self, data):
        return CostVolume(Tensor(data), sample_planes(0.25, 20.0, data.shape[1]))

    def test_single_volume_is_itself(self):
        v = self._vol(np.random.default_rng(4).standard_normal((1, 8, 4, 4)))
        out = average_cost_volumes([v])
        np.testing.assert_array_equal(out.data.data, v.data.data)

    def test_mean_of_two_copies(self):
        d = np.random.default_rng(5).standard_normal((1, 8, 4, 4))
        out = average_cost_volumes([self._vol(d), self._vol(d.copy())])
        np.testing.assert_allclose(out.data.data, d)

    def test_opposite_volumes_cancel(self):
        d = np.random.default_rng(6).standard_normal((1, 8, 4, 4))
        out = average_cost_volumes([self._vol(d), self._vol(-d)])
        np.testing.assert_allclose(out.data.data, 0.0, atol=1e-15)

    def test_empty_list_rejected(self):
        with pytest.raises(ContractError):
            average_cost_volumes([])


class TestFusedCorrelation:
    def test_matches_composed_primitives(self):
        rng = np.random.default_rng(7)
        ref = Tensor(rng.standard_normal((2, 5, 6, 6)))
        meas = Tensor(rng.standard_normal((2, 5, 6, 6)))
        grid = rng.uniform(-1.0, 6.5, size=(2, 6, 6, 2))
        fused = _correlation_sample(ref, meas, grid, -0.2)
        composed = sum_channels(mul(ref, grid_sample_bilinear(meas, grid))) * -0.2
        np.testing.assert_allclose(fused.data, composed.data, atol=1e-12)

    def test_batched_grids_use_per_item_poses(self):
        pose_a = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        pose_b = Pose(np.eye(3), np.array([-0.1, 0.0, 0.0]))
        grids = sweep_grids(K_HALF, [pose_a, pose_b], [2.0, 4.0])
        assert grids.shape == (2, 2, 48, 48, 2)
        assert not np.allclose(grids[0], grids[1])
