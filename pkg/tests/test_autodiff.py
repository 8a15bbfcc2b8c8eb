import numpy as np
import pytest

from videodepth.autodiff import (
    ConvParams,
    Tensor,
    concat_channels,
    conv2d,
    downsample_avg2x,
    elu,
    grid_sample_bilinear,
    identity_grid,
    layer_norm_spatial,
    no_grad,
    pointwise,
    sigmoid,
    stop_gradient,
    sum_channels,
    tanh,
    tensor,
    upsample_bilinear2x,
    upsample_nearest2x,
)
from videodepth.errors import ContractError

from helpers import check_gradients

RNG = np.random.default_rng(20240811)


def rand_tensor(*shape, grad=True, rng=RNG):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestConv2d:
    def test_ones_kernel_counts_neighbors(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        p = ConvParams(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        out = conv2d(x, p).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_identity_kernel(self):
        x = rand_tensor(2, 3, 5, 5, grad=False)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        p = ConvParams(Tensor(w), Tensor(np.zeros(3)), padding=1)
        np.testing.assert_array_equal(conv2d(x, p).data, x.data)

    def test_zero_input_yields_bias(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        b = np.array([1.5, -2.0])
        p = ConvParams(Tensor(RNG.standard_normal((2, 2, 3, 3))), Tensor(b), padding=1)
        out = conv2d(x, p).data
        np.testing.assert_allclose(out[0, 0], 1.5)
        np.testing.assert_allclose(out[0, 1], -2.0)

    def test_strided_shape(self):
        x = rand_tensor(1, 2, 8, 8, grad=False)
        p = ConvParams(Tensor(RNG.standard_normal((4, 2, 3, 3))),
                       Tensor(np.zeros(4)), stride=2, padding=1)
        assert conv2d(x, p).shape == (1, 4, 4, 4)

    def test_channel_mismatch_raises(self):
        x = rand_tensor(1, 3, 4, 4, grad=False)
        p = ConvParams(Tensor(RNG.standard_normal((2, 2, 3, 3))), Tensor(np.zeros(2)))
        with pytest.raises(ContractError):
            conv2d(x, p)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            ConvParams(Tensor(RNG.standard_normal((2, 2, 2, 2))))

    def test_linearity_in_input(self):
        p = ConvParams(Tensor(RNG.standard_normal((3, 2, 3, 3))),
                       Tensor(RNG.standard_normal(3)), padding=1)
        x = rand_tensor(1, 2, 6, 6, grad=False)
        y = rand_tensor(1, 2, 6, 6, grad=False)
        a, b = 0.7, -1.3
        combo = conv2d(Tensor(a * x.data + b * y.data), p).data
        parts = a * conv2d(x, p).data + b * conv2d(y, p).data
        bias_adj = (a + b - 1.0) * conv2d(Tensor(np.zeros_like(x.data)), p).data
        np.testing.assert_allclose(combo, parts - bias_adj, atol=1e-10)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_gradients(self, stride, padding):
        rng = np.random.default_rng(7 + stride * 10 + padding)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        p = ConvParams(w, b, stride=stride, padding=padding)
        check_gradients(lambda: (conv2d(x, p) * conv2d(x, p)).sum(), [x, w, b],
                        rng=rng, samples=40)


class TestPointwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_elu_limits(self):
        out = elu(Tensor(np.array([-50.0, 2.0, 0.0]))).data
        np.testing.assert_allclose(out[0], -1.0, atol=1e-12)
        assert out[1] == 2.0
        assert out[2] == 0.0

    def test_tanh_odd(self):
        assert tanh(Tensor(np.zeros(1))).data[0] == 0.0

    def test_sigmoid_stable_at_extremes(self):
        out = sigmoid(Tensor(np.array([-1e4, 1e4]))).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_pointwise_dispatch(self):
        x = Tensor(np.array([0.3]))
        for kind in ("sigmoid", "elu", "tanh"):
            pointwise(x, kind)
        with pytest.raises(ContractError):
            pointwise(x, "relu")

    @pytest.mark.parametrize("kind", ["sigmoid", "elu", "tanh"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)) * 2 + 0.1, requires_grad=True)
        check_gradients(lambda: (pointwise(x, kind) * pointwise(x, kind)).sum(), [x])


class TestLayerNorm:
    def test_constant_slice_zero(self):
        x = Tensor(np.full((1, 2, 3, 3), 5.0))
        np.testing.assert_array_equal(layer_norm_spatial(x).data, 0.0)

    def test_already_normalized_pair(self):
        x = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
        out = layer_norm_spatial(x).data.ravel()
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)

    def test_output_statistics(self):
        # variance must dominate epsilon=1e-5 for the 1e-6 bound to hold
        x = Tensor(RNG.standard_normal((2, 4, 5, 7)) * 30.0)
        out = layer_norm_spatial(x).data
        mu = out.mean(axis=(2, 3))
        var = out.var(axis=(2, 3))
        assert np.abs(mu).max() < 1e-9
        assert np.abs(var - 1.0).max() < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        check_gradients(lambda: (layer_norm_spatial(x) * rng_weights).sum(), [x])


rng_weights = np.random.default_rng(5).standard_normal((2, 3, 4, 4))


class TestGridSample:
    def test_identity_grid_is_exact_identity(self):
        x = rand_tensor(2, 3, 5, 6, grad=False)
        g = identity_grid(2, 5, 6)
        np.testing.assert_array_equal(grid_sample_bilinear(x, g).data, x.data)

    def test_midpoint_interpolation(self):
        x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
        g = np.array([0.5, 0.0]).reshape(1, 1, 1, 2)
        assert grid_sample_bilinear(x, g).data.ravel()[0] == 0.5

    def test_far_out_of_bounds_is_zero(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        g = np.array([-10.0, 1.0]).reshape(1, 1, 1, 2)
        assert grid_sample_bilinear(x, g).data.ravel()[0] == 0.0

    def test_partial_out_of_bounds_fades(self):
        x = Tensor(np.ones((1, 1, 1, 2)))
        g = np.array([-0.5, 0.0]).reshape(1, 1, 1, 2)
        assert grid_sample_bilinear(x, g).data.ravel()[0] == 0.5

    def test_gradients_input_and_grid(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        # keep coords away from integers: FD kinks at cell boundaries
        coords = rng.uniform(0.1, 3.9, size=(2, 4, 4, 2))
        coords = np.where(np.abs(coords - np.round(coords)) < 0.05,
                          coords + 0.1, coords)
        g = Tensor(coords, requires_grad=True)
        check_gradients(
            lambda: (grid_sample_bilinear(x, g) * grid_sample_bilinear(x, g)).sum(),
            [x, g])


class TestResample:
    def test_constant_upsample(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0))
        for f in (upsample_nearest2x, upsample_bilinear2x):
            out = f(x).data
            assert out.shape == (1, 1, 4, 4)
            np.testing.assert_allclose(out, 3.0)

    def test_nearest_blocks(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = upsample_nearest2x(x).data[0, 0]
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        np.testing.assert_array_equal(out, expected)

    def test_down_then_up_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), -1.7))
        out = upsample_nearest2x(downsample_avg2x(x)).data
        np.testing.assert_allclose(out, -1.7)

    def test_odd_downsample_rejected(self):
        with pytest.raises(ContractError):
            downsample_avg2x(Tensor(np.zeros((1, 1, 3, 4))))

    @pytest.mark.parametrize("f", [upsample_nearest2x, downsample_avg2x,
                                   upsample_bilinear2x])
    def test_gradients(self, f):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        check_gradients(lambda: (f(x) * f(x)).sum(), [x])


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = rand_tensor(3, 2, 2, 2)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_square_grad(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_rejected(self):
        x = rand_tensor(2, 2)
        with pytest.raises(ContractError):
            x.backward()

    def test_stop_gradient_blocks_flow(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        loss = (stop_gradient(y) * x).sum()
        loss.backward()
        # d/dx of const(3x) * x = 3x = 6, not 12
        np.testing.assert_allclose(x.grad, [6.0])

    def test_grad_accumulates_through_shared_node(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        y = x * 2.0
        (y * y).sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 4 * 1.5])

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad and y._parents == ()

    def test_concat_and_sum_channels(self):
        a = rand_tensor(1, 2, 3, 3)
        b = rand_tensor(1, 1, 3, 3)
        out = sum_channels(concat_channels([a, b]))
        out.sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def _random_graph(seed, x0, params):
    """Compose 6 random ops into a scalar loss, reusing leaf tensors.

    On the first call params holds only x0 and parameter leaves are
    created and appended; later calls pull the same leaves by position,
    so the graph can be rebuilt for finite differencing.
    """
    rng = np.random.default_rng(1000 + seed)
    first = len(params) == 1
    cursor = 1
    x = x0
    for _ in range(6):
        kind = rng.integers(0, 6)
        _, c, h, w = x.shape
        if kind == 0:
            cout = int(rng.integers(1, 5))
            wdat = rng.standard_normal((cout, c, 3, 3)) * 0.4
            bdat = rng.standard_normal(cout) * 0.1
            if first:
                params.append(Tensor(wdat, requires_grad=True))
                params.append(Tensor(bdat, requires_grad=True))
            w_, b_ = params[cursor], params[cursor + 1]
            cursor += 2
            x = conv2d(x, ConvParams(w_, b_, padding=1))
        elif kind == 1:
            x = pointwise(x, ["sigmoid", "elu", "tanh"][int(rng.integers(0, 3))])
        elif kind == 2:
            x = layer_norm_spatial(x)
        elif kind == 3 and h % 2 == 0 and w % 2 == 0 and h > 2:
            x = downsample_avg2x(x)
        elif kind == 4 and h <= 8:
            x = upsample_bilinear2x(x)
        else:
            x = x * Tensor(rng.standard_normal(x.shape) * 0.5)
    return (x * x).sum()


class TestComposedGraphs:
    @pytest.mark.parametrize("seed", range(6))
    def test_depth6_random_graph_gradcheck(self, seed):
        rng = np.random.default_rng(1000 + seed)
        shape = (2, int(rng.integers(1, 5)), 8, 8)
        x0 = Tensor(rng.standard_normal(shape), requires_grad=True)
        params = [x0]
        _random_graph(seed, x0, params)
        check_gradients(lambda: _random_graph(seed, x0, params), params,
                        rng=rng, samples=25)
