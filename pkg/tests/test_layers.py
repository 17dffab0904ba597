import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import layers
from errors import ArgumentError, NumericError, ShapeError, StateError
from layers import (
    ConvLayer,
    DenseLayer,
    PoolLayer,
    col2im,
    conv_backward,
    conv_forward,
    conv_forward_direct,
    conv_output_extent,
    dense_backward,
    dense_forward,
    im2col,
    maxpool_backward,
    maxpool_forward,
    pool_output_extent,
    relu_backward,
    relu_forward,
    softmax,
)
from verification.gradient_checker import numeric_gradient, relative_error


def random_conv(rng, out_ch, in_ch, kernel, stride=1, padding=0, dtype=np.float32):
    return ConvLayer(
        weights=rng.standard_normal((out_ch, in_ch, kernel, kernel)).astype(dtype),
        bias=rng.standard_normal(out_ch).astype(dtype),
        stride=stride,
        padding=padding,
    )


class TestGeometry:
    def test_default_first_layer(self):
        assert conv_output_extent(120, 11) == 110
        assert pool_output_extent(110) == 55
        assert conv_output_extent(55, 5) == 51
        assert pool_output_extent(51) == 25
        assert conv_output_extent(25, 3) == 23

    def test_stride_and_padding(self):
        assert conv_output_extent(9, 3, stride=2, padding=1) == 5
        with pytest.raises(ShapeError):
            conv_output_extent(8, 3, stride=2, padding=1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv_output_extent(120, 121)

    def test_pool_requires_matching_window_and_stride(self):
        with pytest.raises(ArgumentError):
            PoolLayer(window=2, stride=1)

    def test_im2col_adjoint(self, rng):
        # <im2col(x), c> == <x, col2im(c)>
        x = rng.standard_normal((2, 3, 6, 7))
        cols = rng.standard_normal(im2col(x, 3, 2, 1).shape)
        lhs = np.sum(im2col(x, 3, 2, 1) * cols)
        rhs = np.sum(x * col2im(cols, 3, 6, 7, 3, 2, 1))
        assert_allclose(lhs, rhs, rtol=1e-12)


class TestConvolution:
    def test_sum_of_ones(self):
        layer = ConvLayer(weights=np.ones((1, 1, 2, 2), np.float32), bias=np.zeros(1, np.float32))
        out = conv_forward(layer, np.ones((1, 1, 3, 3), np.float32))
        assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))

    def test_identity_kernel(self, rng):
        layer = ConvLayer(weights=np.ones((1, 1, 1, 1), np.float32), bias=np.zeros(1, np.float32))
        x = rng.standard_normal((2, 1, 5, 4)).astype(np.float32)
        assert_array_equal(conv_forward(layer, x), x)

    def test_matches_loop_oracle(self, rng):
        layer = random_conv(rng, 4, 3, 3)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        out = conv_forward(layer, x)
        assert out.shape == (2, 4, 6, 6)
        assert np.max(np.abs(out - conv_forward_direct(layer, x))) < 1e-5

    def test_matches_loop_oracle_strided_padded(self, rng):
        layer = random_conv(rng, 2, 2, 3, stride=2, padding=1)
        x = rng.standard_normal((3, 2, 9, 9)).astype(np.float32)
        out = conv_forward(layer, x)
        assert out.shape == (3, 2, 5, 5)
        assert np.max(np.abs(out - conv_forward_direct(layer, x))) < 1e-5

    @pytest.mark.parametrize("seed", range(100))
    def test_random_geometries_match_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        kernel = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        height = kernel + stride * int(rng.integers(0, 5)) - 2 * padding
        if height < 1:
            height, padding = kernel, 0
        layer = random_conv(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), kernel,
                            stride=stride, padding=padding)
        x = rng.standard_normal((int(rng.integers(1, 3)), layer.in_channels, height, height)).astype(np.float32)
        assert np.max(np.abs(conv_forward(layer, x) - conv_forward_direct(layer, x))) < 1e-5

    def test_default_first_layer_matches_loop_oracle(self, rng):
        layer = ConvLayer(weights=(0.05 * rng.standard_normal((50, 1, 11, 11))).astype(np.float32),
                          bias=(0.05 * rng.standard_normal(50)).astype(np.float32))
        x = rng.random((1, 1, 120, 120)).astype(np.float32)
        out = conv_forward(layer, x)
        assert out.shape == (1, 50, 110, 110)
        assert np.max(np.abs(out - conv_forward_direct(layer, x))) < 1e-5

    def test_matches_torch(self, rng):
        torch = pytest.importorskip("torch")
        layer = random_conv(rng, 4, 3, 5, dtype=np.float64)
        x = rng.standard_normal((2, 3, 11, 9))
        expected = torch.nn.functional.conv2d(
            torch.from_numpy(x), torch.from_numpy(layer.weights), torch.from_numpy(layer.bias)
        ).numpy()
        assert_allclose(conv_forward(layer, x), expected, atol=1e-10)

    def test_channel_mismatch(self, rng):
        layer = random_conv(rng, 2, 3, 3)
        with pytest.raises(ShapeError):
            conv_forward(layer, np.ones((1, 2, 5, 5), np.float32))
        with pytest.raises(ShapeError):
            conv_forward(layer, np.ones((1, 3, 2, 2), np.float32))

    def test_dtype_preserved(self, rng):
        layer = random_conv(rng, 2, 1, 3, dtype=np.float64)
        assert conv_forward(layer, np.ones((1, 1, 4, 4))).dtype == np.float64


class TestConvolutionBackward:
    def test_zero_output_gradient(self, rng):
        layer = random_conv(rng, 3, 2, 3)
        x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
        grads = conv_backward(layer, x, np.zeros((2, 3, 4, 4), np.float32))
        assert not grads.d_weights.any()
        assert not grads.d_bias.any()
        assert not grads.d_input.any()

    def test_bias_gradient_is_channel_sum(self, rng):
        layer = random_conv(rng, 3, 2, 3)
        x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
        d_out = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        grads = conv_backward(layer, x, d_out)
        assert_allclose(grads.d_bias, d_out.sum(axis=(0, 2, 3)), rtol=1e-5)

    def test_gradient_shapes(self, rng):
        layer = random_conv(rng, 3, 2, 3, padding=1)
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        grads = conv_backward(layer, x, np.ones((2, 3, 5, 5), np.float32))
        assert grads.d_weights.shape == layer.weights.shape
        assert grads.d_bias.shape == layer.bias.shape
        assert grads.d_input.shape == x.shape

    def test_skipping_input_gradient(self, rng):
        layer = random_conv(rng, 3, 2, 3)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        grads = conv_backward(layer, x, np.ones((1, 3, 3, 3), np.float32), input_grad=False)
        assert grads.d_input is None

    def test_output_gradient_shape_checked(self, rng):
        layer = random_conv(rng, 3, 2, 3)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        with pytest.raises(ShapeError):
            conv_backward(layer, x, np.ones((1, 3, 4, 4), np.float32))

    def test_finite_differences(self, rng):
        layer = random_conv(rng, 2, 2, 3, stride=2, padding=1, dtype=np.float64)
        x = rng.standard_normal((2, 2, 7, 7))
        d_out = rng.standard_normal((2, 2, 4, 4))
        grads = conv_backward(layer, x, d_out)

        def loss():
            return float(np.sum(d_out * conv_forward(layer, x))), ()

        for analytic, array in ((grads.d_weights, layer.weights), (grads.d_bias, layer.bias),
                                (grads.d_input, x)):
            numeric, _ = numeric_gradient(loss, array)
            assert relative_error(analytic, numeric) < 1e-4

    def test_chunking_and_threads_do_not_change_results(self, rng, monkeypatch):
        layer = random_conv(rng, 3, 2, 3)
        x = rng.standard_normal((6, 2, 8, 8)).astype(np.float32)
        d_out = rng.standard_normal((6, 3, 6, 6)).astype(np.float32)
        monkeypatch.setattr(layers, "IM2COL_CHUNK_BYTES", 1)

        monkeypatch.setenv("DCNN_NUM_THREADS", "1")
        serial_out = conv_forward(layer, x)
        serial = conv_backward(layer, x, d_out)
        monkeypatch.setenv("DCNN_NUM_THREADS", "4")
        parallel_out = conv_forward(layer, x)
        parallel = conv_backward(layer, x, d_out)

        assert serial_out.tobytes() == parallel_out.tobytes()
        assert serial.d_weights.tobytes() == parallel.d_weights.tobytes()
        assert serial.d_input.tobytes() == parallel.d_input.tobytes()


class TestMaxPool:
    def test_single_window(self):
        out, _ = maxpool_forward(PoolLayer(), np.array([[[[1, 2], [3, 4]]]], np.float32))
        assert_array_equal(out, [[[[4]]]])

    def test_constant_input(self):
        out, _ = maxpool_forward(PoolLayer(), np.full((1, 2, 4, 6), 0.5, np.float32))
        assert_array_equal(out, np.full((1, 2, 2, 3), 0.5))

    def test_odd_extent_matches_window_scan(self, rng):
        x = rng.standard_normal((1, 1, 7, 7)).astype(np.float32)
        out, cache = maxpool_forward(PoolLayer(), x)
        assert out.shape == (1, 1, 3, 3)
        for i in range(3):
            for j in range(3):
                assert out[0, 0, i, j] == x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        rows, cols = np.divmod(cache.winners.ravel(), 7)
        assert rows.max() < 6 and cols.max() < 6

    def test_backward_routes_to_winner(self):
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        _, cache = maxpool_forward(PoolLayer(), x)
        d_input = maxpool_backward(cache, np.ones((1, 1, 1, 1), np.float32))
        assert_array_equal(d_input, [[[[0, 0], [0, 1]]]])

    def test_ties_go_to_first_winner(self):
        _, cache = maxpool_forward(PoolLayer(), np.full((1, 1, 2, 2), 5.0, np.float32))
        d_input = maxpool_backward(cache, np.ones((1, 1, 1, 1), np.float32))
        assert_array_equal(d_input, [[[[1, 0], [0, 0]]]])

    def test_backward_conserves_mass(self, rng):
        x = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
        out, cache = maxpool_forward(PoolLayer(), x)
        d_out = rng.standard_normal(out.shape).astype(np.float32)
        d_input = maxpool_backward(cache, d_out)
        assert_allclose(d_input.sum(dtype=np.float64), d_out.sum(dtype=np.float64), rtol=1e-6)

    def test_matches_torch(self, rng):
        torch = pytest.importorskip("torch")
        x = rng.standard_normal((2, 3, 9, 7))
        out, _ = maxpool_forward(PoolLayer(), x)
        expected = torch.nn.functional.max_pool2d(torch.from_numpy(x), 2, 2).numpy()
        assert_array_equal(out, expected)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            maxpool_forward(PoolLayer(), np.ones((1, 1, 1, 4), np.float32))

    def test_mismatched_cache(self, rng):
        _, cache = maxpool_forward(PoolLayer(), np.ones((1, 1, 4, 4), np.float32))
        with pytest.raises(StateError):
            maxpool_backward(cache, np.ones((1, 1, 3, 3), np.float32))
        with pytest.raises(StateError):
            maxpool_backward(None, np.ones((1, 1, 2, 2), np.float32))

    def test_same_shaped_cache_routes_to_its_own_winners(self):
        first = np.array([[[[1, 0], [0, 0]]]], np.float32)
        second = np.array([[[[0, 0], [0, 1]]]], np.float32)
        _, first_cache = maxpool_forward(PoolLayer(), first)
        maxpool_forward(PoolLayer(), second)
        d_input = maxpool_backward(first_cache, np.ones((1, 1, 1, 1), np.float32))
        assert_array_equal(d_input, first)

    def test_network_rejects_trace_from_before_an_update(self, tiny_net, tiny_batch):
        _, old_trace = tiny_net.forward(tiny_batch)
        tiny_net.mark_updated()
        _, new_trace = tiny_net.forward(tiny_batch)
        assert old_trace.pool_caches[0].winners.shape == new_trace.pool_caches[0].winners.shape
        with pytest.raises(StateError):
            tiny_net.backward(old_trace, np.zeros((4, 2), np.float32))


class TestRelu:
    def test_forward(self):
        assert_array_equal(relu_forward(np.array([-1, 0, 2], np.float32)), [0, 0, 2])

    def test_subgradient_zero_at_zero(self):
        d = relu_backward(np.array([-1, 0, 2], np.float32), np.ones(3, np.float32))
        assert_array_equal(d, [0, 0, 1])

    def test_positive_input_is_identity(self, rng):
        x = rng.uniform(0.1, 2.0, size=(3, 4)).astype(np.float32)
        d = rng.standard_normal((3, 4)).astype(np.float32)
        assert_array_equal(relu_forward(x), x)
        assert_array_equal(relu_backward(x, d), d)


class TestDense:
    def test_identity(self, rng):
        layer = DenseLayer(weights=np.eye(4, dtype=np.float32), bias=np.zeros(4, np.float32))
        x = rng.standard_normal((3, 4)).astype(np.float32)
        assert_array_equal(dense_forward(layer, x), x)

    def test_backward(self, rng):
        layer = DenseLayer(weights=rng.standard_normal((4, 5)), bias=rng.standard_normal(4))
        x = rng.standard_normal((3, 5))
        d_out = rng.standard_normal((3, 4))
        grads = dense_backward(layer, x, d_out)
        assert_allclose(grads.d_bias, d_out.sum(axis=0))
        assert_allclose(grads.d_weights, d_out.T @ x)
        assert_allclose(grads.d_input, d_out @ layer.weights)

    def test_shape_mismatch(self, rng):
        layer = DenseLayer(weights=np.ones((4, 5), np.float32), bias=np.zeros(4, np.float32))
        with pytest.raises(ShapeError):
            dense_forward(layer, np.ones((3, 4), np.float32))
        with pytest.raises(ShapeError):
            dense_backward(layer, np.ones((3, 5), np.float32), np.ones((3, 5), np.float32))


class TestSoftmax:
    def test_equal_logits(self):
        assert_allclose(softmax(np.array([[3.5, 3.5]], np.float32)), [[0.5, 0.5]])

    def test_log_three(self):
        assert_allclose(softmax(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]], rtol=1e-12)

    def test_large_logits(self):
        out = softmax(np.array([[1000.0, 1000.0]], np.float32))
        assert np.all(np.isfinite(out))
        assert_allclose(out, [[0.5, 0.5]])

    def test_rows_are_distributions(self, rng):
        out = softmax(rng.standard_normal((50, 2)).astype(np.float32) * 10)
        assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((out > 0) & (out < 1))

    def test_shift_invariance(self):
        logits = np.array([[1.0, 3.0], [-2.0, 4.0]], np.float32)
        assert softmax(logits).tobytes() == softmax(logits + 8.0).tobytes()

    def test_non_finite_logits(self):
        with pytest.raises(NumericError):
            softmax(np.array([[np.nan, 0.0]], np.float32))

    def test_needs_two_classes(self):
        with pytest.raises(ShapeError):
            softmax(np.ones((3, 1), np.float32))
