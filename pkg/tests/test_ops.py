"""Forward-pass behavior of the functional kernels and leaf layers."""

import numpy as np
import pytest

from blastoseg.errors import (
    DimensionError,
    PreconditionError,
    StateError,
    UnsupportedConfigError,
    ValidationError,
)
from blastoseg.nn import ops
from blastoseg.nn.layers import (
    BatchNorm2d,
    ConcatChannels,
    Dropout,
    LayerSpec,
    ReLU,
    ResidualAdd,
    Sigmoid,
)


class TestConv2d:
    def test_all_ones_3x3(self):
        """3x3 ones kernel over a 3x3 ones input counts in-frame taps."""
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        y, _ = ops.conv2d(x, w)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        np.testing.assert_array_equal(y[0, 0], expected)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        y, _ = ops.conv2d(x, w)
        np.testing.assert_array_equal(y, x)

    def test_dilation_2_tap_counts(self):
        """Dilated taps on a 5x5 ones input: all 9 land inside at the center,
        only 4 at a corner."""
        x = np.ones((1, 1, 5, 5), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        y, _ = ops.conv2d(x, w, dilation=2)
        assert y.shape == (1, 1, 5, 5)
        assert y[0, 0, 2, 2] == 9
        assert y[0, 0, 0, 0] == 4

    def test_bias_added_per_channel(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((3, 2, 3, 3), dtype=np.float32)
        b = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        y, _ = ops.conv2d(x, w, b)
        for c, value in enumerate(b):
            np.testing.assert_array_equal(y[0, c], np.full((4, 4), value))

    @pytest.mark.parametrize("kernel", [1, 3, 5])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8, 16])
    def test_same_padding_preserves_shape(self, kernel, dilation):
        x = np.zeros((1, 1, 33, 40), dtype=np.float32)
        w = np.zeros((2, 1, kernel, kernel), dtype=np.float32)
        y, _ = ops.conv2d(x, w, dilation=dilation)
        assert y.shape == (1, 2, 33, 40)

    def test_stride_2_output_is_ceil(self):
        x = np.zeros((1, 1, 7, 10), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        y, _ = ops.conv2d(x, w, stride=2)
        assert y.shape == (1, 1, 4, 5)

    def test_channel_mismatch_names_axis(self):
        x = np.zeros((1, 3, 4, 4), dtype=np.float32)
        w = np.zeros((1, 2, 3, 3), dtype=np.float32)
        with pytest.raises(DimensionError, match="channel axis"):
            ops.conv2d(x, w)

    def test_output_keeps_input_dtype(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        y, _ = ops.conv2d(x, w)
        assert y.dtype == np.float32


class TestConv2dBackward:
    def test_identity_adjoint(self):
        """A single-pixel gradient through a 1x1 identity kernel lands on the
        same pixel of grad_input."""
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        _, cache = ops.conv2d(x, w, np.zeros(1, dtype=np.float32))
        gy = np.zeros((1, 1, 4, 4), dtype=np.float32)
        gy[0, 0, 2, 1] = 1.0
        gx, gw, gb = ops.conv2d_backward(cache, gy)
        np.testing.assert_array_equal(gx, gy)
        assert gb[0] == 1.0

    def test_zero_gradient_maps_to_zero(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        _, cache = ops.conv2d(x, w, b)
        gx, gw, gb = ops.conv2d_backward(cache, np.zeros((2, 4, 6, 6), np.float32))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_grad_shape_checked(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        _, cache = ops.conv2d(x, w)
        with pytest.raises(DimensionError):
            ops.conv2d_backward(cache, np.zeros((1, 1, 5, 5), np.float32))


class TestTransposedConv2d:
    def test_single_pixel_stamps_kernel(self):
        x = np.ones((1, 1, 1, 1), dtype=np.float32)
        w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y, _ = ops.transposed_conv2d(x, w)
        np.testing.assert_array_equal(y[0, 0], [[1, 2], [3, 4]])

    def test_disjoint_stamps_of_ones(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        y, _ = ops.transposed_conv2d(x, w)
        np.testing.assert_array_equal(y[0, 0], np.ones((4, 4)))

    def test_zero_input(self):
        x = np.zeros((2, 3, 4, 4), dtype=np.float32)
        w = np.ones((3, 5, 2, 2), dtype=np.float32)
        y, _ = ops.transposed_conv2d(x, w)
        assert y.shape == (2, 5, 8, 8)
        assert not y.any()

    def test_rejects_non_doubling_kernel(self):
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(UnsupportedConfigError):
            ops.transposed_conv2d(x, w)

    def test_backward_shapes(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
        _, cache = ops.transposed_conv2d(x, w)
        gx, gw = ops.transposed_conv2d_backward(
            cache, np.ones((2, 2, 10, 8), np.float32))
        assert gx.shape == x.shape
        assert gw.shape == w.shape


class TestMaxPool2d:
    def test_single_window(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y, _ = ops.maxpool2d(x)
        assert y[0, 0, 0, 0] == 4.0

    def test_tie_break_routes_to_first_in_window(self):
        """Constant input: every window is a tie, so the backward pass puts
        the whole gradient on the window's first element in row-major order."""
        x = np.ones((1, 1, 4, 4), dtype=np.float32)
        y, cache = ops.maxpool2d(x)
        np.testing.assert_array_equal(y, np.ones((1, 1, 2, 2)))
        gx = ops.maxpool2d_backward(cache, np.ones((1, 1, 2, 2), np.float32))
        expected = np.zeros((4, 4), dtype=np.float32)
        expected[0::2, 0::2] = 1.0
        np.testing.assert_array_equal(gx[0, 0], expected)

    def test_odd_size_rejected(self):
        with pytest.raises(DimensionError, match="height"):
            ops.maxpool2d(np.zeros((1, 1, 5, 4), np.float32))
        with pytest.raises(DimensionError, match="width"):
            ops.maxpool2d(np.zeros((1, 1, 4, 5), np.float32))

    def test_halves_240(self):
        y, _ = ops.maxpool2d(np.zeros((1, 1, 240, 240), np.float32))
        assert y.shape == (1, 1, 120, 120)

    def test_gradient_mass_conserved(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        _, cache = ops.maxpool2d(x)
        gy = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        gx = ops.maxpool2d_backward(cache, gy)
        assert np.isclose(gx.sum(), gy.sum(), rtol=1e-6)


class TestElementwiseLayers:
    def test_sigmoid_symmetry_point(self):
        y = Sigmoid().forward(np.zeros((1, 1, 1, 1), np.float32))
        assert y[0, 0, 0, 0] == 0.5

    def test_sigmoid_stable_for_large_inputs(self):
        x = np.array([[[[-500.0, 500.0]]]], dtype=np.float32)
        y = Sigmoid().forward(x)
        assert np.all(np.isfinite(y))
        assert y[0, 0, 0, 0] == 0.0 and y[0, 0, 0, 1] == 1.0

    def test_relu_definition(self):
        x = np.array([[[[-3.7, 2.5]]]], dtype=np.float32)
        y = ReLU().forward(x)
        np.testing.assert_array_equal(y[0, 0, 0], [0.0, 2.5])

    def test_dropout_infer_is_identity(self):
        x = np.random.default_rng(4).standard_normal((2, 3, 4, 4)).astype(np.float32)
        layer = Dropout(0.05)
        np.testing.assert_array_equal(layer.forward(x, train=False), x)

    def test_dropout_train_requires_rng(self):
        layer = Dropout(0.05)
        with pytest.raises(PreconditionError):
            layer.forward(np.ones((1, 1, 2, 2), np.float32), train=True)

    def test_dropout_reproducible_and_mean_preserving(self):
        """Same seed gives the same mask, and inverted scaling keeps the
        expected activation within 1% over 10^4 samples."""
        x = np.ones((1, 1, 100, 100), dtype=np.float32)
        layer = Dropout(0.05)
        y1 = layer.forward(x, train=True, rng=np.random.default_rng(7))
        y2 = layer.forward(x, train=True, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(y1, y2)
        assert abs(y1.mean() - 1.0) < 0.01
        survivors = y1[y1 > 0]
        np.testing.assert_allclose(survivors, 1.0 / 0.95, rtol=1e-6)

    def test_dropout_rate_validated(self):
        with pytest.raises(ValidationError):
            Dropout(1.0)


class TestBatchNorm2d:
    def test_constant_channel_maps_to_zero(self):
        bn = BatchNorm2d(2)
        x = np.full((3, 2, 4, 4), 7.0, dtype=np.float32)
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y, 0.0, atol=1e-5)

    def test_symmetric_values_normalize_to_unit(self):
        bn = BatchNorm2d(1)
        x = np.array([-1.0, 1.0] * 8, dtype=np.float32).reshape(1, 1, 4, 4)
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(np.unique(np.round(y, 4)),
                                   [-1.0, 1.0], atol=1e-4)

    def test_affine_parameters_applied(self):
        bn = BatchNorm2d(1)
        bn.gamma[:] = 2.0
        bn.beta[:] = 3.0
        x = np.array([-1.0, 1.0] * 8, dtype=np.float32).reshape(1, 1, 4, 4)
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(sorted(np.unique(np.round(y, 3))),
                                   [1.0, 5.0], atol=1e-3)

    def test_infer_before_train_is_a_state_error(self):
        bn = BatchNorm2d(1)
        with pytest.raises(StateError):
            bn.forward(np.zeros((1, 1, 2, 2), np.float32), train=False)

    def test_running_stats_momentum(self):
        bn = BatchNorm2d(1, momentum=0.9)
        x = np.array([0.0, 2.0] * 8, dtype=np.float32).reshape(1, 1, 4, 4)
        bn.forward(x, train=True)
        # running = 0.9 * init + 0.1 * batch, with init mean 0 / var 1
        assert np.isclose(bn.running_mean[0], 0.1 * 1.0)
        assert np.isclose(bn.running_var[0], 0.9 * 1.0 + 0.1 * 1.0)
        assert bn.initialized

    def test_infer_uses_running_stats(self):
        bn = BatchNorm2d(1, init_running=True)
        x = np.array([[[[3.0]]]], dtype=np.float32)
        y = bn.forward(x, train=False)
        np.testing.assert_allclose(y, 3.0, rtol=1e-4)


class TestStructuralLayers:
    def test_concat_stacks_in_given_order(self):
        a = np.full((1, 2, 3, 3), 1.0, dtype=np.float32)
        b = np.full((1, 1, 3, 3), 2.0, dtype=np.float32)
        y = ConcatChannels().forward([a, b])
        assert y.shape == (1, 3, 3, 3)
        assert np.all(y[0, :2] == 1.0) and np.all(y[0, 2] == 2.0)

    def test_concat_spatial_mismatch(self):
        a = np.zeros((1, 1, 3, 3), np.float32)
        b = np.zeros((1, 1, 4, 4), np.float32)
        with pytest.raises(DimensionError, match="spatial"):
            ConcatChannels().forward([a, b])

    def test_concat_backward_splits(self):
        layer = ConcatChannels()
        a = np.zeros((1, 2, 2, 2), np.float32)
        b = np.zeros((1, 3, 2, 2), np.float32)
        layer.forward([a, b])
        ga, gb = layer.backward(np.ones((1, 5, 2, 2), np.float32))
        assert ga.shape == a.shape and gb.shape == b.shape

    def test_residual_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ResidualAdd().forward((np.zeros((1, 1, 2, 2), np.float32),
                                   np.zeros((1, 2, 2, 2), np.float32)))


class TestLayerSpec:
    def test_dilation_only_for_conv(self):
        LayerSpec("conv2d", dilation=4)
        with pytest.raises(ValidationError):
            LayerSpec("maxpool2d", dilation=2)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            LayerSpec("avgpool")
