import numpy as np
import pytest

from broadunet import layers
from broadunet.layers import (
    Activation,
    Conv3D,
    ConvSpec,
    Dropout,
    ImageLevelPool,
    MaxPoolSpatial,
    Sequential,
    UpsampleNearestSpatial,
    conv3d_backward,
    conv3d_forward,
    conv_unit,
    factorize_conv,
)
from broadunet.tensor import ShapeError
from broadunet.training import grad_check

from conftest import naive_conv3d


class TestConvSpec:
    def test_effective_extent(self):
        spec = ConvSpec((1, 3, 3), 1, 1, dilation=(1, 18, 18))
        assert spec.effective_extent == (1, 37, 37)

    def test_param_count(self):
        assert ConvSpec((3, 3, 3), 2, 4).param_count == 27 * 2 * 4 + 4
        assert ConvSpec((1, 1, 1), 1, 1, bias=False).param_count == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            ConvSpec((0, 3, 3), 1, 1)
        with pytest.raises(ValueError):
            ConvSpec((3, 3, 3), 1, 1, dilation=(0, 1, 1))
        with pytest.raises(ValueError):
            ConvSpec((3, 3, 3), 0, 1)
        with pytest.raises(ValueError):
            ConvSpec((3, 3, 3), 1, 1, padding="reflect")

    def test_valid_padding_feasibility(self):
        spec = ConvSpec((1, 5, 5), 1, 1, padding="valid")
        with pytest.raises(ShapeError):
            spec.out_extents((1, 4, 4))


class TestConvForward:
    def test_scalar_affine(self):
        x = np.array([[[[3.0]]]])
        w = np.full((1, 1, 1, 1, 1), 2.0)
        y, _ = conv3d_forward(x, w, np.array([1.0]), ConvSpec((1, 1, 1), 1, 1))
        assert y.item() == 7.0

    def test_sum_of_ones_valid(self):
        x = np.ones((1, 3, 3, 1))
        w = np.ones((1, 3, 3, 1, 1))
        y, _ = conv3d_forward(x, w, None, ConvSpec(
            (1, 3, 3), 1, 1, padding="valid", bias=False))
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_dilated_one_hot_matches_sliding_window_oracle(self):
        # one-hot center: the kernel is "exploded" onto the distance-2
        # neighborhood around the center
        x = np.zeros((1, 5, 5, 1))
        x[0, 2, 2, 0] = 1.0
        rng = np.random.default_rng(0)
        w = rng.standard_normal((1, 3, 3, 1, 1))
        spec = ConvSpec((1, 3, 3), 1, 1, dilation=(1, 2, 2), bias=False)
        y, _ = conv3d_forward(x, w, None, spec)
        np.testing.assert_allclose(y, naive_conv3d(x, w, None, spec),
                                   rtol=1e-12, atol=1e-12)
        # cross-correlation: tap (j, k) contributes to the output position
        # displaced by -(j-1)*2, -(k-1)*2 from the hot pixel
        expected = np.zeros((5, 5))
        for j in range(3):
            for k in range(3):
                expected[2 - 2 * (j - 1), 2 - 2 * (k - 1)] = w[0, j, k, 0, 0]
        np.testing.assert_allclose(y[0, :, :, 0], expected, atol=1e-12)

    @pytest.mark.parametrize("spec,shape", [
        (ConvSpec((2, 3, 3), 2, 3), (3, 5, 5, 2)),
        (ConvSpec((3, 3, 3), 1, 2, padding="valid"), (4, 6, 6, 1)),
        (ConvSpec((1, 3, 3), 2, 2, dilation=(1, 2, 2)), (2, 7, 7, 2)),
        (ConvSpec((2, 2, 2), 1, 1), (3, 4, 4, 1)),  # even kernel pad split
    ])
    def test_matches_naive_oracle(self, spec, shape):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(shape)
        w = rng.standard_normal(spec.weight_shape())
        b = rng.standard_normal(spec.out_channels) if spec.bias else None
        y, _ = conv3d_forward(x, w, b, spec)
        np.testing.assert_allclose(y, naive_conv3d(x, w, b, spec),
                                   rtol=1e-10, atol=1e-10)

    def test_same_padding_preserves_extents(self):
        rng = np.random.default_rng(1)
        for kernel in [(1, 1, 1), (2, 3, 3), (3, 3, 3), (1, 5, 5), (2, 2, 2)]:
            for dilation in [(1, 1, 1), (1, 2, 2), (2, 3, 3)]:
                spec = ConvSpec(kernel, 1, 1, dilation=dilation)
                x = rng.standard_normal((3, 8, 8, 1))
                y, _ = conv3d_forward(x, rng.standard_normal(
                    spec.weight_shape()), np.zeros(1), spec)
                assert y.shape[:3] == x.shape[:3]

    def test_channel_mismatch(self):
        spec = ConvSpec((1, 1, 1), 2, 1)
        with pytest.raises(ValueError):
            conv3d_forward(np.zeros((1, 2, 2, 1)), np.zeros((1, 1, 1, 2, 1)),
                           None, spec)

    def test_linearity_without_bias(self):
        spec = ConvSpec((2, 3, 3), 2, 2, bias=False)
        rng = np.random.default_rng(2)
        w = rng.standard_normal(spec.weight_shape())
        x1 = rng.standard_normal((3, 5, 5, 2))
        x2 = rng.standard_normal((3, 5, 5, 2))
        a, b = 1.7, -0.3
        lhs, _ = conv3d_forward(a * x1 + b * x2, w, None, spec)
        y1, _ = conv3d_forward(x1, w, None, spec)
        y2, _ = conv3d_forward(x2, w, None, spec)
        np.testing.assert_allclose(lhs, a * y1 + b * y2, rtol=1e-6, atol=1e-9)

    def test_unit_dilation_matches_undilated_bitwise(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 3, 3, 2, 2))
        x = rng.standard_normal((3, 6, 6, 2))
        y1, _ = conv3d_forward(x, w, None, ConvSpec(
            (2, 3, 3), 2, 2, dilation=(1, 1, 1), bias=False))
        y2, _ = conv3d_forward(x, w, None, ConvSpec(
            (2, 3, 3), 2, 2, bias=False))
        np.testing.assert_array_equal(y1, y2)


class TestConvBackward:
    def test_scalar_case(self):
        x = np.array([[[[3.0]]]])
        w = np.full((1, 1, 1, 1, 1), 2.0)
        _, tape = conv3d_forward(x, w, np.array([1.0]), ConvSpec((1, 1, 1), 1, 1))
        gx, gw, gb = conv3d_backward(tape, np.ones((1, 1, 1, 1)))
        assert gx.item() == 2.0
        assert gw.item() == 3.0
        assert gb.item() == 1.0

    def test_zero_grad_out(self):
        spec = ConvSpec((2, 3, 3), 2, 3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 4, 4, 2))
        _, tape = conv3d_forward(x, rng.standard_normal(spec.weight_shape()),
                                 np.zeros(3), spec)
        gx, gw, gb = conv3d_backward(tape, np.zeros((3, 4, 4, 3)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_finite_difference_random_conv(self):
        # random 1x4x4x2 -> 3 channel same-padding conv, f64
        layer = Conv3D(ConvSpec((1, 3, 3), 2, 3))
        report = grad_check(layer, in_shape=(1, 4, 4, 2), tol=1e-6,
                            seed=11, max_param_coords=60)
        assert report.passed, report

    def test_grad_shape_mismatch(self):
        spec = ConvSpec((1, 1, 1), 1, 1)
        _, tape = conv3d_forward(np.zeros((1, 2, 2, 1)),
                                 np.zeros(spec.weight_shape()), np.zeros(1),
                                 spec)
        with pytest.raises(ValueError):
            conv3d_backward(tape, np.zeros((1, 3, 3, 1)))


class TestFactorize:
    def test_order_channels_and_bias(self):
        specs = factorize_conv(ConvSpec((3, 3, 3), 4, 8))
        assert [s.kernel for s in specs] == [(1, 1, 3), (1, 3, 1), (3, 1, 1)]
        assert [(s.in_channels, s.out_channels) for s in specs] == \
            [(4, 8), (8, 8), (8, 8)]
        assert [s.bias for s in specs] == [False, False, True]

    def test_dilation_carried_per_axis(self):
        specs = factorize_conv(ConvSpec((3, 3, 3), 1, 1, dilation=(2, 3, 4)))
        assert [s.dilation for s in specs] == [(1, 1, 4), (1, 3, 1), (2, 1, 1)]

    def test_weight_count_reduction(self):
        c = 6
        full = ConvSpec((5, 5, 5), c, c, bias=False)
        factored = factorize_conv(ConvSpec((5, 5, 5), c, c, bias=False))
        assert full.param_count == 125 * c * c
        assert sum(s.param_count for s in factored) == 15 * c * c

    def test_pointwise_rejected(self):
        with pytest.raises(ValueError):
            factorize_conv(ConvSpec((1, 1, 1), 1, 1))

    def test_non_cubic_rejected(self):
        with pytest.raises(ValueError):
            factorize_conv(ConvSpec((1, 3, 3), 1, 1))

    def test_separable_kernel_reproduced(self):
        # outer-product kernel: the factor chain reproduces the full conv
        rng = np.random.default_rng(5)
        a, b, c = (rng.standard_normal(3) for _ in range(3))
        full_w = np.einsum("i,j,k->ijk", a, b, c)[..., None, None]
        x = rng.standard_normal((5, 7, 7, 1))
        spec = ConvSpec((3, 3, 3), 1, 1, bias=False)
        y_full, _ = conv3d_forward(x, full_w, None, spec)
        h = x
        for factor_spec, taps in zip(factorize_conv(spec), (c, b, a)):
            w = taps.reshape(factor_spec.weight_shape())
            h, _ = conv3d_forward(h, w, None, factor_spec)
        np.testing.assert_allclose(h, y_full, rtol=1e-6, atol=1e-9)


class TestMaxPool:
    def test_single_window(self):
        x = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
        y = MaxPoolSpatial().forward(x)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 4.0

    def test_constant_input(self):
        x = np.full((2, 4, 4, 3), 2.5)
        y = MaxPoolSpatial().forward(x)
        assert y.shape == (2, 2, 2, 3)
        assert np.all(y == 2.5)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            MaxPoolSpatial().forward(np.zeros((1, 3, 4, 1)))

    def test_tie_routes_grad_to_first_row_major(self):
        pool = MaxPoolSpatial()
        x = np.ones((1, 2, 2, 1))
        pool.forward(x)
        gx = pool.backward(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(gx[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_finite_difference_non_tied(self):
        report = grad_check(MaxPoolSpatial(), in_shape=(2, 6, 6, 2), seed=21)
        assert report.passed, report


class TestUpsample:
    def test_replication(self):
        y = UpsampleNearestSpatial().forward(np.full((1, 1, 1, 1), 5.0))
        assert y.shape == (1, 2, 2, 1)
        assert np.all(y == 5.0)

    def test_pool_inverts_upsample(self):
        x = np.random.default_rng(6).random((2, 3, 3, 2))
        up = UpsampleNearestSpatial().forward(x)
        np.testing.assert_array_equal(MaxPoolSpatial().forward(up), x)

    def test_backward_sums_window(self):
        up = UpsampleNearestSpatial()
        up.forward(np.zeros((1, 2, 2, 1)))
        gx = up.backward(np.ones((1, 4, 4, 1)))
        assert np.all(gx == 4.0)


class TestActivation:
    def test_relu(self):
        y = Activation("relu").forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert Activation("sigmoid").forward(np.zeros(1))[0] == 0.5

    def test_sigmoid_derivative_at_zero(self):
        act = Activation("sigmoid")
        act.forward(np.zeros(1))
        assert act.backward(np.ones(1))[0] == pytest.approx(0.25, abs=1e-12)
        report = grad_check(Activation("sigmoid"), in_shape=(1, 2, 2, 1),
                            seed=3)
        assert report.passed

    def test_linear_identity(self):
        x = np.random.default_rng(7).standard_normal(5)
        act = Activation("linear")
        np.testing.assert_array_equal(act.forward(x), x)
        np.testing.assert_array_equal(act.backward(x), x)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Activation("tanh")


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.random.default_rng(8).random((2, 3, 3, 1))
        layer = Dropout(0.0)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(layer.forward(x, train=True, rng=rng), x)
        np.testing.assert_array_equal(layer.forward(x, train=False), x)

    def test_inference_identity(self):
        x = np.random.default_rng(9).random((2, 3, 3, 1))
        np.testing.assert_array_equal(Dropout(0.5).forward(x, train=False), x)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            Dropout(1.0)
        with pytest.raises(ValueError):
            Dropout(-0.1)

    def test_kept_fraction_and_mean(self):
        x = np.ones(100_000)
        layer = Dropout(0.5)
        y = layer.forward(x, train=True, rng=np.random.default_rng(42))
        kept = np.count_nonzero(y) / x.size
        assert abs(kept - 0.5) < 0.01
        assert abs(y.mean() - x.mean()) < 0.02 * x.mean()

    def test_mask_reproducible_from_seed(self):
        x = np.ones(1000)
        a = Dropout(0.3).forward(x, train=True, rng=np.random.default_rng(5))
        b = Dropout(0.3).forward(x, train=True, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_train_mode_requires_rng(self):
        with pytest.raises(ValueError):
            Dropout(0.5).forward(np.ones(4), train=True)

    def test_backward_uses_mask(self):
        layer = Dropout(0.5)
        x = np.ones(1000)
        y = layer.forward(x, train=True, rng=np.random.default_rng(6))
        gx = layer.backward(np.ones(1000))
        np.testing.assert_array_equal(gx, y)


class TestImageLevelPool:
    def test_constant_fixed_point(self):
        x = np.full((2, 4, 4, 3), 1.25)
        np.testing.assert_allclose(ImageLevelPool().forward(x), x)

    def test_mean_broadcast(self):
        x = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
        y = ImageLevelPool().forward(x)
        assert y.shape == x.shape
        assert np.all(y == 2.5)

    def test_finite_difference(self):
        report = grad_check(ImageLevelPool(), in_shape=(2, 4, 4, 2), seed=9)
        assert report.passed, report


class TestPrimitiveGradChecks:
    """Every primitive layer passes finite differences at < 1e-4 in f64."""

    @pytest.mark.parametrize("name,layer,shape", [
        ("conv_same", Conv3D(ConvSpec((2, 3, 3), 2, 3)), (3, 6, 6, 2)),
        ("conv_valid", Conv3D(ConvSpec((2, 3, 3), 2, 2, padding="valid")),
         (4, 8, 8, 2)),
        ("conv_dilated", Conv3D(ConvSpec((1, 3, 3), 2, 2, dilation=(1, 2, 2))),
         (2, 8, 8, 2)),
        ("factor_chain", conv_unit((2, 3, 3), 2, 2, factorized=True),
         (3, 6, 6, 2)),
        ("maxpool", MaxPoolSpatial(), (2, 6, 6, 3)),
        ("upsample", UpsampleNearestSpatial(), (2, 4, 4, 3)),
        ("relu", Activation("relu"), (2, 5, 5, 2)),
        ("sigmoid", Activation("sigmoid"), (2, 5, 5, 2)),
        ("image_pool", ImageLevelPool(), (2, 6, 6, 3)),
    ])
    def test_layer(self, name, layer, shape):
        report = grad_check(layer, in_shape=shape, tol=1e-4, seed=17)
        assert report.passed, (name, report)

    def test_linear_toy_layer_near_exact(self):
        # pointwise conv is linear; with a larger step there is no
        # truncation error and only rounding noise remains
        layer = Conv3D(ConvSpec((1, 1, 1), 2, 2, bias=False))
        report = grad_check(layer, in_shape=(1, 3, 3, 2), tol=1e-10,
                            step=1e-3, seed=19)
        assert report.passed, report
