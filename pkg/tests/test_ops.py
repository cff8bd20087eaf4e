import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segcorrect import gradcheck, ops
from segcorrect.errors import NumericError, ShapeError


def conv_w(kernel, bias=None):
    kernel = np.asarray(kernel, dtype=np.float32)
    if bias is None:
        bias = np.zeros(kernel.shape[0], dtype=np.float32)
    return ops.ConvWeights(kernel, np.asarray(bias, dtype=np.float32))


def naive_conv2d(x, kernel, bias):
    """Sliding-window reference, zero padded, O(n*c^2*hw*9)."""
    n, c, h, w = x.shape
    co = kernel.shape[0]
    out = np.zeros((n, co, h, w), dtype=np.float64)
    for ni in range(n):
        for oc in range(co):
            for y in range(h):
                for xx in range(w):
                    acc = float(bias[oc])
                    for ic in range(c):
                        for i in range(3):
                            for j in range(3):
                                sy, sx = y + i - 1, xx + j - 1
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += kernel[oc, ic, i, j] * x[ni, ic, sy, sx]
                    out[ni, oc, y, xx] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        assert np.array_equal(ops.conv2d(x, conv_w(k)), x)

    def test_zero_kernel(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        y = ops.conv2d(x, conv_w(np.zeros((2, 3, 3, 3))))
        assert np.array_equal(y, np.zeros((2, 2, 4, 4)))

    def test_ones_kernel_counts_neighbors(self):
        y = ops.conv2d(np.ones((1, 1, 3, 3), np.float32), conv_w(np.ones((1, 1, 3, 3))))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        assert np.array_equal(y[0, 0], expected)

    @pytest.mark.parametrize("ci,co,h,w", [(1, 1, 4, 5), (3, 6, 5, 4), (6, 2, 3, 7)])
    def test_matches_naive_oracle(self, rng, ci, co, h, w):
        x = rng.standard_normal((2, ci, h, w))
        k = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        got = ops.conv2d(x, ops.ConvWeights(k, b))
        np.testing.assert_allclose(got, naive_conv2d(x, k, b), rtol=1e-10, atol=1e-10)

    def test_channel_mismatch(self, rng):
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        with pytest.raises(ShapeError):
            ops.conv2d(x, conv_w(np.zeros((1, 3, 3, 3))))

    def test_non_finite_input(self):
        x = np.ones((1, 1, 4, 4), np.float32)
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            ops.conv2d(x, conv_w(np.zeros((1, 1, 3, 3))))

    @settings(max_examples=20, deadline=None)
    @given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linearity_without_bias(self, alpha, beta, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((1, 2, 4, 4)).astype(np.float32)
        b = r.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = conv_w(r.standard_normal((3, 2, 3, 3)).astype(np.float32))
        lhs = ops.conv2d(alpha * a + beta * b, w)
        rhs = alpha * ops.conv2d(a, w) + beta * ops.conv2d(b, w)
        scale = max(np.abs(rhs).max(), 1.0)
        assert np.abs(lhs - rhs).max() / scale < 1e-5

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w = conv_w(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
        assert np.array_equal(ops.conv2d(x, w), ops.conv2d(x, w))

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def op(x, k, b):
            w = ops.ConvWeights(k, b)
            return ops.conv2d(x, w), lambda gy: ops.conv2d_backward(gy, x, w)

        assert gradcheck.grad_check(op, [x, k, b], seed=3) < 1e-4

    def test_gradients_both_channel_directions(self, rng):
        # expanding and compressing convs take different internal paths
        for ci, co in ((2, 7), (7, 2)):
            x = rng.standard_normal((1, ci, 4, 6))
            k = rng.standard_normal((co, ci, 3, 3))
            b = rng.standard_normal(co)

            def op(x, k, b):
                w = ops.ConvWeights(k, b)
                return ops.conv2d(x, w), lambda gy: ops.conv2d_backward(gy, x, w)

            assert gradcheck.grad_check(op, [x, k, b], seed=4) < 1e-4


class TestMaxPool:
    def test_constant(self):
        y, _ = ops.maxpool2x2(np.full((1, 1, 4, 4), 2.5, np.float32))
        assert np.array_equal(y, np.full((1, 1, 2, 2), 2.5))

    def test_single_block_and_backward(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y, cache = ops.maxpool2x2(x)
        assert y.item() == 4.0
        g = ops.maxpool2x2_backward(np.ones((1, 1, 1, 1), np.float32), cache)
        assert np.array_equal(g[0, 0], [[0, 0], [0, 1]])

    def test_tie_routes_to_first_in_scan_order(self):
        x = np.full((1, 1, 2, 2), 5.0, np.float32)
        y, cache = ops.maxpool2x2(x)
        assert y.item() == 5.0
        g = ops.maxpool2x2_backward(np.ones((1, 1, 1, 1), np.float32), cache)
        assert np.array_equal(g[0, 0], [[1, 0], [0, 0]])

    def test_odd_sizes_pad_with_neg_inf(self, rng):
        x = rng.standard_normal((1, 1, 5, 7)).astype(np.float32)
        y, cache = ops.maxpool2x2(x)
        assert y.shape == (1, 1, 3, 4)
        assert np.isfinite(y).all()
        g = ops.maxpool2x2_backward(np.ones_like(y), cache)
        assert g.shape == x.shape

    def test_empty_spatial_rejected(self):
        with pytest.raises(ShapeError):
            ops.maxpool2x2(np.zeros((1, 1, 0, 4), np.float32))

    def test_exhaustive_2x2_blocks(self):
        # every permutation of a single block routes the gradient correctly
        import itertools

        for perm in itertools.permutations([1.0, 2.0, 3.0, 4.0]):
            x = np.array(perm, dtype=np.float32).reshape(1, 1, 2, 2)
            y, cache = ops.maxpool2x2(x)
            assert y.item() == 4.0
            g = ops.maxpool2x2_backward(np.full((1, 1, 1, 1), 7.0, np.float32), cache)
            assert g.ravel()[np.argmax(x.ravel())] == 7.0
            assert g.sum() == 7.0


class TestUpsample:
    def test_constant_preserved(self):
        y = ops.upsample_bilinear_2x(np.full((1, 2, 3, 3), 0.7, np.float32))
        np.testing.assert_allclose(y, 0.7, atol=1e-7)

    def test_two_pixel_row(self):
        y = ops.upsample_bilinear_2x(np.array([[[[0.0, 1.0]]]], dtype=np.float32))
        np.testing.assert_allclose(y[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)

    def test_monotone_on_ramp(self):
        ramp = np.arange(8, dtype=np.float32).reshape(1, 1, 1, 8)
        y = ops.upsample_bilinear_2x(ramp)[0, 0, 0]
        assert (np.diff(y) >= 0).all()

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 2, 3, 5))

        def op(x):
            y = ops.upsample_bilinear_2x(x)
            return y, lambda gy: (ops.upsample_bilinear_2x_backward(gy, x.shape[2:]),)

        assert gradcheck.grad_check(op, [x], seed=5) < 1e-6


class TestActivations:
    def test_relu_values(self):
        x = np.array([[[[-1.0, 2.0]]]], dtype=np.float32)
        assert np.array_equal(ops.activation(x, "relu").ravel(), [0.0, 2.0])

    def test_symmetry_points(self):
        zero = np.zeros((1, 1, 1, 1), np.float32)
        assert ops.activation(zero, "tanh").item() == 0.0
        assert ops.activation(zero, "sigmoid").item() == 0.5

    def test_sigmoid_closed_form(self):
        x = np.full((1, 1, 1, 1), np.log(3.0))
        assert abs(ops.activation(x, "sigmoid").item() - 0.75) < 1e-12

    def test_unknown_mode(self):
        from segcorrect.errors import ConfigError

        with pytest.raises(ConfigError):
            ops.activation(np.zeros((1, 1, 1, 1)), "gelu")

    def test_relu_gradient_away_from_kink(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        x = np.where(np.abs(x) < 0.15, x + 0.5, x)

        def op(x):
            y = ops.activation(x, "relu")
            return y, lambda gy: (ops.activation_backward(gy, y, "relu"),)

        assert gradcheck.grad_check(op, [x], seed=6) < 1e-6

    @pytest.mark.parametrize("mode", ["tanh", "sigmoid"])
    def test_smooth_gradients(self, rng, mode):
        x = rng.standard_normal((1, 2, 3, 3))

        def op(x):
            y = ops.activation(x, mode)
            return y, lambda gy: (ops.activation_backward(gy, y, mode),)

        assert gradcheck.grad_check(op, [x], seed=7) < 1e-6


class TestSoftmax:
    def test_uniform_logits(self):
        p = ops.softmax_channels(np.zeros((1, 4, 2, 2), np.float32))
        np.testing.assert_allclose(p, 0.25, atol=1e-7)

    def test_closed_form_two_class(self):
        z = np.zeros((1, 2, 1, 1), np.float32)
        z[0, 1] = np.log(3.0)
        p = ops.softmax_channels(z)
        np.testing.assert_allclose(p.ravel(), [0.25, 0.75], atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(k=st.floats(-50, 50), seed=st.integers(0, 2**16))
    def test_shift_invariance(self, k, seed):
        z = np.random.default_rng(seed).standard_normal((1, 3, 2, 2)).astype(np.float32)
        d = np.abs(ops.softmax_channels(z + np.float32(k)) - ops.softmax_channels(z))
        assert d.max() < 1e-6

    def test_output_is_distribution(self, rng):
        z = (rng.standard_normal((2, 5, 4, 4)) * 10).astype(np.float32)
        p = ops.softmax_channels(z)
        assert p.min() >= 0.0 and p.max() <= 1.0
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6

    def test_needs_two_channels(self):
        with pytest.raises(ShapeError):
            ops.softmax_channels(np.zeros((1, 1, 2, 2), np.float32))

    def test_gradients(self, rng):
        z = rng.standard_normal((2, 4, 3, 3))

        def op(z):
            p = ops.softmax_channels(z)
            return p, lambda gy: (ops.softmax_channels_backward(gy, p),)

        assert gradcheck.grad_check(op, [z], seed=8) < 1e-4


class TestConcat:
    def test_channel_counts(self, rng):
        a = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        b = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
        assert ops.concat_channels(a, b).shape == (2, 8, 4, 4)

    def test_round_trip_bit_identical(self, rng):
        a = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        b = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
        y = ops.concat_channels(a, b)
        a2, b2 = ops.split_channels(y, 3)
        assert np.array_equal(a2, a) and np.array_equal(b2, b)

    def test_spatial_mismatch(self, rng):
        a = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        b = rng.standard_normal((1, 1, 4, 5)).astype(np.float32)
        with pytest.raises(ShapeError):
            ops.concat_channels(a, b)
