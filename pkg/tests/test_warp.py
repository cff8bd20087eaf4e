import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segcorrect import gradcheck, warp
from segcorrect.errors import ConfigError, ContractError, ShapeError
from tests.conftest import random_probmap


def integer_shift_oracle(s, dx, dy):
    """Index-remapping reference for constant integer displacements."""
    n, c, h, w = s.shape
    out = np.empty_like(s)
    for y in range(h):
        for x in range(w):
            sx = min(max(x - dx, 0), w - 1)
            sy = min(max(y - dy, 0), h - 1)
            out[:, :, y, x] = s[:, :, sy, sx]
    return out


def bounded_field(rng, n, h, w, max_disp):
    """Displacements whose sampled coordinates stay interior with fractional
    parts in [0.1, 0.9], keeping gradient checks away from the kinks."""
    d = (rng.uniform(0.1, 0.9, (n, 2, h, w)) + rng.integers(-2, 3, (n, 2, h, w))).astype(
        np.float64
    )
    yy, xx = np.mgrid[0:h, 0:w]
    d[:, 0] = np.clip(d[:, 0], xx - (w - 1.9), xx - 0.1)
    d[:, 1] = np.clip(d[:, 1], yy - (h - 1.9), yy - 0.1)
    return np.clip(d, -max_disp, max_disp)


class TestDisplacementFromFlow:
    def test_zero_flow(self):
        raw = np.zeros((1, 2, 4, 4), np.float32)
        assert np.array_equal(warp.displacement_from_flow(raw, 16.0), raw)

    def test_full_scale(self):
        raw = np.ones((1, 2, 2, 2), np.float32)
        d = warp.displacement_from_flow(raw, 16.0)
        assert np.array_equal(d, np.full_like(raw, 16.0))

    def test_zero_scale(self, rng):
        raw = rng.uniform(-1, 1, (1, 2, 3, 3)).astype(np.float32)
        assert np.array_equal(warp.displacement_from_flow(raw, 0.0), np.zeros_like(raw))

    def test_out_of_range_rejected(self):
        raw = np.full((1, 2, 2, 2), 1.5, np.float32)
        with pytest.raises(ContractError):
            warp.displacement_from_flow(raw, 16.0)

    def test_negative_scale_rejected(self):
        with pytest.raises(ConfigError):
            warp.displacement_from_flow(np.zeros((1, 2, 2, 2), np.float32), -1.0)

    def test_backward_scales(self, rng):
        g = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(
            warp.displacement_from_flow_backward(g, 16.0), g * 16.0, rtol=1e-6
        )


class TestWarpForward:
    def test_identity_at_zero_displacement(self, rng):
        s = random_probmap(rng, 2, 4, 6, 6)
        out = warp.warp_bilinear(s, np.zeros((2, 2, 6, 6), np.float32))
        assert np.abs(out - s).max() < 1e-6

    def test_shift_right_with_border_clamp(self):
        s = np.array([[[[1.0, 2.0, 3.0]]]], dtype=np.float32)
        d = np.zeros((1, 2, 1, 3), np.float32)
        d[:, 0] = 1.0
        out = warp.warp_bilinear(s, d)
        assert np.array_equal(out.ravel(), [1.0, 1.0, 2.0])

    def test_half_pixel_blend(self):
        s = np.array([[[[0.0, 1.0]]]], dtype=np.float32)
        d = np.zeros((1, 2, 1, 2), np.float32)
        d[0, 0, 0, 1] = 0.5
        out = warp.warp_bilinear(s, d)
        assert abs(out[0, 0, 0, 1] - 0.5) < 1e-7

    def test_shape_mismatch(self, rng):
        s = random_probmap(rng, 1, 3, 4, 4)
        with pytest.raises(ShapeError):
            warp.warp_bilinear(s, np.zeros((1, 2, 4, 5), np.float32))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_conservation_and_range(self, seed):
        r = np.random.default_rng(seed)
        s = random_probmap(r, 1, 3, 8, 8)
        d = r.uniform(-10, 10, (1, 2, 8, 8)).astype(np.float32)
        out = warp.warp_bilinear(s, d)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-5
        assert out.min() >= s.min() - 1e-6 and out.max() <= s.max() + 1e-6

    @settings(max_examples=15, deadline=None)
    @given(
        alpha=st.floats(0.0, 1.0),
        seed=st.integers(0, 2**16),
    )
    def test_linearity_in_map(self, alpha, seed):
        r = np.random.default_rng(seed)
        s1 = random_probmap(r, 1, 2, 5, 5)
        s2 = random_probmap(r, 1, 2, 5, 5)
        d = r.uniform(-3, 3, (1, 2, 5, 5)).astype(np.float32)
        beta = 1.0 - alpha
        lhs = warp.warp_bilinear(alpha * s1 + beta * s2, d)
        rhs = alpha * warp.warp_bilinear(s1, d) + beta * warp.warp_bilinear(s2, d)
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_integer_shift_oracle_exact(self, rng):
        s = random_probmap(rng, 1, 3, 8, 8)
        for dx in range(-4, 5):
            for dy in range(-4, 5):
                d = np.zeros((1, 2, 8, 8), np.float32)
                d[:, 0], d[:, 1] = dx, dy
                got = warp.warp_bilinear(s, d)
                assert np.array_equal(got, integer_shift_oracle(s, dx, dy)), (dx, dy)


class TestWarpBackward:
    def test_gradients_wrt_both_inputs(self, rng):
        s = random_probmap(rng, 1, 3, 6, 6, dtype=np.float64)
        d = bounded_field(rng, 1, 6, 6, 8.0)

        def op(s, d):
            out = warp.warp_bilinear(s, d)
            return out, lambda gy: warp.warp_bilinear_backward(gy, s, d)

        assert gradcheck.grad_check(op, [s, d], seed=9) < 1e-4

    def test_map_gradient_is_transpose_scatter(self, rng):
        s = random_probmap(rng, 1, 2, 4, 4)
        d = np.zeros((1, 2, 4, 4), np.float32)
        gy = np.ones((1, 2, 4, 4), np.float32)
        gs, gd = warp.warp_bilinear_backward(gy, s, d)
        # identity warp: every pixel's weight lands on itself
        assert np.abs(gs - 1.0).max() < 1e-6

    def test_clamped_samples_get_zero_displacement_gradient(self, rng):
        s = random_probmap(rng, 1, 2, 4, 4)
        d = np.full((1, 2, 4, 4), 100.0, np.float32)  # everything clamps
        gy = np.ones((1, 2, 4, 4), np.float32)
        _, gd = warp.warp_bilinear_backward(gy, s, d)
        assert np.abs(gd).max() == 0.0
