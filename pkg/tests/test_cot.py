"""Structural and gradient checks for the contextual-transformer block."""

import numpy as np
import pytest

from cotunet.cot import CoTParams, cot_backward, cot_forward, cot_init
from cotunet.gradcheck import grad_check
from cotunet.ops import ShapeError, concat_channels, conv3d


def zeroed(p: CoTParams, *names) -> CoTParams:
    out = p.map(np.copy)
    for name in names:
        getattr(out, name)[...] = 0.0
    return out


def identity_key(p: CoTParams) -> CoTParams:
    """Key conv passes the input through; all other weights zero."""
    out = p.map(np.zeros_like)
    c, k = p.channels, p.kernel
    for ch in range(c):
        out.w_key[ch, ch, k // 2, k // 2, k // 2] = 1.0
    return out


class TestInit:
    def test_deterministic(self):
        a, b = cot_init(4, 3, seed=9), cot_init(4, 3, seed=9)
        for name in ("w_key", "w_value", "w_theta", "w_delta"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_theta_sees_concatenated_channels(self):
        p = cot_init(8, 3, seed=0)
        assert p.w_theta.shape[1] == 16
        assert p.w_delta.shape[0] == 8

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            cot_init(4, k=2, seed=0)

    def test_he_variance(self):
        p = cot_init(16, 5, seed=3)
        fan_in = 16 * 125
        var = p.w_key.var()
        assert abs(var - 2.0 / fan_in) < 0.2 * (2.0 / fan_in)

    def test_biases_zero(self):
        p = cot_init(4, 3, seed=1)
        for name in ("b_key", "b_value", "b_theta", "b_delta"):
            assert not getattr(p, name).any()


class TestForward:
    def test_all_zero_weights(self, rng):
        x = rng.standard_normal((1, 4, 6, 6, 6)).astype(np.float32)
        p = cot_init(4, 3, seed=1).map(np.zeros_like)
        y, trace = cot_forward(x, p)
        assert not y.any()
        assert not trace.static_ctx.any() and not trace.attn.any()

    def test_static_path_identity(self, rng):
        x = rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32)
        p = identity_key(cot_init(3, 3, seed=2))
        y, _ = cot_forward(x, p)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_shape_preserved(self, rng):
        x = rng.standard_normal((2, 5, 4, 6, 8)).astype(np.float32)
        y, _ = cot_forward(x, cot_init(5, 3, seed=0))
        assert y.shape == x.shape

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            cot_forward(rng.standard_normal((1, 3, 4, 4, 4)), cot_init(4, 3, seed=0))

    def test_matches_step_by_step_reference(self, rng):
        """Compose the block out of individually verified kernels."""
        x = rng.standard_normal((1, 4, 6, 6, 6)).astype(np.float32)
        p = cot_init(4, 3, seed=7)
        y, _ = cot_forward(x, p)

        static = conv3d(x, p.w_key, p.b_key, padding=1)
        values = conv3d(x, p.w_value, p.b_value)
        mid = conv3d(concat_channels(static, x), p.w_theta, p.b_theta)
        attn = conv3d(mid, p.w_delta, p.b_delta)
        expected = static + values * attn
        np.testing.assert_array_equal(y, expected)

    def test_zero_dynamic_path(self, rng):
        x = rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32)
        base = cot_init(4, 3, seed=5)
        for name in ("w_theta", "w_delta"):
            y, trace = cot_forward(x, zeroed(base, name))
            np.testing.assert_array_equal(y, trace.static_ctx)

    def test_decomposition_identity(self, rng):
        # float-safe form of y - static == values * attn
        x = rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32)
        y, trace = cot_forward(x, cot_init(4, 3, seed=6))
        np.testing.assert_array_equal(y, trace.static_ctx + trace.dynamic_ctx)
        np.testing.assert_array_equal(trace.dynamic_ctx, trace.values * trace.attn)


class TestBackward:
    def test_zero_cotangent(self, rng):
        x = rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32)
        p = cot_init(3, 3, seed=4)
        _, trace = cot_forward(x, p)
        dx, grads = cot_backward(np.zeros_like(x), trace, p)
        assert not dx.any()
        assert not any(getattr(grads, f).any() for f in
                       ("w_key", "b_key", "w_value", "b_value",
                        "w_theta", "b_theta", "w_delta", "b_delta"))

    def test_static_identity_passes_dy(self, rng):
        x = rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32)
        p = identity_key(cot_init(3, 3, seed=4))
        _, trace = cot_forward(x, p)
        dy = rng.standard_normal(x.shape).astype(np.float32)
        dx, _ = cot_backward(dy, trace, p)
        np.testing.assert_allclose(dx, dy, atol=1e-6)

    def test_shape_mismatch_rejected(self, rng):
        x = rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32)
        p = cot_init(3, 3, seed=4)
        _, trace = cot_forward(x, p)
        with pytest.raises(ShapeError):
            cot_backward(np.zeros((1, 3, 2, 4, 4), dtype=np.float32), trace, p)

    def test_finite_differences_all_params(self, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        p = cot_init(2, 3, seed=11).map(lambda a: a.astype(np.float64))
        p.b_key[:] = rng.standard_normal(2) * 0.1
        p.b_theta[:] = rng.standard_normal(2) * 0.1
        dy = rng.standard_normal(x.shape)
        names = ["w_key", "b_key", "w_value", "b_value",
                 "w_theta", "b_theta", "w_delta", "b_delta"]

        def f(x_, *param_arrays):
            q = CoTParams(**dict(zip(names, param_arrays)))
            y, trace = cot_forward(x_, q)
            dx, grads = cot_backward(dy, trace, q)
            return float((dy * y).sum()), [dx] + [getattr(grads, n) for n in names]

        inputs = [x] + [getattr(p, n) for n in names]
        report = grad_check(f, inputs, tolerance=1e-3, step=1e-3)
        assert report.passed, report.max_rel_error
