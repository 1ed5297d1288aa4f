import numpy as np
import pytest

from cotunet.gradcheck import grad_check
from cotunet.ops import conv3d, conv3d_backward


def test_linear_map_is_exact(rng):
    a = rng.standard_normal((40,))

    def f(x):
        return float(a @ x), [a.copy()]

    report = grad_check(f, [rng.standard_normal(40)], tolerance=1e-7)
    assert report.passed
    assert report.max_rel_error < 1e-7


def test_conv3d_instance_passes(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    dy = rng.standard_normal((1, 2, 4, 4, 4))

    def f(x_, w_, b_):
        y = conv3d(x_, w_, b_, padding=1)
        dx, dw, db = conv3d_backward(x_, w_, dy, padding=1)
        return float((dy * y).sum()), [dx, dw, db]

    assert grad_check(f, [x, w, b], tolerance=1e-3).passed


def test_corrupted_gradient_detected(rng):
    a = rng.standard_normal((10,))

    def f(x):
        g = a.copy()
        g[3] += 0.5  # deliberate corruption
        return float(a @ x), [g]

    report = grad_check(f, [rng.standard_normal(10)], tolerance=1e-3)
    assert not report.passed
    assert report.worst_index == 3


def test_size_guard(rng):
    def f(x):
        return float(x.sum()), [np.ones_like(x)]

    with pytest.raises(ValueError, match="10000"):
        grad_check(f, [np.zeros(10_001)])
