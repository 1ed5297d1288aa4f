"""Verify analytic gradients against finite differences.

Every layer in this package ships a hand-derived backward pass. The
checker perturbs each input scalar by +-h and compares the central
difference against the analytic gradient. A corrupted gradient is caught
immediately, which is the whole point of keeping the checker around.
"""

import numpy as np

from cotunet.gradcheck import grad_check
from cotunet.ops import conv3d, conv3d_backward

rng = np.random.default_rng(0)

# a small convolution: gradients w.r.t. input, weights, and bias
x = rng.standard_normal((1, 2, 4, 4, 4))
w = rng.standard_normal((3, 2, 3, 3, 3))
b = rng.standard_normal(3)
dy = rng.standard_normal((1, 3, 4, 4, 4))


def loss_and_grads(x_, w_, b_):
    y = conv3d(x_, w_, b_, padding=1)
    dx, dw, db = conv3d_backward(x_, w_, dy, padding=1)
    return float((dy * y).sum()), [dx, dw, db]


report = grad_check(loss_and_grads, [x, w, b], tolerance=1e-3, step=1e-3)
print(f"conv3d gradients: passed={report.passed} "
      f"max relative error={report.max_rel_error:.2e}")


# now sabotage one weight gradient and watch the checker object
def corrupted(x_, w_, b_):
    value, (dx, dw, db) = loss_and_grads(x_, w_, b_)
    dw = dw.copy()
    dw.reshape(-1)[17] += 0.25
    return value, [dx, dw, db]


report = grad_check(corrupted, [x, w, b], tolerance=1e-3, step=1e-3)
print(f"corrupted gradient: passed={report.passed} "
      f"worst flat index={report.worst_index} (expected 128 + 17 = 145)")
