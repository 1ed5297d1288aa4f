"""Dice + focal loss behavior on class-imbalanced volumes.

Tubular foregrounds occupy a tiny fraction of a chest volume, so the
training objective pairs an overlap term (dice) with a hard-example term
(focal). The focal exponent gamma controls how strongly easy voxels are
down-weighted.
"""

import numpy as np

from cotunet.losses import dice_loss, focal_loss, total_loss

rng = np.random.default_rng(3)

# a sparse label: ~2% foreground, like a thin tube in a patch
label = (rng.random((24, 24, 24)) < 0.02).astype(np.float64)
print(f"foreground fraction: {label.mean():.3f}")

# a mediocre prediction: right on average, noisy everywhere
pred = np.clip(0.6 * label + 0.05 + 0.1 * rng.random(label.shape), 0.01, 0.99)

lv = total_loss(pred, label)
print(f"total {lv.total:.4f} = dice {lv.dice:.4f} + focal {lv.focal:.4f}")

# the single-voxel reference value: -0.25 * (1-0.5)^2 * ln(0.5)
v, _ = focal_loss(np.array([[[0.5]]]), np.array([[[1.0]]]))
print(f"focal(p=0.5, l=1) = {v:.7f}  (expected 0.0433217)")

# gamma sweep: higher gamma focuses the loss on the misclassified voxels
for gamma in (0.0, 1.0, 2.0, 5.0):
    v, _ = focal_loss(pred, label, alpha=0.25, gamma=gamma)
    print(f"  gamma={gamma}: focal={v:.5f}")

# perfect prediction: dice vanishes (up to smoothing)
v, _ = dice_loss(label, label)
print(f"dice at perfect overlap: {v:.2e}")
