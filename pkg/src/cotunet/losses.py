"""Dice and focal losses over voxel probabilities, with analytic gradients.

Both losses take a probability array ``p`` and a binary label array ``l``
of the same shape (any rank) and return ``(value, gradient_wrt_p)``. The
training objective is their sum. Scalar accumulations run in float64; the
returned gradient keeps the dtype of ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DICE_SMOOTH = 1e-6
FOCAL_CLAMP = 1e-7


@dataclass
class LossValue:
    total: float
    dice: float
    focal: float
    gradient: np.ndarray


def _check_pair(p: np.ndarray, l: np.ndarray):
    p = np.asarray(p)
    l = np.asarray(l)
    if p.shape != l.shape:
        raise ValueError(f"prediction shape {p.shape} != label shape {l.shape}")
    return p, l


def dice_loss(p: np.ndarray, l: np.ndarray, smooth: float = DICE_SMOOTH):
    """1 - (2*sum(p*l) + s) / (sum(p+l) + s).

    The smoothing constant defines the empty-empty case as loss 0.
    """
    p, l = _check_pair(p, l)
    lf = l.astype(np.float64)
    pf = p.astype(np.float64)
    inter = float((pf * lf).sum())
    den = float(pf.sum() + lf.sum()) + smooth
    num = 2.0 * inter + smooth
    value = 1.0 - num / den
    # d/dp_i = num/den^2 - 2*l_i/den
    grad = (num / den**2 - 2.0 * lf / den).astype(p.dtype)
    return value, grad


def focal_loss(p: np.ndarray, l: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               clamp: float = FOCAL_CLAMP):
    """Mean over voxels of -alpha_t * (1 - p_t)^gamma * log(p_t).

    p_t is the probability assigned to the true class and alpha_t is alpha
    for foreground, 1 - alpha for background. Probabilities are clamped to
    [clamp, 1 - clamp]; the gradient is zero where the clamp is active.
    """
    p, l = _check_pair(p, l)
    lf = l.astype(np.float64)
    pc = np.clip(p.astype(np.float64), clamp, 1.0 - clamp)
    pt = np.where(lf > 0.5, pc, 1.0 - pc)
    at = np.where(lf > 0.5, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    per_voxel = -at * one_m**gamma * log_pt
    value = float(per_voxel.mean())

    # d/dp_t of -(1-p_t)^g log(p_t), then chain through p_t = p or 1-p.
    if gamma == 0.0:
        d_pt = -1.0 / pt
    else:
        d_pt = gamma * one_m ** (gamma - 1.0) * log_pt - one_m**gamma / pt
    sign = np.where(lf > 0.5, 1.0, -1.0)
    grad = at * d_pt * sign / p.size
    grad = np.where((p > clamp) & (p < 1.0 - clamp), grad, 0.0)
    return value, grad.astype(p.dtype)


def total_loss(p: np.ndarray, l: np.ndarray, smooth: float = DICE_SMOOTH,
               alpha: float = 0.25, gamma: float = 2.0) -> LossValue:
    """Dice + focal, with the summed gradient."""
    d_val, d_grad = dice_loss(p, l, smooth)
    f_val, f_grad = focal_loss(p, l, alpha, gamma)
    return LossValue(total=d_val + f_val, dice=d_val, focal=f_val,
                     gradient=d_grad + f_grad)
