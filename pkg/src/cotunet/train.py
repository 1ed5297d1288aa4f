"""Desk-scale training: Adam, flip/jitter augmentation, early stopping.

Training is a single deterministic sequence per seed: parameter init,
shuffling, patch sampling, and augmentation all draw from one seeded
generator. The monitored quantity for early stopping is the validation
total loss (ties broken by validation Dice score); the returned parameters
are the best-epoch snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import total_loss
from .unet import UNetConfig, predict_patch, unet_backward, unet_forward, unet_init

AUX_WEIGHT_BASE = 0.5  # deep-supervision head at scale s carries weight 0.5**s


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.003
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 5
    flip_prob: float = 0.5          # per spatial axis, image and label together
    jitter_amplitude: float = 0.05  # uniform additive noise on normalized intensities
    patch_size: tuple[int, int, int] = (32, 32, 32)
    foreground_bias: float = 0.5    # chance a sampled patch is centered on foreground
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, in place; returns (params, state).

    Each parameter tensor is updated independently and elementwise, so the
    result does not depend on iteration order.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Patches and augmentation
# ---------------------------------------------------------------------------

def center_crop(data: np.ndarray, patch: tuple[int, int, int]) -> np.ndarray:
    """Deterministic central patch, edge-padded when the volume is smaller."""
    pads = [(max(0, (p - s + 1) // 2), max(0, p - s - (p - s + 1) // 2))
            for s, p in zip(data.shape, patch)]
    if any(a or b for a, b in pads):
        data = np.pad(data, pads, mode="edge")
    starts = [(s - p) // 2 for s, p in zip(data.shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch))
    return data[sl]


def sample_patch(image: np.ndarray, label: np.ndarray, patch, rng: np.random.Generator,
                 foreground_bias: float = 0.5):
    """Random patch, biased to center on a foreground voxel when one exists."""
    dims = image.shape
    pads = [(0, max(0, p - s)) for s, p in zip(dims, patch)]
    if any(b for _, b in pads):
        image = np.pad(image, pads, mode="edge")
        label = np.pad(label, pads, mode="constant")
        dims = image.shape
    fg = np.argwhere(label > 0)
    if fg.size and rng.random() < foreground_bias:
        center = fg[rng.integers(len(fg))]
        starts = [int(np.clip(c - p // 2, 0, s - p))
                  for c, p, s in zip(center, patch, dims)]
    else:
        starts = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch, dims)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch))
    return image[sl], label[sl]


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            flip_prob: float, jitter_amplitude: float):
    """Seeded per-axis flips applied to both arrays, plus intensity jitter."""
    for axis in range(3):
        if rng.random() < flip_prob:
            image = np.flip(image, axis)
            label = np.flip(label, axis)
    if jitter_amplitude > 0:
        noise = rng.uniform(-jitter_amplitude, jitter_amplitude, image.shape)
        image = image + noise.astype(image.dtype)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


# ---------------------------------------------------------------------------
# Batch loss with optional deep supervision
# ---------------------------------------------------------------------------

def batch_loss(probs: np.ndarray, aux_probs: list, labels: np.ndarray):
    """Mean per-sample dice+focal, plus weighted deep-supervision terms.

    Returns (scalar loss, d_probs, d_aux_probs) where the gradients are
    with respect to the probability tensors.
    """
    n = probs.shape[0]
    value = 0.0
    d_probs = np.zeros_like(probs)
    for i in range(n):
        lv = total_loss(probs[i], labels[i])
        value += lv.total / n
        d_probs[i] = lv.gradient / n
    d_aux = []
    for s, ap in aux_probs:
        w = AUX_WEIGHT_BASE**s
        d_ap = np.zeros_like(ap)
        for i in range(n):
            lv = total_loss(ap[i], labels[i])
            value += w * lv.total / n
            d_ap[i] = w * lv.gradient / n
        d_aux.append((s, d_ap))
    return value, d_probs, d_aux


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Plain overlap score of two binary masks in [0, 1]; empty-empty is 1."""
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dsc: float


class TrainingDiverged(RuntimeError):
    pass


def _as_batch(images: list[np.ndarray]) -> np.ndarray:
    return np.stack(images)[:, None].astype(np.float32)


def _validate(pairs, params, cfg, patch):
    losses, dscs = [], []
    for image, label in pairs:
        xi = center_crop(image, patch)
        yi = center_crop(label, patch)
        probs = predict_patch(_as_batch([xi]), params, cfg)
        lv = total_loss(probs[0], yi[None].astype(np.float32))
        losses.append(lv.total)
        dscs.append(dice_score(probs[0, 0] >= 0.5, yi > 0))
    return float(np.mean(losses)), float(np.mean(dscs))


def train(train_pairs, val_pairs, cfg: UNetConfig, tcfg: TrainConfig):
    """Fit the network; returns (best params, history of EpochRecord).

    ``train_pairs`` and ``val_pairs`` are lists of (image, label) arrays of
    shape (D, H, W); images are expected on the normalized [0, 1] scale.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("need at least one training and one validation pair")
    patch = tuple(tcfg.patch_size)
    if any(p % cfg.divisor for p in patch):
        raise ValueError(f"patch dims {patch} must be divisible by {cfg.divisor}")

    rng = np.random.default_rng(tcfg.seed)
    params = unet_init(cfg, seed=tcfg.seed)
    state = adam_init(params)
    history: list[EpochRecord] = []
    best_loss = np.inf
    best_dsc = -1.0
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0
    step = 0

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idxs = order[start:start + tcfg.batch_size]
            images, labels = [], []
            for i in idxs:
                img, lab = sample_patch(train_pairs[i][0], train_pairs[i][1],
                                        patch, rng, tcfg.foreground_bias)
                img, lab = augment(img, lab, rng, tcfg.flip_prob, tcfg.jitter_amplitude)
                images.append(img)
                labels.append(lab)
            x = _as_batch(images)
            y = _as_batch([l.astype(np.float32) for l in labels])
            probs, aux_probs, trace = unet_forward(x, params, cfg)
            loss, d_probs, d_aux = batch_loss(probs, aux_probs, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} step {step}"
                )
            grads = unet_backward(d_probs, trace, params, cfg, d_aux_probs=d_aux)
            grads.pop("__x__")
            step += 1
            adam_step(params, grads, state, tcfg.learning_rate, step,
                      tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
            epoch_losses.append(loss)

        val_loss, val_dsc = _validate(val_pairs, params, cfg, patch)
        history.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss, val_dsc))
        improved = val_loss < best_loss or (val_loss == best_loss and val_dsc > best_dsc)
        if improved:
            best_loss = val_loss
            best_dsc = val_dsc
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.early_stop_patience:
                break
    return best_params, history
