"""Dense 5-axis tensor kernels with hand-derived backward passes.

All operations take arrays laid out as (batch, channels, depth, height,
width) and are pure functions: no hidden state, deterministic results for
identical inputs. The production dtype is float32; every kernel is
dtype-preserving so the finite-difference checker can drive the same code
in float64. Reductions that are cheap to widen (normalization statistics)
accumulate in float64 regardless of input dtype.

Backward functions compute gradients of ``sum(dy * forward(x))`` with
respect to every differentiable input, matching central finite differences
to the tolerances pinned in the test suite.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible, naming the axes."""


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected scalar or length-3 value, got {v!r}")
    return t


def require_tensor5(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"{name} must have 5 axes (N,C,D,H,W), got shape {x.shape}")
    return x


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return x


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation)
# ---------------------------------------------------------------------------

def conv3d_output_dims(in_dims, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for ax, (n, k, s, p) in enumerate(zip(in_dims, kernel, stride, padding)):
        o = (n + 2 * p - k) // s + 1
        if o <= 0:
            raise ShapeError(
                f"conv3d spatial axis {ax}: input {n}, kernel {k}, stride {s}, "
                f"padding {p} gives non-positive output {o}"
            )
        out.append(o)
    return tuple(out)


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride=1, padding=0) -> np.ndarray:
    """Cross-correlate ``x`` (N,C,D,H,W) with ``weight`` (O,C,kd,kh,kw).

    Implemented as one GEMM per kernel offset over strided input slices;
    summation order is fixed, so results are deterministic.
    """
    x = require_tensor5(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 5:
        raise ShapeError(f"weight must have 5 axes (O,C,kd,kh,kw), got {weight.shape}")
    n, c, d, h, w = x.shape
    o, ci, kd, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"channel mismatch: input has C={c}, weight expects C={ci}")
    if bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    stride = _triple(stride)
    padding = _triple(padding)
    od, oh, ow = conv3d_output_dims((d, h, w), (kd, kh, kw), stride, padding)
    xp = _pad_spatial(x, padding)
    sd, sh, sw = stride
    y = np.zeros((n, o, od, oh, ow), dtype=x.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + sd * od:sd, j:j + sh * oh:sh, k:k + sw * ow:sw]
                # (N,C,od,oh,ow) x (O,C) -> (N,od,oh,ow,O)
                y += np.moveaxis(
                    np.tensordot(xs, weight[:, :, i, j, k], axes=([1], [1])), -1, 1
                )
    y += bias.astype(x.dtype)[None, :, None, None, None]
    return y


def conv3d_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray,
                    stride=1, padding=0):
    """Gradients of ``sum(dy * conv3d(x, weight, bias))`` w.r.t. x, weight, bias."""
    x = require_tensor5(x)
    weight = np.asarray(weight)
    dy = require_tensor5(dy, "dy")
    n, c, d, h, w = x.shape
    o, _, kd, kh, kw = weight.shape
    stride = _triple(stride)
    padding = _triple(padding)
    od, oh, ow = conv3d_output_dims((d, h, w), (kd, kh, kw), stride, padding)
    if dy.shape != (n, o, od, oh, ow):
        raise ShapeError(
            f"dy shape {dy.shape} does not match conv3d output {(n, o, od, oh, ow)}"
        )
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = _pad_spatial(x, padding)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + sd * od:sd, j:j + sh * oh:sh, k:k + sw * ow:sw]
                dw[:, :, i, j, k] = np.tensordot(dy, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                contrib = np.tensordot(dy, weight[:, :, i, j, k], axes=([1], [0]))
                dxp[:, :, i:i + sd * od:sd, j:j + sh * oh:sh, k:k + sw * ow:sw] += (
                    np.moveaxis(contrib, -1, 1)
                )
    db = dy.sum(axis=(0, 2, 3, 4))
    dx = dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w] if (pd or ph or pw) else dxp
    return dx, dw, db


def conv3d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     stride=1, padding=0) -> np.ndarray:
    """Naive seven-loop cross-correlation. Slow; kept as an oracle."""
    x = require_tensor5(x)
    n, c, d, h, w = x.shape
    o, _, kd, kh, kw = weight.shape
    stride = _triple(stride)
    padding = _triple(padding)
    od, oh, ow = conv3d_output_dims((d, h, w), (kd, kh, kw), stride, padding)
    xp = _pad_spatial(x, padding)
    y = np.zeros((n, o, od, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        acc = 0.0
                        for ci in range(c):
                            for i in range(kd):
                                for j in range(kh):
                                    for k in range(kw):
                                        acc += (
                                            float(xp[ni, ci, zi * stride[0] + i,
                                                     yi * stride[1] + j,
                                                     xi * stride[2] + k])
                                            * float(weight[oi, ci, i, j, k])
                                        )
                        y[ni, oi, zi, yi, xi] = acc + float(bias[oi])
    return y.astype(x.dtype)


# ---------------------------------------------------------------------------
# Max pooling, window and stride 2
# ---------------------------------------------------------------------------

def maxpool3d(x: np.ndarray):
    """2x2x2 max pooling. Returns (pooled, argmax) where argmax holds the
    flat index (0..7) of the winning voxel inside each block; ties go to the
    lowest index, so gradients are deterministic."""
    x = require_tensor5(x)
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(
            f"maxpool3d needs even spatial dims, got D={d}, H={h}, W={w}; pad first"
        )
    blocks = (
        x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // 2, h // 2, w // 2, 8)
    )
    idx = blocks.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxpool3d_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Scatter ``dy`` back to the recorded argmax positions."""
    dy = require_tensor5(dy, "dy")
    n, c, od, oh, ow = dy.shape
    if idx.shape != dy.shape:
        raise ShapeError(f"argmax shape {idx.shape} does not match dy {dy.shape}")
    blocks = np.zeros((n, c, od, oh, ow, 8), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    return (
        blocks.reshape(n, c, od, oh, ow, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, od * 2, oh * 2, ow * 2)
    )


# ---------------------------------------------------------------------------
# Instance normalization
# ---------------------------------------------------------------------------

def instance_norm3d(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    eps: float = 1e-5):
    """Normalize each (batch, channel) slab to zero mean and unit variance
    over its D*H*W voxels (population variance), then scale and shift.

    Returns (y, mean, inv_std); the statistics are needed by the backward
    pass. Statistics accumulate in float64.
    """
    x = require_tensor5(x)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    n, c = x.shape[:2]
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    mean = x.mean(axis=(2, 3, 4), dtype=np.float64)
    var = (x.astype(np.float64) ** 2).mean(axis=(2, 3, 4)) - mean**2
    inv_std = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
    mean = mean.astype(x.dtype)
    inv_std = inv_std.astype(x.dtype)
    xhat = (x - mean[:, :, None, None, None]) * inv_std[:, :, None, None, None]
    y = xhat * gamma.astype(x.dtype)[None, :, None, None, None]
    y += beta.astype(x.dtype)[None, :, None, None, None]
    return y, mean, inv_std


def instance_norm3d_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                             mean: np.ndarray, inv_std: np.ndarray):
    """Gradients w.r.t. x, gamma, beta for instance_norm3d."""
    dy = require_tensor5(dy, "dy")
    x = require_tensor5(x)
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match x {x.shape}")
    xhat = (x - mean[:, :, None, None, None]) * inv_std[:, :, None, None, None]
    dgamma = (dy.astype(np.float64) * xhat).sum(axis=(0, 2, 3, 4)).astype(x.dtype)
    dbeta = dy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
    g = np.asarray(gamma).astype(x.dtype)[None, :, None, None, None]
    dxhat = dy * g
    m_dxhat = dxhat.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)
    m_dxhat_xhat = (dxhat.astype(np.float64) * xhat).mean(axis=(2, 3, 4)).astype(x.dtype)
    dx = inv_std[:, :, None, None, None] * (
        dxhat
        - m_dxhat[:, :, None, None, None]
        - xhat * m_dxhat_xhat[:, :, None, None, None]
    )
    return dx.astype(x.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mask dy where the forward input was <= 0 (subgradient at 0 is 0)."""
    return dy * (x > 0)


# ---------------------------------------------------------------------------
# Trilinear upsampling by 2 (align_corners = False)
# ---------------------------------------------------------------------------

_upsample_cache: dict[int, np.ndarray] = {}


def _upsample_matrix(n: int) -> np.ndarray:
    """Dense (2n, n) interpolation matrix for one axis; rows sum to 1."""
    m = _upsample_cache.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        for o in range(2 * n):
            s = (o + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(s))
            t = s - i0
            m[o, min(max(i0, 0), n - 1)] += 1.0 - t
            m[o, min(max(i0 + 1, 0), n - 1)] += t
        _upsample_cache[n] = m
    return m


def _apply_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(m.astype(x.dtype), x, axes=([1], [axis]))
    return np.moveaxis(y, 0, axis)


def upsample_trilinear2x(x: np.ndarray) -> np.ndarray:
    """Double every spatial axis by separable linear interpolation. Each
    output voxel is a convex combination of inputs (weights sum to 1), so
    constants are preserved exactly."""
    x = require_tensor5(x)
    for axis in (2, 3, 4):
        x = _apply_axis(x, _upsample_matrix(x.shape[axis]), axis)
    return x


def upsample_trilinear2x_backward(dy: np.ndarray) -> np.ndarray:
    """Adjoint of upsample_trilinear2x (transpose of the interpolation)."""
    dy = require_tensor5(dy, "dy")
    for axis in (2, 3, 4):
        n = dy.shape[axis]
        if n % 2:
            raise ShapeError(f"dy spatial axis {axis} has odd size {n}")
        dy = _apply_axis(dy, _upsample_matrix(n // 2).T, axis)
    return dy


# ---------------------------------------------------------------------------
# Channel concatenation
# ---------------------------------------------------------------------------

def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = require_tensor5(a, "a")
    b = require_tensor5(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels needs matching batch and spatial dims, "
            f"got {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def split_channels(dy: np.ndarray, channels_a: int):
    """Inverse of concat_channels; also serves as its gradient."""
    dy = require_tensor5(dy, "dy")
    if not 0 <= channels_a <= dy.shape[1]:
        raise ShapeError(f"cannot split {channels_a} channels from {dy.shape[1]}")
    return dy[:, :channels_a], dy[:, channels_a:]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function; output strictly in (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
