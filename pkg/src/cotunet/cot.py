"""3D contextual-transformer block.

The block fuses two context representations of its input. A k*k*k
convolution over the keys (the input itself) yields the static context:
each position summarizing its spatial neighborhood. The queries (again the
input) are concatenated with that static context and pushed through two
1x1x1 convolutions to form an attention map, which gates the values (a
1x1x1 embedding of the input) elementwise into the dynamic context. The
output is the sum of static and dynamic context, so spatial dims and
channel count are preserved and the block can replace a convolution in
place.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .ops import (
    ShapeError,
    concat_channels,
    conv3d,
    conv3d_backward,
    require_tensor5,
    split_channels,
)


@dataclass
class CoTParams:
    """Weights of one block: key context conv (k*k*k, C->C), value embedding
    (1x1x1, C->C), and the two attention convs (1x1x1, 2C->C then C->C).
    All biases are zero-initialized."""

    w_key: np.ndarray
    b_key: np.ndarray
    w_value: np.ndarray
    b_value: np.ndarray
    w_theta: np.ndarray
    b_theta: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray

    @property
    def channels(self) -> int:
        return self.w_key.shape[0]

    @property
    def kernel(self) -> int:
        return self.w_key.shape[2]

    def map(self, fn) -> "CoTParams":
        return CoTParams(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})


@dataclass
class CoTTrace:
    """Intermediate activations kept for the backward pass. ``queries`` is
    the block input (queries and keys are identity transforms of it)."""

    queries: np.ndarray
    static_ctx: np.ndarray   # neighborhood-contextualized keys
    values: np.ndarray
    attn_mid: np.ndarray     # between the two attention convolutions
    attn: np.ndarray
    dynamic_ctx: np.ndarray  # values * attn


def cot_init(channels: int, k: int = 3, seed: int = 0) -> CoTParams:
    """He-style fan-in scaled weights, zero biases, deterministic per seed."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"key kernel size must be odd and positive, got {k}")
    rng = np.random.default_rng(seed)

    def he(out_ch, in_ch, ksz):
        fan_in = in_ch * ksz**3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksz, ksz, ksz))
        return w.astype(np.float32)

    zeros = lambda: np.zeros(channels, dtype=np.float32)
    return CoTParams(
        w_key=he(channels, channels, k), b_key=zeros(),
        w_value=he(channels, channels, 1), b_value=zeros(),
        w_theta=he(channels, 2 * channels, 1), b_theta=zeros(),
        w_delta=he(channels, channels, 1), b_delta=zeros(),
    )


def cot_forward(x: np.ndarray, p: CoTParams):
    """Run the block; returns (output, trace).

    The output equals static_ctx + values * attn, with attention computed
    from the concatenation of static context and queries. No normalization
    or activation is applied inside the block.
    """
    x = require_tensor5(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, block expects {p.channels}")
    pad = p.kernel // 2
    static_ctx = conv3d(x, p.w_key, p.b_key, padding=pad)
    values = conv3d(x, p.w_value, p.b_value)
    cat = concat_channels(static_ctx, x)
    attn_mid = conv3d(cat, p.w_theta, p.b_theta)
    attn = conv3d(attn_mid, p.w_delta, p.b_delta)
    dynamic_ctx = values * attn
    y = static_ctx + dynamic_ctx
    trace = CoTTrace(queries=x, static_ctx=static_ctx, values=values,
                     attn_mid=attn_mid, attn=attn, dynamic_ctx=dynamic_ctx)
    return y, trace


def cot_backward(dy: np.ndarray, trace: CoTTrace, p: CoTParams):
    """Exact reverse-mode gradients; returns (dx, CoTParams-shaped grads).

    Both identity branches contribute to dx: the keys through the key
    convolution and the queries through the concatenation slice.
    """
    dy = require_tensor5(dy, "dy")
    x = trace.queries
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match block output {x.shape}")
    pad = p.kernel // 2
    c = p.channels

    d_static = dy.copy()
    d_dynamic = dy
    d_values = d_dynamic * trace.attn
    d_attn = d_dynamic * trace.values

    d_mid, dw_delta, db_delta = conv3d_backward(trace.attn_mid, p.w_delta, d_attn)
    cat = concat_channels(trace.static_ctx, x)
    d_cat, dw_theta, db_theta = conv3d_backward(cat, p.w_theta, d_mid)
    d_static_from_attn, d_queries = split_channels(d_cat, c)
    d_static += d_static_from_attn

    dx_keys, dw_key, db_key = conv3d_backward(x, p.w_key, d_static, padding=pad)
    dx_values, dw_value, db_value = conv3d_backward(x, p.w_value, d_values)
    dx = dx_keys + dx_values + d_queries

    grads = CoTParams(
        w_key=dw_key, b_key=db_key,
        w_value=dw_value, b_value=db_value,
        w_theta=dw_theta, b_theta=db_theta,
        w_delta=dw_delta, b_delta=db_delta,
    )
    return dx, grads
