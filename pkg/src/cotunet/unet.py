"""Encoder-decoder segmentation network built from the verified kernels.

The network has ``scales`` resolution levels connected by 2x max pooling on
the way down and trilinear upsampling plus a 3x3x3 convolution on the way
up. Every level pairs a 3x3x3 convolution with a contextual-transformer
block, each followed by instance normalization and ReLU; the one exception
is the first encoder level, which uses two plain convolutions. Skip
connections concatenate encoder features into the decoder. The output head
is a 1x1x1 convolution with a logistic nonlinearity; optional deep
supervision adds a 1x1x1 head at every decoder level below full
resolution, upsampled to full resolution.

Parameters live in an ordered ``dict[str, np.ndarray]``; the key order is
the canonical serialization order used by the optimizer and the checkpoint
format.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .cot import CoTParams, cot_backward, cot_forward
from .ops import (
    ShapeError,
    check_finite,
    concat_channels,
    conv3d,
    conv3d_backward,
    instance_norm3d,
    instance_norm3d_backward,
    maxpool3d,
    maxpool3d_backward,
    relu,
    relu_backward,
    require_tensor5,
    sigmoid,
    split_channels,
    upsample_trilinear2x,
    upsample_trilinear2x_backward,
)

NORM_EPS = 1e-5
PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"COTUNET1"

_COT_SUBKEYS = ("key.w", "key.b", "value.w", "value.b",
                "theta.w", "theta.b", "delta.w", "delta.b")


@dataclass(frozen=True)
class UNetConfig:
    scales: int = 5
    base_channels: int = 8
    cot_kernel: int = 3
    deep_supervision: bool = False
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError(f"scales must be >= 2, got {self.scales}")
        if self.cot_kernel < 1 or self.cot_kernel % 2 == 0:
            raise ValueError(f"cot_kernel must be odd, got {self.cot_kernel}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def width(self, scale: int) -> int:
        return self.base_channels * 2**scale

    @property
    def divisor(self) -> int:
        """Spatial dims of the input patch must be divisible by this."""
        return 2 ** (self.scales - 1)


def _cot_shapes(channels: int, k: int):
    return {
        "key.w": (channels, channels, k, k, k), "key.b": (channels,),
        "value.w": (channels, channels, 1, 1, 1), "value.b": (channels,),
        "theta.w": (channels, 2 * channels, 1, 1, 1), "theta.b": (channels,),
        "delta.w": (channels, channels, 1, 1, 1), "delta.b": (channels,),
    }


def param_layout(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list defining parameter and checkpoint order."""
    k = cfg.cot_kernel
    out = []

    def conv(prefix, cin, cout, ksz=3):
        out.append((f"{prefix}.w", (cout, cin, ksz, ksz, ksz)))
        out.append((f"{prefix}.b", (cout,)))

    def norm(prefix, ch):
        out.append((f"{prefix}.g", (ch,)))
        out.append((f"{prefix}.b", (ch,)))

    def cot(prefix, ch):
        for sub, shape in _cot_shapes(ch, k).items():
            out.append((f"{prefix}.{sub}", shape))

    w0 = cfg.width(0)
    conv("enc0.conv1", cfg.in_channels, w0)
    norm("enc0.norm1", w0)
    conv("enc0.conv2", w0, w0)
    norm("enc0.norm2", w0)
    for s in range(1, cfg.scales):
        ws, wp = cfg.width(s), cfg.width(s - 1)
        conv(f"enc{s}.conv", wp, ws)
        norm(f"enc{s}.norm1", ws)
        cot(f"enc{s}.cot", ws)
        norm(f"enc{s}.norm2", ws)
    for s in range(cfg.scales - 2, -1, -1):
        ws, wd = cfg.width(s), cfg.width(s + 1)
        conv(f"dec{s}.up", wd, ws)
        norm(f"dec{s}.upnorm", ws)
        conv(f"dec{s}.conv", 2 * ws, ws)
        norm(f"dec{s}.norm1", ws)
        cot(f"dec{s}.cot", ws)
        norm(f"dec{s}.norm2", ws)
        if cfg.deep_supervision and s > 0:
            conv(f"dec{s}.head", ws, cfg.out_channels, ksz=1)
    conv("out", w0, cfg.out_channels, ksz=1)
    return out


def unet_init(cfg: UNetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-initialized conv weights, zero biases, unit norm gains.

    Each weight tensor draws from its own stream keyed by (seed, name), so
    turning deep supervision on or off leaves the shared weights untouched.
    """
    params: dict[str, np.ndarray] = {}
    for name, shape in param_layout(cfg):
        if name.endswith(".w"):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def parameter_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(cfg))


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in params])


def _cot_view(params, prefix) -> CoTParams:
    return CoTParams(
        w_key=params[f"{prefix}.key.w"], b_key=params[f"{prefix}.key.b"],
        w_value=params[f"{prefix}.value.w"], b_value=params[f"{prefix}.value.b"],
        w_theta=params[f"{prefix}.theta.w"], b_theta=params[f"{prefix}.theta.b"],
        w_delta=params[f"{prefix}.delta.w"], b_delta=params[f"{prefix}.delta.b"],
    )


# -- conv + instance norm + relu -------------------------------------------

def _cir_forward(x, params, conv_key, norm_key, pad):
    pre = conv3d(x, params[f"{conv_key}.w"], params[f"{conv_key}.b"], padding=pad)
    normed, mean, inv_std = instance_norm3d(
        pre, params[f"{norm_key}.g"], params[f"{norm_key}.b"], NORM_EPS
    )
    return relu(normed), (x, pre, mean, inv_std, normed)


def _cir_backward(dy, cache, params, grads, conv_key, norm_key, pad):
    x, pre, mean, inv_std, normed = cache
    dy = relu_backward(dy, normed)
    d_pre, dg, db = instance_norm3d_backward(dy, pre, params[f"{norm_key}.g"], mean, inv_std)
    grads[f"{norm_key}.g"] += dg
    grads[f"{norm_key}.b"] += db
    dx, dw, dbias = conv3d_backward(x, params[f"{conv_key}.w"], d_pre, padding=pad)
    grads[f"{conv_key}.w"] += dw
    grads[f"{conv_key}.b"] += dbias
    return dx


# -- contextual transformer + instance norm + relu -------------------------

def _cotir_forward(x, params, cot_key, norm_key):
    pre, cot_trace = cot_forward(x, _cot_view(params, cot_key))
    normed, mean, inv_std = instance_norm3d(
        pre, params[f"{norm_key}.g"], params[f"{norm_key}.b"], NORM_EPS
    )
    return relu(normed), (cot_trace, pre, mean, inv_std, normed)


def _cotir_backward(dy, cache, params, grads, cot_key, norm_key):
    cot_trace, pre, mean, inv_std, normed = cache
    dy = relu_backward(dy, normed)
    d_pre, dg, db = instance_norm3d_backward(dy, pre, params[f"{norm_key}.g"], mean, inv_std)
    grads[f"{norm_key}.g"] += dg
    grads[f"{norm_key}.b"] += db
    dx, cot_grads = cot_backward(d_pre, cot_trace, _cot_view(params, cot_key))
    for sub, attr in zip(_COT_SUBKEYS,
                         ("w_key", "b_key", "w_value", "b_value",
                          "w_theta", "b_theta", "w_delta", "b_delta")):
        grads[f"{cot_key}.{sub}"] += getattr(cot_grads, attr)
    return dx


def unet_forward(x: np.ndarray, params: dict, cfg: UNetConfig, want_trace: bool = True):
    """Run the network; returns (probs, aux_probs, trace).

    ``probs`` has the input's spatial dims with ``out_channels`` channels,
    clamped to (0, 1) so downstream log terms stay finite. ``aux_probs`` is
    a list of (scale, probs) pairs, empty unless deep supervision is on.
    With ``want_trace=False`` the trace is None and intermediates are
    dropped as soon as possible.
    """
    x = require_tensor5(x)
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    div = cfg.divisor
    bad = [f"axis {ax} size {n}" for ax, n in enumerate(x.shape[2:]) if n % div]
    if bad:
        raise ShapeError(
            f"spatial dims must be divisible by {div} for {cfg.scales} scales "
            f"({'; '.join(bad)}); pad the patch to the next multiple"
        )

    S = cfg.scales
    enc_caches = []
    pool_idx = []
    skips = []

    h, c1 = _cir_forward(x, params, "enc0.conv1", "enc0.norm1", 1)
    h, c2 = _cir_forward(h, params, "enc0.conv2", "enc0.norm2", 1)
    if want_trace:
        enc_caches.append((c1, c2))
    skips.append(h)
    for s in range(1, S):
        h, idx = maxpool3d(h)
        if want_trace:
            pool_idx.append(idx)
        h, c1 = _cir_forward(h, params, f"enc{s}.conv", f"enc{s}.norm1", 1)
        h, c2 = _cotir_forward(h, params, f"enc{s}.cot", f"enc{s}.norm2")
        if want_trace:
            enc_caches.append((c1, c2))
        if s < S - 1:
            skips.append(h)

    dec_caches: list = [None] * max(S - 1, 0)
    aux = []
    for s in range(S - 2, -1, -1):
        up = upsample_trilinear2x(h)
        h, cu = _cir_forward(up, params, f"dec{s}.up", f"dec{s}.upnorm", 1)
        cat = concat_channels(h, skips[s])
        h, c1 = _cir_forward(cat, params, f"dec{s}.conv", f"dec{s}.norm1", 1)
        h, c2 = _cotir_forward(h, params, f"dec{s}.cot", f"dec{s}.norm2")
        if want_trace:
            dec_caches[s] = (cu, c1, c2)
        if cfg.deep_supervision and s > 0:
            lg = conv3d(h, params[f"dec{s}.head.w"], params[f"dec{s}.head.b"])
            for _ in range(s):
                lg = upsample_trilinear2x(lg)
            aux.append((s, h if want_trace else None,
                        np.clip(sigmoid(lg), PROB_CLAMP, 1.0 - PROB_CLAMP)))

    logits = conv3d(h, params["out.w"], params["out.b"])
    probs = check_finite(np.clip(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP),
                         "network output")
    aux_probs = [(s, p) for s, _, p in aux]

    if not want_trace:
        return probs, aux_probs, None
    trace = {
        "enc": enc_caches, "pool": pool_idx, "dec": dec_caches,
        "final": h, "probs": probs,
        "aux": [(s, hh, pp) for s, hh, pp in aux],
    }
    return probs, aux_probs, trace


def unet_backward(d_probs: np.ndarray, trace: dict, params: dict, cfg: UNetConfig,
                  d_aux_probs: list | None = None) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every parameter.

    ``d_probs`` is the loss gradient with respect to the output
    probabilities; ``d_aux_probs`` optionally pairs each deep-supervision
    scale with the gradient at its upsampled probabilities. Returns a dict
    keyed like ``params``. The input gradient is stored under ``"__x__"``.
    """
    S = cfg.scales
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    probs = trace["probs"]

    d_logits = d_probs * probs * (1.0 - probs)
    dh, dw, db = conv3d_backward(trace["final"], params["out.w"], d_logits)
    grads["out.w"] += dw
    grads["out.b"] += db

    aux_grad_at = {}
    if d_aux_probs:
        aux_by_scale = {s: (hh, pp) for s, hh, pp in trace["aux"]}
        for s, d_ap in d_aux_probs:
            hh, pp = aux_by_scale[s]
            d_lg = d_ap * pp * (1.0 - pp)
            for _ in range(s):
                d_lg = upsample_trilinear2x_backward(d_lg)
            dhh, dw, db = conv3d_backward(hh, params[f"dec{s}.head.w"], d_lg)
            grads[f"dec{s}.head.w"] += dw
            grads[f"dec{s}.head.b"] += db
            aux_grad_at[s] = dhh

    d_skip = [None] * max(S - 1, 0)
    for s in range(0, S - 1):
        if s in aux_grad_at:
            dh = dh + aux_grad_at[s]
        cu, c1, c2 = trace["dec"][s]
        dh = _cotir_backward(dh, c2, params, grads, f"dec{s}.cot", f"dec{s}.norm2")
        d_cat = _cir_backward(dh, c1, params, grads, f"dec{s}.conv", f"dec{s}.norm1", 1)
        d_upc, d_skip[s] = split_channels(d_cat, cfg.width(s))
        d_up = _cir_backward(d_upc, cu, params, grads, f"dec{s}.up", f"dec{s}.upnorm", 1)
        dh = upsample_trilinear2x_backward(d_up)

    for s in range(S - 1, 0, -1):
        if s < S - 1:
            dh = dh + d_skip[s]
        c1, c2 = trace["enc"][s]
        dh = _cotir_backward(dh, c2, params, grads, f"enc{s}.cot", f"enc{s}.norm2")
        dh = _cir_backward(dh, c1, params, grads, f"enc{s}.conv", f"enc{s}.norm1", 1)
        dh = maxpool3d_backward(dh, trace["pool"][s - 1])

    dh = dh + d_skip[0]
    c1, c2 = trace["enc"][0]
    dh = _cir_backward(dh, c2, params, grads, "enc0.conv2", "enc0.norm2", 1)
    dh = _cir_backward(dh, c1, params, grads, "enc0.conv1", "enc0.norm1", 1)
    grads["__x__"] = dh
    return grads


def predict_patch(x: np.ndarray, params: dict, cfg: UNetConfig) -> np.ndarray:
    """Forward pass without trace retention; values identical to unet_forward."""
    probs, _, _ = unet_forward(x, params, cfg, want_trace=False)
    return probs


# ---------------------------------------------------------------------------
# Checkpoint format: magic, little-endian u32 header length, JSON header,
# float32 little-endian parameter block in canonical layout order.
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, cfg: UNetConfig, epoch: int = 0,
                    metrics: dict | None = None) -> None:
    layout = param_layout(cfg)
    if [n for n, _ in layout] != list(params.keys()):
        raise CheckpointError("parameter dict does not match the config layout")
    header = {
        "config": asdict(cfg),
        "epoch": int(epoch),
        "metrics": metrics or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    block = np.concatenate(
        [np.ascontiguousarray(params[n], dtype="<f4").ravel() for n, _ in layout]
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(block.tobytes())


def load_checkpoint(path):
    """Returns (params, cfg, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    hlen = int.from_bytes(raw[8:12], "little")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    cfg = UNetConfig(**header["config"])
    layout = param_layout(cfg)
    total = sum(int(np.prod(shape)) for _, shape in layout)
    block = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    if block.size != total:
        raise CheckpointError(
            f"parameter block has {block.size} scalars, layout expects {total}"
        )
    params = {}
    off = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        params[name] = block[off:off + n].reshape(shape).copy()
        off += n
    return params, cfg, header
