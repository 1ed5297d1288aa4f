"""CT preprocessing, patch tiling, and the two-stage inference workflow.

Intensities are windowed to [-1000, 600] HU and scaled to [0, 1]. Whole
volumes are tiled into overlapping patches for the network, predictions
are averaged where patches overlap, and the two stage masks (total airway,
then the intrapulmonary refinement) are merged and reduced to their
largest connected component.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .unet import UNetConfig, predict_patch
from .volume import Volume

HU_WINDOW = (-1000.0, 600.0)

_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: np.ones((3, 3, 3), dtype=bool),
}


def preprocess(ct: Volume) -> Volume:
    """Clamp to the HU window and scale to [0, 1]."""
    lo, hi = HU_WINDOW
    data = (np.clip(ct.data.astype(np.float32), lo, hi) - lo) / (hi - lo)
    return ct.like(data.astype(np.float32))


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned crop with enough information to invert it."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]        # exclusive
    full_dims: tuple[int, int, int]

    @property
    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return data[self.slices]

    def restore(self, data: np.ndarray, fill=0) -> np.ndarray:
        """Embed cropped data back into the full grid, ``fill`` outside."""
        out = np.full(self.full_dims, fill, dtype=data.dtype)
        out[self.slices] = data
        return out


def crop_to_lung(ct: Volume, lung: Volume, margin_voxels: int = 8):
    """Tight bounding box of the lung mask grown by a margin.

    Returns (cropped ct, CropBox); the box is clipped to the volume.
    """
    mask = lung.astype_mask()
    if ct.dims != lung.dims:
        raise ValueError(f"ct dims {ct.dims} != lung dims {lung.dims}")
    coords = np.argwhere(mask)
    if coords.size == 0:
        raise ValueError("lung mask is empty; cannot derive a crop box")
    lo = np.maximum(coords.min(axis=0) - margin_voxels, 0)
    hi = np.minimum(coords.max(axis=0) + 1 + margin_voxels, ct.dims)
    box = CropBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi), ct.dims)
    return ct.like(box.apply(ct.data)), box


def make_stage2_labels(airway: Volume, lung: Volume) -> Volume:
    """Intrapulmonary airway mask: voxelwise airway AND lung."""
    if airway.dims != lung.dims:
        raise ValueError(f"airway dims {airway.dims} != lung dims {lung.dims}")
    return airway.like(airway.astype_mask() & lung.astype_mask())


# ---------------------------------------------------------------------------
# Tiling and stitching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TilingPlan:
    dims: tuple[int, int, int]          # original dims
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    pad: tuple[int, int, int]           # trailing padding per axis
    origins: tuple[tuple[int, int, int], ...]

    @property
    def padded_dims(self):
        return tuple(d + p for d, p in zip(self.dims, self.pad))


def plan_tiling(dims, patch, overlap_fraction: float = 0.5) -> TilingPlan:
    """Plan overlapping patches that cover the (padded) volume exactly."""
    patch = tuple(int(p) for p in patch)
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    stride = tuple(max(1, int(round(p * (1.0 - overlap_fraction)))) for p in patch)
    pad = []
    axis_origins = []
    for n, p, s in zip(dims, patch, stride):
        if n <= p:
            pad.append(p - n)
            axis_origins.append([0])
        else:
            steps = -(-(n - p) // s)  # ceil
            padded = p + steps * s
            pad.append(padded - n)
            axis_origins.append([i * s for i in range(steps + 1)])
    origins = tuple(
        (a, b, c) for a in axis_origins[0] for b in axis_origins[1] for c in axis_origins[2]
    )
    return TilingPlan(tuple(int(d) for d in dims), patch, stride,
                      tuple(pad), origins)


def extract_patches(data: np.ndarray, plan: TilingPlan, pad_mode: str = "edge"):
    """Yield (origin, patch) over the padded volume in plan order."""
    padded = np.pad(data, [(0, p) for p in plan.pad], mode=pad_mode)
    for origin in plan.origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, plan.patch))
        yield origin, padded[sl]


def stitch(patches, plan: TilingPlan) -> np.ndarray:
    """Average per-voxel over overlapping patch predictions.

    ``patches`` pairs each origin from the plan with its prediction array.
    Accumulation follows plan order, so the result is deterministic.
    """
    acc = np.zeros(plan.padded_dims, dtype=np.float64)
    count = np.zeros(plan.padded_dims, dtype=np.int32)
    for origin, patch in patches:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, plan.patch))
        acc[sl] += patch
        count[sl] += 1
    if (count == 0).any():
        raise ValueError("tiling plan leaves voxels uncovered")
    out = (acc / count).astype(np.float32)
    crop = tuple(slice(0, d) for d in plan.dims)
    return out[crop]


# ---------------------------------------------------------------------------
# Connected components
# ---------------------------------------------------------------------------

def largest_connected_component(mask: Volume | np.ndarray,
                                connectivity: int = 26):
    """Keep only the biggest component; ties break toward the component
    containing the lowest flat voxel index. Empty input stays empty."""
    data = mask.data if isinstance(mask, Volume) else mask
    fg = data.astype(bool)
    if not fg.any():
        out = np.zeros_like(fg)
    else:
        labels, n = ndimage.label(fg, structure=_STRUCTS[connectivity])
        counts = np.bincount(labels.ravel())
        counts[0] = 0
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) == 1:
            keep = tied[0]
        else:
            flat = labels.ravel()
            keep = min(tied, key=lambda lab: int(np.argmax(flat == lab)))
        out = labels == keep
    return mask.like(out) if isinstance(mask, Volume) else out


# ---------------------------------------------------------------------------
# Two-stage inference
# ---------------------------------------------------------------------------

@dataclass
class StageModel:
    params: dict
    config: UNetConfig


@dataclass
class TwoStageModel:
    stage1: StageModel
    stage2: StageModel


@dataclass
class TwoStageResult:
    final: Volume
    stage1: Volume
    stage2: Volume
    merged: Volume
    warning: str | None = None


def predict_volume(ct_norm: np.ndarray, model: StageModel, patch,
                   overlap_fraction: float = 0.5) -> np.ndarray:
    """Tile, run the network per patch, and stitch the probabilities."""
    plan = plan_tiling(ct_norm.shape, patch, overlap_fraction)
    preds = []
    for origin, p in extract_patches(ct_norm, plan):
        probs = predict_patch(p[None, None].astype(np.float32),
                              model.params, model.config)
        preds.append((origin, probs[0, 0]))
    return stitch(preds, plan)


def two_stage_infer(ct: Volume, lung: Volume, model: TwoStageModel,
                    threshold: float = 0.5, patch=(32, 32, 32),
                    overlap_fraction: float = 0.5, crop_margin: int = 8,
                    merge: str = "union", connectivity: int = 26) -> TwoStageResult:
    """Run both stages on one scan and merge their masks.

    Both stages see the lung-cropped, windowed CT. The stage-2 mask is
    restricted to the lung region, mirroring its training target. Merge
    modes: "union" (default), "intersection", or "prob_max" (threshold the
    voxelwise max of the two probability maps). The merged mask is reduced
    to its largest connected component.
    """
    norm = preprocess(ct)
    cropped, box = crop_to_lung(norm, lung, crop_margin)
    p1 = predict_volume(cropped.data, model.stage1, patch, overlap_fraction)
    p2 = predict_volume(cropped.data, model.stage2, patch, overlap_fraction)
    probs1 = box.restore(p1)
    probs2 = box.restore(p2)
    lung_mask = lung.astype_mask()
    stage1 = probs1 >= threshold
    stage2 = (probs2 >= threshold) & lung_mask
    if merge == "union":
        merged = stage1 | stage2
    elif merge == "intersection":
        merged = stage1 & stage2
    elif merge == "prob_max":
        merged = np.maximum(probs1, np.where(lung_mask, probs2, 0.0)) >= threshold
    else:
        raise ValueError(f"unknown merge mode {merge!r}")
    warning = None
    if not merged.any():
        warning = "merged mask is empty; returning an empty segmentation"
        warnings.warn(warning, stacklevel=2)
        final = merged
    else:
        final = largest_connected_component(merged, connectivity)
    return TwoStageResult(
        final=ct.like(final), stage1=ct.like(stage1), stage2=ct.like(stage2),
        merged=ct.like(merged), warning=warning,
    )
