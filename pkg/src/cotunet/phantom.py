"""Synthetic branching-tube phantoms with analytic ground truth.

A phantom is a binary tree of tapering capsules (line segments swept by a
sphere) rasterized into a voxel grid, together with a surrounding
ellipsoidal "lung" region and a pseudo-CT rendering with four tissue
levels: lumen air, a one-voxel wall shell, parenchyma, and background soft
tissue. Because the tree is built from explicit segments, the true branch
count and centerline length are known exactly, which anchors the
skeleton-based measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

HU_LUMEN = -1000.0
HU_WALL = -200.0
HU_PARENCHYMA = -850.0
HU_TISSUE = 40.0


class PhantomFitError(ValueError):
    """The requested tree does not fit inside the volume."""


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one phantom tree."""

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth: int = 3                       # branching generations
    root_radius: float = 3.0             # voxels
    radius_decay: float = 0.75
    branch_angle_deg: tuple[float, float] = (20.0, 35.0)
    root_length: float = 15.0            # voxels
    length_decay: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.depth <= 6:
            raise ValueError(f"depth must be in 1..6, got {self.depth}")
        tip_radius = self.root_radius * self.radius_decay ** (self.depth - 1)
        if tip_radius < 1.0:
            raise ValueError(
                f"tip radius {tip_radius:.2f} voxels is below 1; "
                "raise root_radius or radius_decay"
            )
        if not (0 < self.branch_angle_deg[0] <= self.branch_angle_deg[1] < 90):
            raise ValueError(f"bad branch angle range {self.branch_angle_deg}")


@dataclass
class Segment:
    start: np.ndarray      # (z, y, x) voxel coordinates
    end: np.ndarray
    radius: float
    generation: int        # 0 for the root


@dataclass
class TreeInfo:
    """Analytic ground truth for a generated tree."""

    segments: list[Segment]
    branch_count: int
    centerline_length_mm: float


@dataclass
class PhantomCase:
    case_id: str
    ct: Volume
    airway: Volume
    lung: Volume
    spec: PhantomSpec
    tree: TreeInfo
    split: str = ""


def _orthonormal_pair(d: np.ndarray):
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _tree_segments(spec: PhantomSpec) -> list[Segment]:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.branch_angle_deg
    segments: list[Segment] = []

    def grow(start: np.ndarray, direction: np.ndarray, gen: int, plane: float):
        length = spec.root_length * spec.length_decay**gen
        radius = spec.root_radius * spec.radius_decay**gen
        end = start + direction * length
        segments.append(Segment(start.copy(), end, radius, gen))
        if gen + 1 < spec.depth:
            u, v = _orthonormal_pair(direction)
            # branching planes rotate ~90 degrees per generation, as in
            # real bronchi; the jitter keeps trees from being planar
            azimuth = plane + rng.uniform(-0.35, 0.35)
            for angle_deg, az in ((rng.uniform(lo, hi), azimuth),
                                  (rng.uniform(lo, hi), azimuth + math.pi)):
                theta = math.radians(angle_deg)
                child = (math.cos(theta) * direction
                         + math.sin(theta) * (math.cos(az) * u + math.sin(az) * v))
                grow(end, child / np.linalg.norm(child), gen + 1,
                     plane + math.pi / 2.0)

    start = np.array([spec.root_radius + 2.0, spec.dims[1] / 2.0, spec.dims[2] / 2.0])
    grow(start, np.array([1.0, 0.0, 0.0]), 0, rng.uniform(0.0, 2.0 * math.pi))
    return segments


def _check_fit(segments: list[Segment], dims):
    for i, seg in enumerate(segments):
        margin = seg.radius + 2.0  # room for the wall shell
        for pt in (seg.start, seg.end):
            for ax in range(3):
                if not margin <= pt[ax] <= dims[ax] - 1 - margin:
                    raise PhantomFitError(
                        f"segment {i} (generation {seg.generation}) endpoint "
                        f"{np.round(pt, 1).tolist()} escapes axis {ax} of dims "
                        f"{tuple(dims)} with margin {margin:.1f}"
                    )


def _rasterize(segments: list[Segment], dims) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for seg in segments:
        a, b, r = seg.start, seg.end, seg.radius
        lo = np.maximum(np.floor(np.minimum(a, b) - r - 1).astype(int), 0)
        hi = np.minimum(np.ceil(np.maximum(a, b) + r + 1).astype(int),
                        np.array(dims) - 1)
        grid = np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)],
                                    indexing="ij"), axis=-1).astype(float)
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip(((grid - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else 0.0
        closest = a + np.asarray(t)[..., None] * ab
        dist = np.linalg.norm(grid - closest, axis=-1)
        sub = mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        sub |= dist <= r
    return mask


def _lung_ellipsoid(segments: list[Segment], dims) -> np.ndarray:
    pts = []
    radii = []
    for seg in segments:
        if seg.generation >= 1:
            pts += [seg.start, seg.end]
            radii.append(seg.radius)
    if not pts:  # single-tube phantom: wrap the distal part of the root
        root = segments[0]
        pts = [root.start + 0.5 * (root.end - root.start), root.end]
        radii = [root.radius]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    semi = np.maximum((hi - lo) / 2.0 + max(radii) + 4.0, 5.0)
    zz, yy, xx = np.ogrid[:dims[0], :dims[1], :dims[2]]
    return (((zz - center[0]) / semi[0]) ** 2
            + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2) <= 1.0


def generate_tree_mask(spec: PhantomSpec):
    """Build the airway and lung masks plus analytic tree metadata.

    Deterministic per spec; raises PhantomFitError when the tree would
    leave the volume.
    """
    segments = _tree_segments(spec)
    _check_fit(segments, spec.dims)
    airway = _rasterize(segments, spec.dims)
    lung = _lung_ellipsoid(segments, spec.dims)
    spacing = np.asarray(spec.spacing_mm)
    length = sum(
        float(np.linalg.norm((seg.end - seg.start) * spacing)) for seg in segments
    )
    info = TreeInfo(segments=segments, branch_count=len(segments),
                    centerline_length_mm=length)
    return (Volume(airway, spec.spacing_mm), Volume(lung, spec.spacing_mm), info)


def synthesize_ct(airway: Volume, lung: Volume, noise_sigma: float = 0.0,
                  seed: int = 0) -> Volume:
    """Render a pseudo-CT: lumen -1000, wall -200, parenchyma -850,
    soft tissue 40 HU, plus seeded additive Gaussian noise."""
    a = airway.astype_mask()
    l = lung.astype_mask()
    hu = np.full(a.shape, HU_TISSUE, dtype=np.float32)
    hu[l] = HU_PARENCHYMA
    shell = ndimage.binary_dilation(a, structure=np.ones((3, 3, 3), bool)) & ~a
    hu[shell] = HU_WALL
    hu[a] = HU_LUMEN
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        hu = hu + rng.normal(0.0, noise_sigma, a.shape).astype(np.float32)
    return Volume(hu, airway.spacing)


@dataclass(frozen=True)
class PhantomRanges:
    """Sampling ranges for a dataset of phantoms."""

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth: tuple[int, int] = (3, 4)
    root_radius: tuple[float, float] = (2.6, 3.2)
    radius_decay: float = 0.78
    branch_angle_deg: tuple[float, float] = (22.0, 35.0)
    root_length: tuple[float, float] = (13.0, 16.0)
    length_decay: float = 0.75
    noise_sigma: float = 10.0


def _draw_spec(ranges: PhantomRanges, rng: np.random.Generator) -> PhantomSpec:
    return PhantomSpec(
        dims=ranges.dims,
        spacing_mm=ranges.spacing_mm,
        depth=int(rng.integers(ranges.depth[0], ranges.depth[1] + 1)),
        root_radius=float(rng.uniform(*ranges.root_radius)),
        radius_decay=ranges.radius_decay,
        branch_angle_deg=ranges.branch_angle_deg,
        root_length=float(rng.uniform(*ranges.root_length)),
        length_decay=ranges.length_decay,
        seed=int(rng.integers(2**31)),
    )


def generate_case(case_id: str, ranges: PhantomRanges, rng: np.random.Generator,
                  max_retries: int = 50) -> PhantomCase:
    """Draw specs until one fits, then rasterize and render."""
    for _ in range(max_retries):
        spec = _draw_spec(ranges, rng)
        try:
            airway, lung, info = generate_tree_mask(spec)
        except PhantomFitError:
            continue
        ct = synthesize_ct(airway, lung, ranges.noise_sigma,
                           seed=int(rng.integers(2**31)))
        return PhantomCase(case_id=case_id, ct=ct, airway=airway, lung=lung,
                           spec=spec, tree=info)
    raise PhantomFitError(
        f"no fitting tree found for {case_id} after {max_retries} draws; "
        f"loosen the ranges or enlarge dims {ranges.dims}"
    )


def make_dataset(n_cases: int, ranges: PhantomRanges = PhantomRanges(),
                 seed: int = 0) -> list[PhantomCase]:
    """Generate ``n_cases`` phantoms with a deterministic 60/20/20 split."""
    if n_cases < 3:
        raise ValueError(f"need at least 3 cases for a split, got {n_cases}")
    cases = [
        generate_case(f"case{i:03d}", ranges, np.random.default_rng([seed, i]))
        for i in range(n_cases)
    ]
    order = np.random.default_rng(seed).permutation(n_cases)
    n_train = int(0.6 * n_cases)
    n_val = int(0.2 * n_cases)
    for rank, idx in enumerate(order):
        if rank < n_train:
            cases[idx].split = "train"
        elif rank < n_train + n_val:
            cases[idx].split = "val"
        else:
            cases[idx].split = "test"
    return cases


def split_cases(cases: list[PhantomCase]) -> dict[str, list[PhantomCase]]:
    out: dict[str, list[PhantomCase]] = {"train": [], "val": [], "test": []}
    for case in cases:
        out[case.split].append(case)
    return out
