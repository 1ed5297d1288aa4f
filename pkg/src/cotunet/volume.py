"""Dense 3D volumes with voxel spacing, plus the VOL1 on-disk format.

A volume is stored as a (D, H, W) array together with its voxel spacing in
millimetres. On disk a volume is a pair of files sharing a base path:
``<base>.json`` holds the header and ``<base>.raw`` the row-major payload
(W fastest). Supported payload dtypes are ``f32`` and ``u8``; byte order is
little-endian. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a VOL1 header or payload is malformed."""


@dataclass
class Volume:
    """A dense scalar grid: CT intensities, probabilities, or a binary mask."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def astype_mask(self) -> np.ndarray:
        """View the data as a boolean foreground mask."""
        return self.data.astype(bool)

    def like(self, data: np.ndarray) -> "Volume":
        """New volume with the same spacing."""
        return Volume(data, self.spacing)


def _paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".raw")


def write_volume(vol: Volume, path) -> None:
    """Write ``vol`` to ``<path>.json`` + ``<path>.raw``.

    Float data is stored as f32, boolean or unsigned 8-bit data as u8.
    """
    header_path, raw_path = _paths(path)
    data = vol.data
    if data.dtype == np.bool_ or data.dtype == np.uint8:
        dtype_name = "u8"
    elif np.issubdtype(data.dtype, np.floating):
        dtype_name = "f32"
    else:
        raise VolumeFormatError(f"unsupported volume dtype {data.dtype}")
    payload = np.ascontiguousarray(data.astype(_DTYPES[dtype_name], copy=False))
    header = {
        "dims": [int(d) for d in vol.dims],
        "spacing_mm": [float(s) for s in vol.spacing],
        "dtype": dtype_name,
        "byte_order": "little",
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(payload.tobytes())


def read_volume(path) -> Volume:
    """Read a VOL1 volume, validating header and payload length."""
    header_path, raw_path = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"bad VOL1 header {header_path}: {e}") from e
    for key in ("dims", "spacing_mm", "dtype", "byte_order"):
        if key not in header:
            raise VolumeFormatError(f"VOL1 header {header_path} missing key '{key}'")
    if header["byte_order"] != "little":
        raise VolumeFormatError(f"unsupported byte order {header['byte_order']!r}")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"unknown VOL1 dtype {dtype_name!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or any(d < 0 for d in dims):
        raise VolumeFormatError(f"bad dims {header['dims']} in {header_path}")
    dtype = _DTYPES[dtype_name]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    raw = raw_path.read_bytes()
    if len(raw) != expected:
        raise VolumeFormatError(
            f"payload length mismatch for {raw_path}: expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return Volume(data, tuple(float(s) for s in header["spacing_mm"]))
