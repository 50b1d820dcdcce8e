"""Volumes, slices and label maps: types, file formats and preprocessing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, LengthError, ValidationError

SVOL_MAGIC = b"SVOL"
SLAB_MAGIC = b"SLAB"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1

_SVOL_HEADER = struct.Struct("<4sHH3I3f")  # 32 bytes
_SLAB_HEADER = struct.Struct("<4sHH3I")  # 20 bytes


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D float32 intensity grid stored slice-major as ``data[z, y, x]``.

    Args:
        data: array of shape ``(D, H, W)``; converted to float32.
        spacing: voxel size in mm along each axis.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        # spacing is held at float32 precision, as stored on disk
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def equals(self, other: Volume) -> bool:
        """Bit-level equality of data and spacing."""
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Slice:
    """A 2D section ``data[y, x]`` of a volume."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValidationError(f"slice data must be a non-empty 2D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer segmentation aligned with a volume; label 0 is background."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValidationError(f"label data must be a non-empty 3D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError("labels must be integers")
        k = int(self.num_classes)
        if k < 2 or k > 65535:
            raise ValidationError(f"num_classes must be in [2, 65535], got {k}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint16, copy=True)))
        object.__setattr__(self, "num_classes", k)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_classes)

    def equals(self, other: LabelMap) -> bool:
        return (
            self.num_classes == other.num_classes
            and self.dims == other.dims
            and self.labels.tobytes() == other.labels.tobytes()
        )


def check_axis(axis: int) -> int:
    if axis not in (0, 1, 2):
        raise ValidationError(f"slice axis must be 0, 1 or 2, got {axis!r}")
    return int(axis)


# ---------------------------------------------------------------- file I/O


def save_volume(v: Volume, path) -> None:
    """Write ``v`` in the SVOL format (32-byte header + float32 voxels)."""
    if not v.is_finite():
        raise ValidationError(f"refusing to write non-finite voxels to {path}")
    header = _SVOL_HEADER.pack(SVOL_MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, *v.dims, *v.spacing)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write volume {path}: {exc}") from exc


def load_volume(path) -> Volume:
    """Read an SVOL file written by :func:`save_volume`."""
    raw = Path(path).read_bytes()
    if len(raw) < _SVOL_HEADER.size or raw[:4] != SVOL_MAGIC:
        raise FormatError(f"{path}: not an SVOL file (bad magic)")
    magic, version, dtype, d, h, w, sd, sh, sw = _SVOL_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION or dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    n = d * h * w
    expected = _SVOL_HEADER.size + 4 * n
    if len(raw) != expected:
        raise LengthError(f"{path}: payload is {len(raw) - _SVOL_HEADER.size} bytes, header implies {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_SVOL_HEADER.size).reshape(d, h, w)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: volume contains non-finite voxels")
    return Volume(data, (sd, sh, sw))


def save_labels(m: LabelMap, path) -> None:
    header = _SLAB_HEADER.pack(SLAB_MAGIC, FORMAT_VERSION, m.num_classes, *m.dims)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(m.labels, dtype="<u2").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write label map {path}: {exc}") from exc


def load_labels(path) -> LabelMap:
    raw = Path(path).read_bytes()
    if len(raw) < _SLAB_HEADER.size or raw[:4] != SLAB_MAGIC:
        raise FormatError(f"{path}: not a SLAB file (bad magic)")
    magic, version, k, d, h, w = _SLAB_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = d * h * w
    if len(raw) != _SLAB_HEADER.size + 2 * n:
        raise LengthError(f"{path}: payload length does not match dims {d}x{h}x{w}")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=_SLAB_HEADER.size).reshape(d, h, w)
    return LabelMap(labels, k)


# ----------------------------------------------------------- preprocessing


def nearest_rank(sorted_values: np.ndarray, pct: float):
    """Nearest-rank percentile: the sorted value at 1-based rank ceil(p/100 * n)."""
    n = sorted_values.size
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def percentile_normalize(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Map the lo/hi nearest-rank percentiles to 0 and 1, clipping outside.

    A volume whose two percentile values coincide maps to all zeros.
    """
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValidationError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    values = np.sort(v.data, axis=None).astype(np.float64)
    if values.size == 0:
        raise ValidationError("cannot normalize an empty volume")
    a = float(nearest_rank(values, lo_pct))
    b = float(nearest_rank(values, hi_pct))
    if b == a:
        return Volume(np.zeros(v.dims, np.float32), v.spacing)
    out = np.clip((v.data.astype(np.float64) - a) / (b - a), 0.0, 1.0)
    return Volume(out, v.spacing)


def trilinear_sample(data: np.ndarray, coords: np.ndarray, *, grad: bool = False):
    """Sample ``data`` at fractional voxel coordinates with zero padding.

    Args:
        data: 3D array.
        coords: array of shape ``(3, n)`` holding (z, y, x) voxel coordinates.
        grad: also return the spatial gradient of the interpolant.

    Returns:
        ``values`` of shape ``(n,)``, and with ``grad=True`` a ``(3, n)`` array of
        partial derivatives. Voxels outside the grid contribute zero, so the
        interpolant falls linearly to zero within one voxel of the border.
    """
    data = np.asarray(data, dtype=np.float64)
    c = np.asarray(coords, dtype=np.float64)
    base = np.floor(c)
    frac = c - base
    base = base.astype(np.int64)
    shape = data.shape
    flat = data.ravel()

    # corner values v[dz][dy][dx]
    corners = {}
    for dz in (0, 1):
        iz = base[0] + dz
        okz = (iz >= 0) & (iz < shape[0])
        for dy in (0, 1):
            iy = base[1] + dy
            oky = okz & (iy >= 0) & (iy < shape[1])
            for dx in (0, 1):
                ix = base[2] + dx
                ok = oky & (ix >= 0) & (ix < shape[2])
                idx = (np.clip(iz, 0, shape[0] - 1) * shape[1] + np.clip(iy, 0, shape[1] - 1)) * shape[2] + np.clip(
                    ix, 0, shape[2] - 1
                )
                corners[dz, dy, dx] = np.where(ok, flat[idx], 0.0)

    fz, fy, fx = frac
    gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
    # interpolate along x, then y, then z
    c00 = corners[0, 0, 0] * gx + corners[0, 0, 1] * fx
    c01 = corners[0, 1, 0] * gx + corners[0, 1, 1] * fx
    c10 = corners[1, 0, 0] * gx + corners[1, 0, 1] * fx
    c11 = corners[1, 1, 0] * gx + corners[1, 1, 1] * fx
    c0 = c00 * gy + c01 * fy
    c1 = c10 * gy + c11 * fy
    values = c0 * gz + c1 * fz
    if not grad:
        return values

    dz_ = c1 - c0
    dy_ = (c01 - c00) * gz + (c11 - c10) * fz
    d00 = corners[0, 0, 1] - corners[0, 0, 0]
    d01 = corners[0, 1, 1] - corners[0, 1, 0]
    d10 = corners[1, 0, 1] - corners[1, 0, 0]
    d11 = corners[1, 1, 1] - corners[1, 1, 0]
    dx_ = (d00 * gy + d01 * fy) * gz + (d10 * gy + d11 * fy) * fz
    return values, np.stack([dz_, dy_, dx_])


def _aligned_axis(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resample_volume(v: Volume, new_dims: Sequence[int]) -> Volume:
    """Trilinear resampling with corner-aligned coordinates.

    Spacing is scaled by ``dims / new_dims`` so the field of view is unchanged.
    """
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValidationError(f"new_dims must be three integers >= 1, got {new_dims}")
    axes = [_aligned_axis(n_in, n_out) for n_in, n_out in zip(v.dims, new_dims)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    # clamp so the last sample does not touch the zero padding
    for k in range(3):
        coords[k] = np.minimum(coords[k], v.dims[k] - 1)
    values = trilinear_sample(v.data, coords).reshape(new_dims)
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.dims, new_dims))
    return Volume(values, spacing)


def resample_labels(m: LabelMap, new_dims: Sequence[int]) -> LabelMap:
    """Nearest-neighbour resampling of a label map on the corner-aligned grid."""
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValidationError(f"new_dims must be three integers >= 1, got {new_dims}")
    idx = [np.clip(np.rint(_aligned_axis(a, b)).astype(np.int64), 0, a - 1) for a, b in zip(m.dims, new_dims)]
    return LabelMap(m.labels[np.ix_(*idx)], m.num_classes)


def extract_slices(v: Volume, axis: int = 0) -> list[Slice]:
    """Split ``v`` into its ``dims[axis]`` 2D sections, in index order."""
    axis = check_axis(axis)
    moved = np.moveaxis(v.data, axis, 0)
    return [Slice(moved[t]) for t in range(moved.shape[0])]


def assemble_volume(slices: Sequence[Slice], spacing=(1.0, 1.0, 1.0), axis: int = 0) -> Volume:
    """Stack slices along ``axis``; inverse of :func:`extract_slices`."""
    axis = check_axis(axis)
    if len(slices) == 0:
        raise ValidationError("cannot assemble a volume from zero slices")
    dims = {s.dims for s in slices}
    if len(dims) != 1:
        raise ValidationError(f"slices have mismatched dims: {sorted(dims)}")
    stacked = np.stack([s.data for s in slices], axis=0)
    return Volume(np.moveaxis(stacked, 0, axis), spacing)


def slice_ncc(v: Volume, axis: int = 0) -> float:
    """Mean normalized cross-correlation between adjacent slices along ``axis``.

    Pairs where either slice is constant are skipped; returns nan if none remain.
    """
    moved = np.moveaxis(v.data.astype(np.float64), check_axis(axis), 0)
    flat = moved.reshape(moved.shape[0], -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scores = []
    for t in range(flat.shape[0] - 1):
        denom = norms[t] * norms[t + 1]
        if denom > 0:
            scores.append(float(centered[t] @ centered[t + 1] / denom))
    return float(np.mean(scores)) if scores else float("nan")
