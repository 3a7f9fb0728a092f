"""Volume and mask containers, preprocessing and slice/crop extraction.

Array convention: ``data[x, y, z]`` with the third axis axial. Intensity
volumes are stored as float32, masks as uint8.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "Mask",
    "Slice2D",
    "resample_to_isotropic",
    "resample_mask",
    "rescale_intensity",
    "extract_axial_slice",
    "random_crop",
    "save_native",
    "load_native",
]


def _check_spacing(spacing, n: int = 3) -> tuple[float, ...]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != n:
        raise ValueError(f"spacing must have {n} components, got {len(spacing)}")
    for s in spacing:
        if not np.isfinite(s) or s <= 0:
            raise ValueError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype != np.bool_ and not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def matches(self, volume: Volume) -> bool:
        return self.shape == volume.shape and self.spacing == volume.spacing


@dataclass(frozen=True)
class Slice2D:
    data: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    source_index: int = 0
    label: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"slice data must be a non-empty 2D array, got shape {data.shape}")
        if self.label is not None and np.shape(self.label) != data.shape:
            raise ValueError("slice label must have the same shape as its data")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_spacing", _check_spacing(self.pixel_spacing, 2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _target_shape(shape, spacing, target_spacing) -> tuple[int, ...]:
    return tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _sample_grid(shape, spacing, target_shape, target_spacing) -> list[np.ndarray]:
    # Voxel centers of the output grid mapped into input index space. Both
    # grids share the physical origin at the corner of voxel 0.
    coords = []
    for n_out, s_in, t in zip(target_shape, spacing, target_spacing):
        centers_mm = (np.arange(n_out, dtype=np.float64) + 0.5) * t
        coords.append(centers_mm / s_in - 0.5)
    return coords


def _resample(data, spacing, target_spacing, order: int) -> np.ndarray:
    target_shape = _target_shape(data.shape, spacing, target_spacing)
    if target_shape == data.shape and tuple(spacing) == tuple(target_spacing):
        return data.copy()
    axes = _sample_grid(data.shape, spacing, target_shape, target_spacing)
    grid = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(
        data, grid, order=order, mode="nearest", prefilter=False
    )


def resample_to_isotropic(v: Volume, target_spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Trilinearly resample ``v`` onto a grid with ``target_spacing``.

    The output shape along each axis is ``round(n * spacing / target)``
    (at least 1). Samples outside the input extent are clamped to the edge.
    """
    target_spacing = _check_spacing(target_spacing)
    out = _resample(v.data.astype(np.float64), v.spacing, target_spacing, order=1)
    return Volume(out.astype(np.float32), target_spacing)


def resample_mask(m: Mask, target_spacing=(1.0, 1.0, 1.0)) -> Mask:
    """Nearest-neighbour counterpart of :func:`resample_to_isotropic`."""
    target_spacing = _check_spacing(target_spacing)
    shape = _target_shape(m.shape, m.spacing, target_spacing)
    if shape == m.shape and m.spacing == target_spacing:
        return Mask(m.data.copy(), target_spacing)
    axes = _sample_grid(m.shape, m.spacing, shape, target_spacing)
    idx = [np.clip(np.floor(a + 0.5).astype(np.intp), 0, n - 1) for a, n in zip(axes, m.shape)]
    return Mask(m.data[np.ix_(*idx)], target_spacing)


def rescale_intensity(v: Volume) -> Volume:
    """Min-max scale intensities to [0, 1]; a constant volume maps to zeros."""
    data = v.data.astype(np.float64)
    if not np.isfinite(data).all():
        raise ValueError("volume contains NaN or Inf values")
    lo, hi = data.min(), data.max()
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing)


def extract_axial_slice(v: Volume | Mask, index: int, mask: Mask | None = None) -> Slice2D:
    """Return the axial section ``v.data[:, :, index]``.

    If ``mask`` is given, the matching mask section is attached as the
    slice label.
    """
    nz = v.shape[2]
    if not 0 <= index < nz:
        raise IndexError(f"axial index {index} out of range [0, {nz})")
    label = None
    if mask is not None:
        if mask.shape != v.shape:
            raise ValueError(f"mask shape {mask.shape} does not match volume shape {v.shape}")
        label = mask.data[:, :, index].copy()
    return Slice2D(
        v.data[:, :, index].copy(),
        pixel_spacing=v.spacing[:2],
        source_index=int(index),
        label=label,
    )


def _pad_to(arr: np.ndarray, size) -> np.ndarray:
    pads = []
    for n, target in zip(arr.shape, size):
        extra = max(0, target - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(p for pair in pads for p in pair):
        return arr
    return np.pad(arr, pads, mode="constant")


def random_crop(s: Slice2D, size, rng: np.random.Generator) -> Slice2D:
    """Crop ``s`` to ``size`` at a uniformly drawn offset.

    Slices smaller than ``size`` along an axis are symmetrically zero-padded
    first (the extra pixel of an odd pad goes to the far side).
    """
    h, w = (int(x) for x in size)
    if h < 1 or w < 1:
        raise ValueError(f"crop size must be >= 1, got {size}")
    data = _pad_to(s.data, (h, w))
    label = None if s.label is None else _pad_to(s.label, (h, w))
    ox = int(rng.integers(0, data.shape[0] - h + 1))
    oy = int(rng.integers(0, data.shape[1] - w + 1))
    return Slice2D(
        data[ox:ox + h, oy:oy + w].copy(),
        pixel_spacing=s.pixel_spacing,
        source_index=s.source_index,
        label=None if label is None else label[ox:ox + h, oy:oy + w].copy(),
    )


_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def save_native(obj: Volume | Mask, path) -> Path:
    """Write ``obj`` as ``<path>.json`` header plus ``<path>.raw`` payload.

    Returns the header path. ``path`` may be given with or without the
    ``.json`` suffix.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    dtype = "u8" if isinstance(obj, Mask) else "f32"
    raw = path.with_suffix(".raw")
    header = path.with_suffix(".json")
    header_doc = {
        "shape": list(obj.shape),
        "spacing": list(obj.spacing),
        "dtype": dtype,
        "order": "C",
        "data_file": raw.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(obj.data, dtype=_DTYPES[dtype]).tobytes(order="C"))
    header.write_text(json.dumps(header_doc, indent=2, sort_keys=True) + "\n")
    return header


def load_native(path) -> Volume | Mask:
    """Read a native-format volume (``f32``) or mask (``u8``)."""
    path = Path(path)
    header = path if path.suffix == ".json" else path.with_suffix(".json")
    try:
        doc = json.loads(header.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"volume header not found: {header}") from None
    if doc.get("order", "C") != "C":
        raise ValueError(f"{header}: only C order is supported")
    dtype = doc["dtype"]
    if dtype not in _DTYPES:
        raise ValueError(f"{header}: unsupported dtype {dtype!r}")
    raw = header.parent / doc.get("data_file", header.with_suffix(".raw").name)
    shape = tuple(int(n) for n in doc["shape"])
    data = np.frombuffer(raw.read_bytes(), dtype=_DTYPES[dtype])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{raw}: payload has {data.size} elements, header says {shape}")
    data = data.reshape(shape)
    if dtype == "u8":
        return Mask(data.copy(), tuple(doc["spacing"]))
    return Volume(data.astype(np.float32), tuple(doc["spacing"]))
