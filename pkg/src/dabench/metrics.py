"""Volumetric Dice and Surface Dice at a distance tolerance.

Surfaces are the 6-connected border voxels of a mask (the array edge counts
as background), represented by their voxel-center coordinates in mm. The
all-pairs definition in :func:`surface_dice_bruteforce` is normative;
:func:`surface_dice` uses exact Euclidean distance transforms and must agree
with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Mask

__all__ = [
    "MetricResult",
    "SurfacePointSet",
    "DEFAULT_TOLERANCE_MM",
    "dice",
    "surface_voxels",
    "extract_surface",
    "surface_dice",
    "surface_dice_bruteforce",
]

DEFAULT_TOLERANCE_MM = 1.0

# Absolute slack on distance comparisons; distances between voxel centers
# are sqrt of sums of squared spacings and are never closer than this to a
# tolerance unless they are equal to it.
_DIST_EPS = 1e-9

_SIX_NEIGHBORHOOD = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MetricResult:
    value: float
    metric_name: str
    tolerance_mm: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric_name} value {self.value} outside [0, 1]")

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class SurfacePointSet:
    points: np.ndarray  # (count, 3) in mm

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


def _as_array(m) -> np.ndarray:
    data = m.data if isinstance(m, Mask) else np.asarray(m)
    return data.astype(bool)


def _spacing(m) -> tuple[float, float, float]:
    return m.spacing if isinstance(m, Mask) else (1.0, 1.0, 1.0)


def dice(a: Mask, b: Mask) -> MetricResult:
    """Volumetric Dice ``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a_arr, b_arr = _as_array(a), _as_array(b)
    if a_arr.shape != b_arr.shape:
        raise ValueError(f"mask shapes differ: {a_arr.shape} vs {b_arr.shape}")
    size = int(a_arr.sum()) + int(b_arr.sum())
    if size == 0:
        return MetricResult(1.0, "dice")
    inter = int(np.logical_and(a_arr, b_arr).sum())
    return MetricResult(2.0 * inter / size, "dice")


def surface_voxels(arr: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with a background 6-neighbour."""
    arr = np.asarray(arr, dtype=bool)
    eroded = ndimage.binary_erosion(arr, structure=_SIX_NEIGHBORHOOD, border_value=0)
    return arr & ~eroded


def extract_surface(m: Mask) -> SurfacePointSet:
    border = surface_voxels(_as_array(m))
    idx = np.argwhere(border).astype(np.float64)
    return SurfacePointSet(idx * np.asarray(_spacing(m), dtype=np.float64))


def _check_pair(a, b):
    a_arr, b_arr = _as_array(a), _as_array(b)
    if a_arr.shape != b_arr.shape:
        raise ValueError(f"mask shapes differ: {a_arr.shape} vs {b_arr.shape}")
    if _spacing(a) != _spacing(b):
        raise ValueError(f"mask spacings differ: {_spacing(a)} vs {_spacing(b)}")
    return a_arr, b_arr


def _ratio(matched: int, total: int, tol: float) -> MetricResult:
    return MetricResult(matched / total, "surface_dice", tol)


def surface_dice(a: Mask, b: Mask, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> MetricResult:
    """Surface Dice of ``a`` and ``b`` at ``tolerance_mm``.

    Both surfaces empty scores 1.0, exactly one empty scores 0.0.
    """
    if tolerance_mm < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance_mm}")
    a_arr, b_arr = _check_pair(a, b)
    spacing = _spacing(a)
    sa, sb = surface_voxels(a_arr), surface_voxels(b_arr)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 and nb == 0:
        return _ratio(1, 1, tolerance_mm)
    if na == 0 or nb == 0:
        return _ratio(0, 1, tolerance_mm)
    # Distance from every voxel center to the nearest surface voxel center of
    # the other mask: EDT of the complement of that surface.
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    tol = tolerance_mm + _DIST_EPS
    matched = int((dist_to_b[sa] <= tol).sum()) + int((dist_to_a[sb] <= tol).sum())
    return _ratio(matched, na + nb, tolerance_mm)


def surface_dice_bruteforce(a: Mask, b: Mask, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> MetricResult:
    """All-pairs reference implementation of :func:`surface_dice`."""
    if tolerance_mm < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance_mm}")
    _check_pair(a, b)
    pa = extract_surface(a if isinstance(a, Mask) else Mask(a)).points
    pb = extract_surface(b if isinstance(b, Mask) else Mask(b)).points
    if len(pa) == 0 and len(pb) == 0:
        return _ratio(1, 1, tolerance_mm)
    if len(pa) == 0 or len(pb) == 0:
        return _ratio(0, 1, tolerance_mm)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    tol = tolerance_mm + _DIST_EPS
    matched = int((d.min(axis=1) <= tol).sum()) + int((d.min(axis=0) <= tol).sum())
    return _ratio(matched, len(pa) + len(pb), tolerance_mm)
