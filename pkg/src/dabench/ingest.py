"""Ingestion of external volumes into the native format.

An adapter turns one external file into ``(array, spacing)``. Built-in
adapters handle ``.npy`` arrays (spacing supplied by the caller), native
``.json`` headers, and NIfTI files when ``nibabel`` is importable. Register
further readers with :func:`register_adapter`.

Ingestion permutes the designated axial axis to the last position,
resamples to 1 mm isotropic (trilinear for images, nearest for masks) and
rescales image intensities to [0, 1].
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Callable

import numpy as np

from .volume import (
    Mask,
    Volume,
    load_native,
    resample_mask,
    resample_to_isotropic,
    rescale_intensity,
    save_native,
)

__all__ = ["register_adapter", "read_external", "preprocess_pair", "ingest_cases"]

Reader = Callable[[Path], tuple[np.ndarray, tuple[float, float, float] | None]]
_ADAPTERS: dict[str, Reader] = {}


def register_adapter(suffix: str, reader: Reader) -> None:
    _ADAPTERS[suffix.lower()] = reader


def _read_npy(path: Path):
    return np.load(path, allow_pickle=False), None


def _read_native(path: Path):
    obj = load_native(path)
    return obj.data, obj.spacing


def _read_nifti(path: Path):
    try:
        import nibabel
    except ImportError:
        raise RuntimeError(f"reading {path} needs the optional 'nibabel' package") from None
    img = nibabel.load(str(path))
    return np.asarray(img.dataobj), tuple(float(z) for z in img.header.get_zooms()[:3])


register_adapter(".npy", _read_npy)
register_adapter(".json", _read_native)
register_adapter(".nii", _read_nifti)
register_adapter(".nii.gz", _read_nifti)


def read_external(path, spacing=None):
    path = Path(path)
    name = path.name.lower()
    for suffix in sorted(_ADAPTERS, key=len, reverse=True):
        if name.endswith(suffix):
            data, file_spacing = _ADAPTERS[suffix](path)
            break
    else:
        raise ValueError(f"no ingestion adapter for {path.name}; known suffixes: {sorted(_ADAPTERS)}")
    spacing = spacing or file_spacing
    if spacing is None:
        raise ValueError(f"{path}: voxel spacing unknown; pass it explicitly")
    return np.asarray(data), tuple(float(s) for s in spacing)


def preprocess_pair(image: np.ndarray, mask: np.ndarray, spacing, axial_axis: int = 2,
                    target_spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, Mask]:
    order = [a for a in range(3) if a != axial_axis] + [axial_axis]
    image = np.transpose(image, order)
    mask = np.transpose(mask, order)
    spacing = tuple(spacing[a] for a in order)
    volume = rescale_intensity(resample_to_isotropic(Volume(image.astype(np.float32), spacing), target_spacing))
    m = resample_mask(Mask((mask > 0).astype(np.uint8), spacing), target_spacing)
    return volume, m


def ingest_cases(cases_csv, out_dir, axial_axis: int = 2) -> Path:
    """Convert the cases listed in ``cases_csv`` and write a dataset manifest.

    The CSV needs columns ``id, domain, image, mask`` and may carry
    ``spacing`` as ``"sx sy sz"``. Relative paths resolve against the CSV.
    """
    cases_csv = Path(cases_csv)
    out_dir = Path(out_dir)
    with cases_csv.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{cases_csv}: no cases listed")
    missing = {"id", "domain", "image", "mask"} - set(rows[0])
    if missing:
        raise ValueError(f"{cases_csv}: missing columns {sorted(missing)}")
    domains, entries = [], []
    for row in rows:
        spacing = tuple(float(s) for s in row["spacing"].split()) if row.get("spacing") else None
        img, sp = read_external(cases_csv.parent / row["image"], spacing)
        msk, _ = read_external(cases_csv.parent / row["mask"], sp)
        volume, mask = preprocess_pair(img, msk, sp, axial_axis)
        vol_path = save_native(volume, out_dir / "volumes" / row["id"])
        mask_path = save_native(mask, out_dir / "masks" / row["id"])
        if row["domain"] not in domains:
            domains.append(row["domain"])
        entries.append({
            "id": row["id"],
            "domain": row["domain"],
            "volume_path": vol_path.relative_to(out_dir).as_posix(),
            "mask_path": mask_path.relative_to(out_dir).as_posix(),
        })
    manifest = {"schema_version": 1, "generator": {"kind": "ingest", "source": cases_csv.name},
                "domains": domains, "cases": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
