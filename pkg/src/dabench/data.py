"""Dataset manifests and slice pools.

A dataset manifest is JSON of the form::

    {"schema_version": 1,
     "domains": ["A", "B"],
     "cases": [{"id": "A_000", "domain": "A",
                "volume_path": "volumes/A_000.json",
                "mask_path": "masks/A_000.json"}, ...]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .models import SegmentationModel, forward
from .volume import Mask, Slice2D, Volume, extract_axial_slice, load_native

__all__ = ["CaseRef", "Dataset", "load_dataset", "slice_pool", "predict_volume"]


@dataclass(frozen=True)
class CaseRef:
    id: str
    domain: str
    volume_path: Path
    mask_path: Path

    def load(self) -> tuple[Volume, Mask]:
        return _load_pair(self.volume_path, self.mask_path)


@lru_cache(maxsize=256)
def _load_pair(volume_path: Path, mask_path: Path) -> tuple[Volume, Mask]:
    volume = load_native(volume_path)
    mask = load_native(mask_path)
    if not isinstance(volume, Volume) or not isinstance(mask, Mask):
        raise ValueError(f"expected an f32 volume and a u8 mask: {volume_path}, {mask_path}")
    if not mask.matches(volume):
        raise ValueError(f"mask {mask_path} does not match volume {volume_path} in shape/spacing")
    return volume, mask


@dataclass(frozen=True)
class Dataset:
    path: Path
    domains: tuple[str, ...]
    cases: tuple[CaseRef, ...]

    def domain_cases(self, domain: str) -> list[CaseRef]:
        if domain not in self.domains:
            raise KeyError(f"unknown domain {domain!r}; known: {list(self.domains)}")
        return [c for c in self.cases if c.domain == domain]

    def case(self, case_id: str) -> CaseRef:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(f"unknown case {case_id!r}")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset manifest not found: {path}") from None
    for key in ("domains", "cases"):
        if key not in doc:
            raise ValueError(f"{path}: dataset manifest lacks field {key!r}")
    root = path.parent
    cases = []
    for entry in doc["cases"]:
        missing = {"id", "domain", "volume_path", "mask_path"} - set(entry)
        if missing:
            raise ValueError(f"{path}: case entry {entry.get('id', '?')} lacks {sorted(missing)}")
        if entry["domain"] not in doc["domains"]:
            raise ValueError(f"{path}: case {entry['id']} has unknown domain {entry['domain']!r}")
        cases.append(CaseRef(
            id=entry["id"],
            domain=entry["domain"],
            volume_path=(root / entry["volume_path"]).resolve(),
            mask_path=(root / entry["mask_path"]).resolve(),
        ))
    ids = [c.id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate case ids")
    return Dataset(path=path.resolve(), domains=tuple(doc["domains"]), cases=tuple(cases))


def slice_pool(cases, slice_indices=None) -> list[Slice2D]:
    """Labelled axial slices of ``cases``.

    ``slice_indices`` optionally maps case id to the axial indices to keep;
    by default every slice is used.
    """
    pool = []
    for case in cases:
        volume, mask = case.load()
        indices = range(volume.shape[2])
        if slice_indices is not None:
            indices = slice_indices[case.id]
        pool.extend(extract_axial_slice(volume, int(z), mask) for z in indices)
    return pool


def _pad_for(n: int, factor: int) -> tuple[int, int]:
    extra = (-n) % factor
    return extra // 2, extra - extra // 2


def predict_volume(model: SegmentationModel, volume: Volume, batch_size: int = 32) -> Mask:
    """Slice-wise segmentation of ``volume`` (logit > 0 is foreground)."""
    data = volume.data
    factor = 2 ** (model.spec.depth - 1)
    px, py = _pad_for(data.shape[0], factor), _pad_for(data.shape[1], factor)
    slices = np.moveaxis(data, 2, 0)
    padded = np.pad(slices, ((0, 0), px, py))
    out = np.empty(slices.shape, dtype=np.uint8)
    for start in range(0, len(slices), batch_size):
        logits = forward(model, padded[start:start + batch_size])[:, 0]
        logits = logits[:, px[0]:px[0] + data.shape[0], py[0]:py[0] + data.shape[1]]
        out[start:start + batch_size] = (logits > 0).to(torch.uint8).numpy()
    return Mask(np.moveaxis(out, 0, 2), volume.spacing)
