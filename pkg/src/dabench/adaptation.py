"""Supervised domain adaptation by layer-selective fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import CaseRef, slice_pool
from .models import SegmentationModel, checkpoint_hash, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainHistory, train

__all__ = [
    "STRATEGIES",
    "STANDARD_FRACTIONS",
    "AvailabilityLevel",
    "apply_strategy",
    "trainable_ids",
    "subsample_slices",
    "select_target_slices",
    "finetune",
    "FinetuneResult",
]

log = logging.getLogger(__name__)

STRATEGIES = ("all_layers", "first_layers", "last_layers")
_STRATEGY_GROUP = {"all_layers": "all", "first_layers": "first", "last_layers": "last"}
STANDARD_FRACTIONS = tuple(Fraction(1, k) for k in (2, 3, 6, 12, 24, 36, 48))


@dataclass(frozen=True)
class AvailabilityLevel:
    """Amount of annotated target data: whole scans, or a strided fraction of one scan."""

    kind: str
    scans: int = 1
    fraction: Fraction = Fraction(1)

    def __post_init__(self):
        if self.kind not in ("scans", "fraction"):
            raise ValueError(f"availability kind must be 'scans' or 'fraction', got {self.kind!r}")
        if self.kind == "scans" and self.scans < 1:
            raise ValueError(f"scans must be >= 1, got {self.scans}")
        frac = Fraction(self.fraction)
        if self.kind == "fraction" and not 0 < frac <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {frac}")
        object.__setattr__(self, "fraction", frac)

    @classmethod
    def of_scans(cls, n: int) -> AvailabilityLevel:
        return cls("scans", scans=n)

    @classmethod
    def of_fraction(cls, frac) -> AvailabilityLevel:
        return cls("fraction", fraction=Fraction(frac))

    @classmethod
    def parse(cls, text) -> AvailabilityLevel:
        """Parse ``"3 scans"``, ``"1 scan"``, ``"1/12"`` or a dict form."""
        if isinstance(text, AvailabilityLevel):
            return text
        if isinstance(text, dict):
            if text.get("kind") == "scans":
                return cls.of_scans(int(text["scans"]))
            if text.get("kind") == "fraction":
                return cls.of_fraction(Fraction(str(text["fraction"])))
            raise ValueError(f"invalid availability level {text!r}")
        s = str(text).strip().lower()
        parts = s.split()
        if len(parts) == 2 and parts[1] in ("scan", "scans"):
            return cls.of_scans(int(parts[0]))
        try:
            return cls.of_fraction(Fraction(s))
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"invalid availability level {text!r}") from None

    @property
    def label(self) -> str:
        if self.kind == "scans":
            return f"{self.scans} scan" + ("s" if self.scans != 1 else "")
        return str(self.fraction)

    @property
    def stride(self) -> int:
        return max(1, round(1 / self.fraction))

    def scarcity(self) -> float:
        """Amount of data in scan units; used to order levels."""
        return float(self.scans) if self.kind == "scans" else float(self.fraction)

    def to_json(self):
        if self.kind == "scans":
            return {"kind": "scans", "scans": self.scans}
        return {"kind": "fraction", "fraction": str(self.fraction)}


def trainable_ids(model: SegmentationModel) -> list[str]:
    return [name for name, p in model.named_parameters() if p.requires_grad]


def apply_strategy(model: SegmentationModel, strategy: str) -> list[str]:
    """Mark parameters trainable per ``strategy``; returns the trainable ids."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    group_name = _STRATEGY_GROUP[strategy]
    group = getattr(model, "layer_groups", {}).get(group_name)
    if group is None:
        raise ValueError(f"model has no layer group {group_name!r} required by {strategy}")
    keep = set(group.parameter_ids)
    for name, p in model.named_parameters():
        p.requires_grad_(name in keep)
    return trainable_ids(model)


def subsample_slices(n_total: int, level: AvailabilityLevel) -> list[int]:
    """Axial indices kept at ``level``: ``0, k, 2k, ...`` for a ``1/k`` fraction."""
    if n_total < 1:
        raise ValueError(f"n_total must be >= 1, got {n_total}")
    if level.kind == "scans":
        return list(range(n_total))
    return list(range(0, n_total, level.stride))


def select_target_slices(pool_cases: list[CaseRef], level: AvailabilityLevel, rng: np.random.Generator):
    """Pick the scans and slice indices available for fine-tuning.

    Returns ``(chosen_cases, {case_id: indices})``. Fraction levels draw one
    scan uniformly at random.
    """
    if not pool_cases:
        raise ValueError("no target scans available for fine-tuning")
    if level.kind == "scans":
        if level.scans > len(pool_cases):
            raise ValueError(f"level {level.label!r} needs {level.scans} target scans, only {len(pool_cases)} available")
        chosen = pool_cases[:level.scans] if level.scans == len(pool_cases) else [
            pool_cases[i] for i in sorted(rng.choice(len(pool_cases), size=level.scans, replace=False))
        ]
    else:
        chosen = [pool_cases[int(rng.integers(0, len(pool_cases)))]]
    indices = {}
    for case in chosen:
        volume, _ = case.load()
        indices[case.id] = subsample_slices(volume.shape[2], level)
    return chosen, indices


@dataclass
class FinetuneResult:
    model: SegmentationModel
    history: TrainHistory
    provenance: dict


def finetune(
    pretrained,
    target_cases: list[CaseRef],
    strategy: str,
    level: AvailabilityLevel,
    config: TrainConfig,
    *,
    source_domain: str = "",
    target_domain: str = "",
    out_path=None,
) -> FinetuneResult:
    """Fine-tune a source checkpoint on subsampled target data.

    ``pretrained`` is a checkpoint path or a model (which is copied).
    ``target_cases`` is the pool of annotated target scans. When
    ``out_path`` is given, the adapted checkpoint is written there with its
    provenance JSON next to it (``<out_path>.provenance.json``).
    """
    if isinstance(pretrained, (str, Path)):
        model, _ = load_checkpoint(pretrained)
        base_hash = checkpoint_hash(pretrained)
    else:
        model = copy.deepcopy(pretrained)
        base_hash = None
    if config.phase != "finetune":
        config = replace(config, phase="finetune")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF7]))
    chosen, indices = select_target_slices(list(target_cases), level, rng)
    pool = slice_pool(chosen, indices)
    if not pool:
        raise ValueError(f"availability level {level.label!r} leaves no target slices")
    apply_strategy(model, strategy)
    model, history = train(model, pool, config)
    provenance = {
        "source_domain": source_domain,
        "target_domain": target_domain,
        "strategy": strategy,
        "availability": level.to_json(),
        "seed": config.seed,
        "base_checkpoint_hash": base_hash,
        "target_scans": [c.id for c in chosen],
        "slice_indices": {k: list(v) for k, v in indices.items()},
    }
    if out_path is not None:
        out_path = Path(out_path)
        save_checkpoint(model, out_path, extra={"provenance": provenance})
        prov_path = out_path.with_name(out_path.name + ".provenance.json")
        prov_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    for p in model.parameters():
        p.requires_grad_(True)
    return FinetuneResult(model, history, provenance)
