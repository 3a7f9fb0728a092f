"""Per-image score records and their append-only JSON-lines store."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

__all__ = ["METHODS", "ScoreRecord", "RecordStore", "ConfigurationError"]

METHODS = ("oracle", "baseline", "all_layers", "first_layers", "last_layers")


class ConfigurationError(ValueError):
    """Inputs needed for a computation are missing or inconsistent."""


@dataclass(frozen=True)
class ScoreRecord:
    source_domain: str
    target_domain: str
    method: str
    case_id: str
    surface_dice: float
    dice: float
    availability: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for key in ("surface_dice", "dice"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{key} {value} outside [0, 1]")
        if self.method == "oracle" and self.source_domain != self.target_domain:
            raise ValueError("oracle records must have source_domain == target_domain")
        if self.method in ("oracle", "baseline") and self.availability is not None:
            raise ValueError(f"{self.method} records carry no availability level")
        if self.method not in ("oracle", "baseline") and self.availability is None:
            raise ValueError(f"{self.method} records need an availability level")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> ScoreRecord:
        return cls(**doc)


class RecordStore:
    """Append-only JSON-lines file of :class:`ScoreRecord`, one per line."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: ScoreRecord) -> None:
        self.extend([record])

    def extend(self, records) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            for rec in records:
                # One write call per record keeps each line atomic for appends.
                fh.write(rec.to_json() + "\n")
                fh.flush()
            os.fsync(fh.fileno())

    def read(self) -> list[ScoreRecord]:
        if not self.path.exists():
            raise FileNotFoundError(f"record store not found: {self.path}")
        out = []
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(ScoreRecord.from_dict(json.loads(line)))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"{self.path}:{lineno}: bad record: {exc}") from exc
        return out

    def __len__(self) -> int:
        return len(self.read()) if self.path.exists() else 0
