"""Oracle cross-validation, baseline transfer and per-image scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from ..data import CaseRef, predict_volume, slice_pool
from ..metrics import DEFAULT_TOLERANCE_MM, dice, surface_dice
from ..models import ModelSpec, SegmentationModel, build_model
from ..training import TrainConfig, train
from .records import ConfigurationError, ScoreRecord

__all__ = [
    "fold_assignment",
    "split_target_cases",
    "score_cases",
    "train_source_model",
    "cross_validate_oracle",
    "TransferMatrix",
    "build_transfer_matrix",
]

log = logging.getLogger(__name__)


def fold_assignment(case_ids, k: int = 3, seed: int = 0) -> list[list[str]]:
    """Seeded split of ``case_ids`` into ``k`` disjoint folds of near-equal size."""
    case_ids = list(case_ids)
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(case_ids) < k:
        raise ValueError(f"cannot split {len(case_ids)} cases into {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC5]))
    order = rng.permutation(len(case_ids))
    return [sorted(case_ids[i] for i in part) for part in np.array_split(order, k)]


def split_target_cases(cases: list[CaseRef], n_adapt: int, seed: int = 0):
    """Seeded split of a domain into an adaptation pool and test cases."""
    if n_adapt >= len(cases):
        raise ValueError(f"domain has {len(cases)} cases; cannot hold out {n_adapt} for adaptation")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A]))
    order = rng.permutation(len(cases))
    adapt = sorted((cases[i] for i in order[:n_adapt]), key=lambda c: c.id)
    test = sorted((cases[i] for i in order[n_adapt:]), key=lambda c: c.id)
    return adapt, test


def score_cases(
    model: SegmentationModel,
    cases: list[CaseRef],
    *,
    source_domain: str,
    target_domain: str,
    method: str,
    availability: str | None = None,
    seed: int = 0,
    tolerance_mm: float = DEFAULT_TOLERANCE_MM,
) -> list[ScoreRecord]:
    records = []
    for case in cases:
        volume, mask = case.load()
        pred = predict_volume(model, volume)
        records.append(ScoreRecord(
            source_domain=source_domain,
            target_domain=target_domain,
            method=method,
            case_id=case.id,
            surface_dice=surface_dice(pred, mask, tolerance_mm).value,
            dice=dice(pred, mask).value,
            availability=availability,
            seed=seed,
        ))
    return records


def train_source_model(cases: list[CaseRef], spec: ModelSpec, config: TrainConfig) -> SegmentationModel:
    model = build_model(spec, seed=config.seed)
    model, _ = train(model, slice_pool(cases), config)
    return model


def cross_validate_oracle(
    cases: list[CaseRef],
    spec: ModelSpec,
    config: TrainConfig,
    k: int = 3,
    *,
    tolerance_mm: float = DEFAULT_TOLERANCE_MM,
) -> tuple[list[ScoreRecord], list[list[str]]]:
    """k-fold oracle: every case is scored once by a model not trained on it.

    Returns the records (in case-id order) and the fold assignment.
    """
    if len(cases) < k:
        raise ValueError(f"oracle needs at least {k} cases, got {len(cases)}")
    domains = {c.domain for c in cases}
    if len(domains) != 1:
        raise ValueError(f"oracle cases must share one domain, got {sorted(domains)}")
    domain = domains.pop()
    by_id = {c.id: c for c in cases}
    folds = fold_assignment(sorted(by_id), k, config.seed)
    records = []
    for i, test_ids in enumerate(folds):
        train_cases = [by_id[cid] for cid in sorted(by_id) if cid not in test_ids]
        fold_cfg = replace(config, seed=config.seed + i)
        model = train_source_model(train_cases, spec, fold_cfg)
        records += score_cases(
            model, [by_id[cid] for cid in test_ids],
            source_domain=domain, target_domain=domain, method="oracle",
            seed=config.seed, tolerance_mm=tolerance_mm,
        )
    records.sort(key=lambda r: r.case_id)
    return records, folds


@dataclass(frozen=True)
class TransferMatrix:
    """Mean and std of surface Dice indexed ``[source][target]``.

    Diagonal cells come from oracle records, off-diagonal from baseline
    records.
    """

    domains: tuple[str, ...]
    mean: dict
    std: dict
    count: dict

    def cell(self, source: str, target: str) -> tuple[float, float]:
        return self.mean[source][target], self.std[source][target]


def build_transfer_matrix(records, domains, case_filter=None) -> TransferMatrix:
    """Aggregate oracle/baseline records into a transfer matrix.

    ``case_filter`` optionally maps a target domain to the case ids to
    include. Raises :class:`ConfigurationError` naming every source domain
    with a missing cell.
    """
    domains = tuple(domains)
    values: dict = {s: {t: [] for t in domains} for s in domains}
    for rec in records:
        if rec.source_domain not in values or rec.target_domain not in values:
            continue
        if case_filter is not None and rec.case_id not in case_filter.get(rec.target_domain, ()):
            continue
        diagonal = rec.source_domain == rec.target_domain
        if (diagonal and rec.method == "oracle") or (not diagonal and rec.method == "baseline"):
            values[rec.source_domain][rec.target_domain].append(rec.surface_dice)
    missing = sorted({s for s in domains for t in domains if not values[s][t]})
    if missing:
        cells = [f"{s}->{t}" for s in domains for t in domains if not values[s][t]]
        raise ConfigurationError(f"transfer matrix incomplete for source domains {missing}: {cells}")
    mean = {s: {t: float(np.mean(values[s][t])) for t in domains} for s in domains}
    std = {s: {t: float(np.std(values[s][t])) for t in domains} for s in domains}
    count = {s: {t: len(values[s][t]) for t in domains} for s in domains}
    return TransferMatrix(domains, mean, std, count)
