"""Gap-closure aggregation: per-pair scores, trends and winner counts."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..adaptation import AvailabilityLevel
from .records import ConfigurationError, ScoreRecord
from .stats import GapClosure, gap_closure, paired_sign_test

__all__ = [
    "RecordIndex",
    "PairScore",
    "TrendCell",
    "PairWin",
    "LevelWinners",
    "level_label",
    "directed_pairs",
    "pair_score",
    "aggregate_trend",
    "winner_counts",
]

log = logging.getLogger(__name__)


def level_label(level) -> str:
    return AvailabilityLevel.parse(level).label


def directed_pairs(domains) -> list[tuple[str, str]]:
    return [(s, t) for s in domains for t in domains if s != t]


class RecordIndex:
    """Lookup of surface Dice scores by (source, target, method, level)."""

    def __init__(self, records):
        self._cells: dict = defaultdict(list)
        for rec in records:
            key = (rec.source_domain, rec.target_domain, rec.method, rec.availability)
            self._cells[key].append(rec)

    def get(self, source, target, method, level=None) -> list[ScoreRecord]:
        return self._cells.get((source, target, method, level), [])

    def domains(self) -> list[str]:
        return sorted({k[0] for k in self._cells} | {k[1] for k in self._cells})

    def baseline_pairs(self) -> list[tuple[str, str]]:
        return sorted({(k[0], k[1]) for k in self._cells if k[2] == "baseline"})


def _case_means(records) -> dict[str, float]:
    by_case = defaultdict(list)
    for rec in records:
        by_case[rec.case_id].append(rec.surface_dice)
    return {cid: float(np.mean(v)) for cid, v in sorted(by_case.items())}


@dataclass(frozen=True)
class PairScore:
    """Gap closure of one method on one directed pair at one level."""

    source: str
    target: str
    method: str
    level: str
    gap: GapClosure
    per_case: dict  # case id -> d_r, or raw surface Dice when the gap is undefined

    @property
    def d_r(self) -> float | None:
        return self.gap.d_r


def _references(index: RecordIndex, source: str, target: str):
    baseline = _case_means(index.get(source, target, "baseline"))
    if not baseline:
        raise ConfigurationError(f"no baseline records for {source}->{target}")
    oracle_all = _case_means(index.get(target, target, "oracle"))
    oracle = {cid: v for cid, v in oracle_all.items() if cid in baseline}
    if not oracle:
        raise ConfigurationError(f"no oracle records for target {target} on the baseline test cases")
    return float(np.mean(list(baseline.values()))), float(np.mean(list(oracle.values())))


def pair_score(index: RecordIndex, source: str, target: str, method: str, level: str, eps: float = 1e-6) -> PairScore:
    """Gap closure of ``method`` on ``source -> target`` at ``level``.

    The references are the pair's mean baseline score and the target's mean
    oracle score over the same test cases. Per-case values average over
    seeds first.
    """
    recs = index.get(source, target, method, level)
    if not recs:
        raise ConfigurationError(f"no records for {source}->{target} {method} @ {level}")
    d_b, d_o = _references(index, source, target)
    per_case_raw = _case_means(recs)
    d = float(np.mean([r.surface_dice for r in recs]))
    gap = gap_closure(d, d_b, d_o, eps)
    if gap.defined:
        per_case = {cid: (v - d_b) / (d_o - d_b) for cid, v in per_case_raw.items()}
    else:
        per_case = per_case_raw
    return PairScore(source, target, method, level, gap, per_case)


@dataclass
class TrendCell:
    level: str
    method: str
    mean_d_r: float | None
    per_pair: dict = field(default_factory=dict)  # (source, target) -> d_r
    excluded: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.mean_d_r is None


def _resolve_pairs(index: RecordIndex, pairs):
    return list(pairs) if pairs is not None else index.baseline_pairs()


def aggregate_trend(records, levels, methods, pairs=None) -> dict[tuple[str, str], TrendCell]:
    """Mean over pairs of per-pair gap closure, per (level, method).

    Pairs whose gap is undefined are left out of the mean and listed in
    ``excluded``; a cell with no defined pair has ``mean_d_r = None``.
    """
    index = records if isinstance(records, RecordIndex) else RecordIndex(records)
    pairs = _resolve_pairs(index, pairs)
    out = {}
    for level in map(level_label, levels):
        for method in methods:
            cell = TrendCell(level, method, None)
            for s, t in pairs:
                score = pair_score(index, s, t, method, level)
                if score.gap.defined:
                    cell.per_pair[(s, t)] = score.d_r
                else:
                    cell.excluded.append((s, t))
            if cell.excluded:
                log.info("trend %s/%s: excluded pairs with undefined gap: %s", level, method, cell.excluded)
            if cell.per_pair:
                cell.mean_d_r = float(np.mean(list(cell.per_pair.values())))
            out[(level, method)] = cell
    return out


@dataclass
class PairWin:
    source: str
    target: str
    winner: str
    significant: bool
    mean_d_r: dict
    p_values: dict


@dataclass
class LevelWinners:
    level: str
    counts: dict
    significant: dict
    pairs: list

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _check_cells(index: RecordIndex, levels, methods, pairs):
    missing = [
        f"{s}->{t} {m} @ {lv}"
        for lv in levels for (s, t) in pairs for m in methods
        if not index.get(s, t, m, lv)
    ]
    if missing:
        raise ConfigurationError(f"missing score cells: {missing}")


def winner_counts(records, levels, methods, pairs=None) -> dict[str, LevelWinners]:
    """Count per level the pairs on which each method has the best mean gap closure.

    A win is significant when the paired sign test on per-case values
    against every other method favours the winner with p < 0.1. Ties in
    the mean go to the method listed first.
    """
    index = records if isinstance(records, RecordIndex) else RecordIndex(records)
    pairs = _resolve_pairs(index, pairs)
    levels = [level_label(lv) for lv in levels]
    methods = list(methods)
    if not methods:
        raise ValueError("at least one method is needed")
    _check_cells(index, levels, methods, pairs)
    out = {}
    for level in levels:
        counts = {m: 0 for m in methods}
        significant = {m: 0 for m in methods}
        wins = []
        for s, t in pairs:
            scores = {m: pair_score(index, s, t, m, level) for m in methods}
            key = {
                m: sc.d_r if sc.gap.defined else float(np.mean(list(sc.per_case.values())))
                for m, sc in scores.items()
            }
            winner = max(methods, key=lambda m: (key[m], -methods.index(m)))
            p_values = {}
            for other in methods:
                if other == winner:
                    continue
                res = paired_sign_test(scores[winner].per_case, scores[other].per_case)
                p_values[other] = res.p_value if res.winner == "a" else 1.0
            is_sig = all(p < 0.1 for p in p_values.values())
            counts[winner] += 1
            significant[winner] += int(is_sig)
            wins.append(PairWin(s, t, winner, is_sig, key, p_values))
        out[level] = LevelWinners(level, counts, significant, wins)
    return out
