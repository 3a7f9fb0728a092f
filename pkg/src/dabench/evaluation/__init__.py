"""Oracle/baseline protocol, gap closure, sign tests and reporting."""

from .aggregate import (
    LevelWinners,
    PairScore,
    RecordIndex,
    TrendCell,
    aggregate_trend,
    directed_pairs,
    level_label,
    pair_score,
    winner_counts,
)
from .protocol import (
    TransferMatrix,
    build_transfer_matrix,
    cross_validate_oracle,
    fold_assignment,
    score_cases,
    split_target_cases,
    train_source_model,
)
from .records import METHODS, ConfigurationError, RecordStore, ScoreRecord
from .report import emit_report
from .stats import GapClosure, SignTestResult, binomial_upper_tail, gap_closure, paired_sign_test

__all__ = [
    "METHODS",
    "ConfigurationError",
    "GapClosure",
    "LevelWinners",
    "PairScore",
    "RecordIndex",
    "RecordStore",
    "ScoreRecord",
    "SignTestResult",
    "TransferMatrix",
    "TrendCell",
    "aggregate_trend",
    "binomial_upper_tail",
    "build_transfer_matrix",
    "cross_validate_oracle",
    "directed_pairs",
    "emit_report",
    "fold_assignment",
    "gap_closure",
    "level_label",
    "pair_score",
    "paired_sign_test",
    "score_cases",
    "split_target_cases",
    "train_source_model",
    "winner_counts",
]
