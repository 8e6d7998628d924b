"""Depression-classifier portability toolkit: Python access to the C++ core."""

from ._core import (
    ConfigError,
    DomainError,
    UndefinedMetric,
    binarize_phq,
    corpus_stats,
    discriminative_lrs,
    eer_operating_point,
    roc_auc,
    run_cli,
    spearman,
    stlr,
    tokenize,
    unfreeze_plan,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "UndefinedMetric",
    "binarize_phq",
    "corpus_stats",
    "discriminative_lrs",
    "eer_operating_point",
    "roc_auc",
    "run_cli",
    "spearman",
    "stlr",
    "tokenize",
    "unfreeze_plan",
]
