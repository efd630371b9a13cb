"""Phase-adaptive, training-free neural architecture search."""

from .arch_dsl import (
    ArchitectureSpec,
    BlockKind,
    BlockSpec,
    Mode,
    ParseError,
    ValidationCode,
    ValidationError,
    catalog_signature,
    parse_architecture,
    serialize,
    validate,
)
from .nn_eval import (
    ScoreConfig,
    ScoreReport,
    aggregate,
    build_network,
    classification_score,
    detection_score,
    forward_with_stats,
)
from .resource import ConstraintSet, ResourceProfile, check, estimate
from .search_core import CandidatePool, SearchConfig, run_search

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "BlockKind",
    "BlockSpec",
    "CandidatePool",
    "ConstraintSet",
    "Mode",
    "ParseError",
    "ResourceProfile",
    "ScoreConfig",
    "ScoreReport",
    "SearchConfig",
    "ValidationCode",
    "ValidationError",
    "aggregate",
    "build_network",
    "catalog_signature",
    "check",
    "classification_score",
    "detection_score",
    "estimate",
    "forward_with_stats",
    "parse_architecture",
    "run_search",
    "serialize",
    "validate",
]
