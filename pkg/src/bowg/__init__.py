"""Bag-of-Word-Groups loop-closure detection."""

from .config import Settings
from .database import Database, DatabaseConfig, WordGroupTable, WordGroupVector, extract_word_groups, refine_weights
from .features import FrameFeatures, Keypoint, load_features, save_features
from .geometry import GeometryConfig, estimate_fundamental, match_features
from .loop import LoopConfig, LoopDetector, LoopResult, build_islands, check_temporal
from .scoring import ScoreCache, ScoringConfig
from .vocab import BowVector, VocabConfig, VocabularyTree, train

__all__ = [
    "BowVector",
    "Database",
    "DatabaseConfig",
    "FrameFeatures",
    "GeometryConfig",
    "Keypoint",
    "LoopConfig",
    "LoopDetector",
    "LoopResult",
    "ScoreCache",
    "ScoringConfig",
    "Settings",
    "VocabConfig",
    "VocabularyTree",
    "WordGroupTable",
    "WordGroupVector",
    "build_islands",
    "check_temporal",
    "estimate_fundamental",
    "extract_word_groups",
    "load_features",
    "match_features",
    "refine_weights",
    "save_features",
    "train",
]
