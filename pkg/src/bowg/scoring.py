"""Similarity scores: word, word-group and distribution scores, their
normalization and combination, and the adaptive temporal fusion.

All scalar functions also accept numpy arrays where that makes sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)


class FeaturelessFrame(Exception):
    """The query's self-score against the previous frame is below the floor."""


@dataclass(frozen=True)
class ScoringConfig:
    lambda1: float | None = None  # 0.5, or 0.4 with distribution scoring
    lambda2: float = 0.4
    use_distribution: bool = False
    w_max: float = 0.6
    alpha_temporal: float = 0.1
    min_self_score: float = 0.005
    m_batches: int = 8
    distribution_literal_max: bool = False

    def __post_init__(self):
        if not 0 <= self.word_weight <= 1 or self.lambda2 < 0:
            raise ValueError("need 0 <= lambda1 <= 1 and lambda2 >= 0")
        if self.use_distribution and self.word_weight + self.lambda2 > 1 + 1e-12:
            raise ValueError("lambda1 + lambda2 must not exceed 1 with distribution scoring")
        if not 0 <= self.w_max < 1:
            raise ValueError("w_max must be in [0, 1)")
        if self.alpha_temporal <= 0:
            raise ValueError("alpha_temporal must be positive")
        if self.m_batches < 2:
            raise ValueError("m_batches must be at least 2")

    @property
    def word_weight(self) -> float:
        """lambda1, defaulting to 0.5 (0.4 with distribution scoring)."""
        if self.lambda1 is not None:
            return self.lambda1
        return 0.4 if self.use_distribution else 0.5


@dataclass
class ScoreCache:
    """Fused scores of the previous query, indexed by stored-frame ordinal.

    ``query`` is the ordinal of the frame whose query produced the values;
    a cache from any other query is treated as empty.
    """

    query: int = -1
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def get(self, j: int, for_query: int | None = None) -> float:
        if for_query is not None and self.query != for_query - 1:
            return 0.0
        return float(self.values[j]) if 0 <= j < len(self.values) else 0.0

    def previous_for(self, query: int, n: int) -> np.ndarray:
        """eta(I_{t-1}, I_{j-1}) for j = 0..n-1; absent entries are 0."""
        prev = np.zeros(n)
        if self.query != query - 1 or n < 2:
            return prev
        k = min(n - 1, len(self.values))
        prev[1 : k + 1] = self.values[:k]
        return prev


# -- raw scores -------------------------------------------------------------


def _as_dict(v) -> dict[int, float]:
    return v if isinstance(v, dict) else v.to_dict()


def word_score(v1, v2) -> float:
    """1 - ||v1 - v2||_1 / 2 for L1-normalized sparse vectors; 0 if either is empty."""
    a, b = _as_dict(v1), _as_dict(v2)
    if not a or not b:
        return 0.0
    diff = sum(abs(a.get(i, 0.0) - b.get(i, 0.0)) for i in a.keys() | b.keys())
    return 1.0 - 0.5 * diff


def group_product(g1, g2) -> float:
    a = g1 if isinstance(g1, dict) else g1.refined_dict()
    b = g2 if isinstance(g2, dict) else g2.refined_dict()
    if len(b) < len(a):
        a, b = b, a
    return sum(w * b[i] for i, w in a.items() if i in b)


def group_score_from_product(p):
    """1 if p > 1 else 1 - sqrt(1 - p); works elementwise on arrays."""
    if np.ndim(p) == 0:
        return 1.0 if p > 1 else 1.0 - math.sqrt(1.0 - p)
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > 1, 1.0, 1.0 - np.sqrt(np.maximum(1.0 - p, 0.0)))


def word_group_score(g1, g2) -> float:
    """Word-group score over refined weights (WordGroupVector or id->weight dict)."""
    return group_score_from_product(group_product(g1, g2))


def normalize(s_raw, s_self: float, floor: float):
    """s_raw / s_self, refusing normalizers below ``floor``."""
    if not s_self >= floor:
        raise FeaturelessFrame(f"self-score {s_self:.3g} below floor {floor:.3g}")
    return s_raw / s_self


def combine(eta_w, eta_g, eta_d=None, config: ScoringConfig = ScoringConfig()):
    if config.use_distribution:
        if eta_d is None:
            raise ValueError("distribution scoring enabled but eta_d missing")
        l1, l2 = config.word_weight, config.lambda2
        return l1 * eta_w + l2 * eta_g + (1 - l1 - l2) * eta_d
    l1 = config.word_weight
    return l1 * eta_w + (1 - l1) * eta_g


def previous_weight(eta_now, eta_prev, config: ScoringConfig = ScoringConfig()):
    r = (eta_now - eta_prev) / config.alpha_temporal
    return config.w_max / (1 + r * r)


def temporal_fuse(eta_now, eta_prev=None, config: ScoringConfig = ScoringConfig()):
    """Blend the current score with the previous query's score for candidate j-1.

    A missing previous score counts as 0.
    """
    if eta_prev is None:
        eta_prev = 0.0
    w = previous_weight(eta_now, eta_prev, config)
    return w * eta_prev + (1 - w) * eta_now


# -- distribution -----------------------------------------------------------


def distribution_vector(xy: np.ndarray, width: float, height: float, m: int) -> np.ndarray:
    """L2-normalized histogram of feature angles about the image center in m fan sectors."""
    if m < 2:
        raise ValueError("need m >= 2 batches")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    v = np.zeros(m)
    if len(xy) == 0:
        return v
    cx, cy = width / 2.0, height / 2.0
    theta = np.mod(np.arctan2(xy[:, 1] - cy, xy[:, 0] - cx), 2 * np.pi)
    k = np.floor(theta / (2 * np.pi / m)).astype(np.int64)
    k = np.minimum(k, m - 1)  # theta just below 2*pi can round up to m
    v = np.bincount(k, minlength=m).astype(np.float64)
    return v / np.linalg.norm(v)


def distribution_matrix(v: np.ndarray) -> np.ndarray:
    """m x m matrix with M[i, j] = v[(i + j) mod m]; column i is v rolled by -i."""
    v = np.asarray(v, dtype=np.float64)
    m = len(v)
    idx = (np.arange(m)[:, None] + np.arange(m)[None, :]) % m
    return v[idx]


def distribution_scores(v_t: np.ndarray, table: np.ndarray, literal_max: bool = False) -> np.ndarray:
    """Distribution score of ``v_t`` against each row of ``table``.

    Default: best cyclic alignment, 1 - min_i ||M_i - v_j|| / sqrt(2).
    ``literal_max``: the raw max_i ||M_i - v_j||.
    Zero vectors on either side score 0.
    """
    table = np.atleast_2d(np.asarray(table, dtype=np.float64))
    v_t = np.asarray(v_t, dtype=np.float64)
    if table.shape[1] != len(v_t):
        raise ValueError(f"batch count mismatch: {len(v_t)} vs {table.shape[1]}")
    out = np.zeros(len(table))
    if not v_t.any() or len(table) == 0:
        return out
    cols = distribution_matrix(v_t).T  # row i = column i of M
    diff = table[:, None, :] - cols[None, :, :]
    d = np.sqrt(np.einsum("nij,nij->ni", diff, diff))
    s = d.max(axis=1) if literal_max else 1.0 - d.min(axis=1) / SQRT2
    nonzero = table.any(axis=1)
    out[nonzero] = s[nonzero]
    return out


def distribution_score(v_t: np.ndarray, v_j: np.ndarray, literal_max: bool = False) -> float:
    return float(distribution_scores(v_t, np.asarray(v_j)[None, :], literal_max)[0])


# -- composition ------------------------------------------------------------


@dataclass(frozen=True)
class ScoreBreakdown:
    eta_w: float
    eta_g: float
    eta_d: float
    eta_sim: float
    eta_temp: float


def score_query(entry, j: int, db, cache: ScoreCache | None, config: ScoringConfig, next_cache: ScoreCache | None = None) -> ScoreBreakdown:
    """Fused score of a prepared query frame against stored frame ``j``.

    The query is normalized against the last stored frame. Component
    normalizers below the floor: the word one rejects the query, the group and
    distribution ones zero their component.
    """
    t = db.size
    if t == 0:
        raise FeaturelessFrame("empty database")
    prev = t - 1
    s_w_self = word_score(entry.bow, db.bow(prev))
    eta_w = normalize(word_score(entry.bow, db.bow(j)), s_w_self, config.min_self_score)

    s_g_self = word_group_score(entry.groups, db.groups(prev, entry.groups))
    s_g = word_group_score(entry.groups, db.groups(j, entry.groups))
    eta_g = s_g / s_g_self if s_g_self >= config.min_self_score else 0.0

    eta_d = 0.0
    if config.use_distribution:
        lit = config.distribution_literal_max
        s_d_self = distribution_score(entry.distribution, db.distribution(prev), lit)
        s_d = distribution_score(entry.distribution, db.distribution(j), lit)
        eta_d = s_d / s_d_self if s_d_self >= config.min_self_score else 0.0

    eta = combine(eta_w, eta_g, eta_d if config.use_distribution else None, config)
    eta_prev = cache.get(j - 1, for_query=t) if cache is not None else 0.0
    fused = temporal_fuse(eta, eta_prev, config)
    if next_cache is not None:
        if next_cache.query != t:
            next_cache.query = t
            next_cache.values = np.zeros(t)
        next_cache.values[j] = fused
    return ScoreBreakdown(eta_w, eta_g, eta_d, eta, fused)
