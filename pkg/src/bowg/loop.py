"""Loop-closure decision: islands, temporal consistency, geometric check."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .database import Database, FrameEntry, QueryResult
from .features import FrameFeatures
from .geometry import GeometryConfig, verify_pair
from .scoring import ScoreCache, ScoringConfig

NO_CANDIDATE = "no-candidate"
FAILED_TEMPORAL = "failed-temporal"
FAILED_GEOMETRIC = "failed-geometric"
ACCEPTED = "accepted"


@dataclass(frozen=True)
class LoopConfig:
    alpha_threshold: float = 0.3
    max_island_gap: int = 3
    k_temporal: int = 3
    delta_t: int = 1
    overlap_slack: int = 3
    recent_exclusion: int = 20
    min_inliers: int = 12
    geometric_check: bool = True
    history: str = "checked"  # "checked": every best island; "accepted": geometrically verified islands only

    def __post_init__(self):
        for name in ("max_island_gap", "k_temporal", "overlap_slack", "recent_exclusion", "min_inliers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta_t < 1:
            raise ValueError("delta_t must be at least 1")
        if self.history not in ("checked", "accepted"):
            raise ValueError("history must be 'checked' or 'accepted'")


@dataclass
class Island:
    lo: int
    hi: int
    members: list[tuple[int, float]]

    @property
    def score(self) -> float:
        return float(sum(s for _, s in self.members))

    @property
    def best_member(self) -> tuple[int, float]:
        # highest score, lowest id on ties
        return min(self.members, key=lambda m: (-m[1], m[0]))


def build_islands(candidates, config: LoopConfig = LoopConfig()) -> list[Island]:
    """Split candidates (id, score) into maximal runs whose consecutive id gaps are <= max_island_gap."""
    islands: list[Island] = []
    for fid, s in sorted(candidates):
        if islands and fid - islands[-1].hi <= config.max_island_gap:
            islands[-1].members.append((fid, s))
            islands[-1].hi = fid
        else:
            islands.append(Island(fid, fid, [(fid, s)]))
    return islands


def best_island(islands: list[Island]) -> Island | None:
    """Highest island score; ties go to the larger best-member score, then lower ids."""
    if not islands:
        return None
    return min(islands, key=lambda isl: (-isl.score, -isl.best_member[1], isl.lo))


def interval_gap(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(0, b[0] - a[1], a[0] - b[1])


def check_temporal(best: tuple[int, int], history: dict[int, tuple[int, int]], t: int, config: LoopConfig) -> bool:
    """The chain best, history[t - dt], ..., history[t - k dt] must have neighbours within overlap_slack."""
    cur = best
    for i in range(1, config.k_temporal + 1):
        prev = history.get(t - i * config.delta_t)
        if prev is None or interval_gap(cur, prev) > config.overlap_slack:
            return False
        cur = prev
    return True


@dataclass
class LoopResult:
    frame_id: int
    status: str
    matched_id: int | None = None
    eta_w: float = float("nan")
    eta_g: float = float("nan")
    eta_d: float = float("nan")
    eta_sim: float = float("nan")
    island: tuple[int, int] | None = None
    inliers: int = 0
    reason: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def micros(self) -> int:
        return int(round(sum(self.timings.values()) * 1e6))


def default_verifier(entry: FrameEntry, db: Database, ordinal: int, config: GeometryConfig):
    """Geometric check of the query against stored frame ``ordinal`` via the direct index."""
    other = db.frames[ordinal]
    res, m = verify_pair(entry.frame.descriptors, entry.frame.xy, other.descriptors, other.xy,
                         entry.direct_index, db.direct[ordinal], config)
    return res.ok, res.n_inliers


class LoopDetector:
    """Sequential per-stream detector: query, decide, then add the frame."""

    def __init__(self, db: Database, scoring: ScoringConfig = ScoringConfig(), loop: LoopConfig = LoopConfig(),
                 geometry: GeometryConfig | None = None,
                 verifier: Callable[[FrameEntry, Database, int, GeometryConfig], tuple[bool, int]] = default_verifier):
        self.db = db
        self.scoring = scoring
        self.loop = loop
        if geometry is None:
            geometry = GeometryConfig(min_inliers=loop.min_inliers)
        self.geometry = geometry
        self.verifier = verifier
        self.cache = ScoreCache()
        self.history: dict[int, tuple[int, int]] = {}

    def detect(self, frame: FrameFeatures, add: bool = True) -> LoopResult:
        timings: dict[str, float] = {}
        entry = self.db.prepare(frame, timings)
        t0 = time.perf_counter()
        t = self.db.size
        qr = self.db.query(entry, self.scoring, self.loop.alpha_threshold, self.loop.recent_exclusion, self.cache)
        self.cache = qr.cache
        islands = build_islands(qr.candidates, self.loop)
        best = best_island(islands)
        timings["query"] = time.perf_counter() - t0
        result = self._decide(frame, entry, t, qr, best, timings)
        if add:
            t2 = time.perf_counter()
            self.db.add(entry)
            timings["add"] = time.perf_counter() - t2
        return result

    def _decide(self, frame, entry, t: int, qr: QueryResult, best: Island | None, timings) -> LoopResult:
        ids = self.db.frame_ids
        if qr.rejected or best is None:
            return LoopResult(frame.frame_id, NO_CANDIDATE, reason=qr.reason or "below threshold", timings=timings)
        j, _ = best.best_member
        res = LoopResult(
            frame.frame_id, FAILED_TEMPORAL, ids[j], float(qr.eta_w[j]), float(qr.eta_g[j]),
            float(qr.eta_d[j]) if self.scoring.use_distribution else float("nan"),
            float(qr.eta_temp[j]), (ids[best.lo], ids[best.hi]), timings=timings,
        )
        interval = (best.lo, best.hi)
        consistent = check_temporal(interval, self.history, t, self.loop)
        if self.loop.history == "checked":
            self.history[t] = interval
        if not consistent:
            if self.loop.history == "accepted":
                # the chain can only start if geometrically sound islands enter the history
                # even while the chain is too short; the status stays failed-temporal
                ok, inliers = self._verify(entry, j, timings)
                if ok:
                    self.history[t] = interval
            return res
        if self.loop.geometric_check:
            ok, inliers = self._verify(entry, j, timings)
            res.inliers = inliers
            if not ok:
                res.status = FAILED_GEOMETRIC
                return res
        res.status = ACCEPTED
        if self.loop.history == "accepted":
            self.history[t] = interval
        return res

    def _verify(self, entry, j: int, timings) -> tuple[bool, int]:
        if not self.loop.geometric_check:
            return True, 0
        t0 = time.perf_counter()
        ok, inliers = self.verifier(entry, self.db, j, self.geometry)
        timings["verify"] = timings.get("verify", 0.0) + time.perf_counter() - t0
        return ok and inliers >= self.loop.min_inliers, inliers

    def run(self, frames) -> list[LoopResult]:
        return [self.detect(f) for f in frames]
