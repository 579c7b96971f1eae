"""Sequence replay: stream frames through the detector and write result/timing CSVs."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import Settings
from ..database import Database
from ..features import FrameFeatures, iter_features
from ..loop import LoopDetector, LoopResult
from ..vocab import VocabularyTree

RESULT_COLUMNS = ("frame_id", "status", "matched_id", "eta_w", "eta_g", "eta_d", "eta_sim",
                  "island_lo", "island_hi", "inliers", "micros")
STAGES = ("transform", "word_groups", "query", "verify", "add")
TIMING_COLUMNS = ("frame_id",) + tuple(f"{s}_us" for s in STAGES) + ("total_us", "wall_us")


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def result_row(r: LoopResult, timings: bool = True) -> str:
    lo, hi = r.island if r.island is not None else ("", "")
    vals = [str(r.frame_id), r.status, "" if r.matched_id is None else str(r.matched_id),
            _num(r.eta_w), _num(r.eta_g), _num(r.eta_d), _num(r.eta_sim), str(lo), str(hi),
            str(r.inliers), str(r.micros if timings else 0)]
    return ",".join(vals) + "\n"


@dataclass
class RunSummary:
    results: list[LoopResult]
    wall: np.ndarray  # seconds per frame, around the whole detect call
    results_path: Path | None = None
    timing_path: Path | None = None
    settings: Settings = field(default_factory=Settings)

    def query_times(self) -> np.ndarray:
        """End-to-end per-frame time in seconds (all stages)."""
        return np.array([sum(r.timings.values()) for r in self.results])

    def growth(self, block: int = 1000) -> list[tuple[int, int, float]]:
        """Mean end-to-end time per block of frames: (start, stop, seconds)."""
        qt = self.query_times()
        return [(i, min(i + block, len(qt)), float(qt[i : i + block].mean())) for i in range(0, len(qt), block)]


def detector_from(vocabulary: VocabularyTree, settings: Settings) -> LoopDetector:
    db = Database(vocabulary, settings.database, settings.scoring.m_batches)
    return LoopDetector(db, settings.scoring, settings.loop, settings.geometry)


def replay(frames, detector: LoopDetector, results_path=None, timing_path=None, timings: bool = True,
           progress=None) -> RunSummary:
    """Run frames in order; CSV rows are written as they are produced."""
    rf = open(results_path, "w", newline="") if results_path else None
    tf = open(timing_path, "w", newline="") if timing_path else None
    try:
        if rf:
            rf.write(",".join(RESULT_COLUMNS) + "\n")
        if tf:
            tf.write(",".join(TIMING_COLUMNS) + "\n")
        results, wall = [], []
        for i, frame in enumerate(frames):
            t0 = time.perf_counter()
            r = detector.detect(frame)
            w = time.perf_counter() - t0
            results.append(r)
            wall.append(w)
            if rf:
                rf.write(result_row(r, timings))
            if tf:
                us = [int(round(r.timings.get(s, 0.0) * 1e6)) if timings else 0 for s in STAGES]
                total = sum(us)
                tf.write(",".join(map(str, [r.frame_id, *us, total, int(round(w * 1e6)) if timings else 0])) + "\n")
            if progress is not None:
                progress(i, r)
    finally:
        if rf:
            rf.close()
        if tf:
            tf.close()
    return RunSummary(results, np.array(wall), Path(results_path) if results_path else None,
                      Path(timing_path) if timing_path else None)


def run_sequence(features_path, vocab_path, config_path=None, results_path="results.csv",
                 timing_path="timing.csv", settings: Settings | None = None, timings: bool = True) -> RunSummary:
    """Replay a features file through a fresh database built on the given vocabulary.

    ``settings`` overrides ``config_path``. With ``timings=False`` every time
    column is written as 0 so repeated runs give byte-identical files.
    """
    if settings is None:
        settings = Settings.load(config_path) if config_path else Settings()
    vocabulary = VocabularyTree.load(vocab_path)
    detector = detector_from(vocabulary, settings)
    with open(features_path) as fh:
        summary = replay(iter_features(fh), detector, results_path, timing_path, timings)
    summary.settings = settings
    return summary


def run_frames(frames: list[FrameFeatures], vocabulary: VocabularyTree, settings: Settings = Settings(),
               **kw) -> RunSummary:
    summary = replay(frames, detector_from(vocabulary, settings), **kw)
    summary.settings = settings
    return summary
