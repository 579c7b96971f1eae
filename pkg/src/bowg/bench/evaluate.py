"""Ground truth handling and precision-recall evaluation of loop-result CSVs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TOLERANCE = 2


class GroundTruth:
    """Accepted (query_id, match_id) pairs, match_id < query_id."""

    def __init__(self, pairs=(), tolerance: int = DEFAULT_TOLERANCE):
        self.pairs: set[tuple[int, int]] = set()
        for q, m in pairs:
            q, m = int(q), int(m)
            if m >= q or m < 0:
                raise ValueError(f"ground-truth pair ({q}, {m}) must have 0 <= match < query")
            self.pairs.add((q, m))
        self.tolerance = int(tolerance)
        by_query: dict[int, list[int]] = {}
        for q, m in self.pairs:
            by_query.setdefault(q, []).append(m)
        self._by_query = {q: np.array(sorted(ms)) for q, ms in by_query.items()}

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other) -> bool:
        return isinstance(other, GroundTruth) and self.pairs == other.pairs and self.tolerance == other.tolerance

    @property
    def queries(self) -> set[int]:
        return set(self._by_query)

    def is_match(self, query: int, match: int, tolerance: int | None = None) -> bool:
        """True when some (query, g) pair has |match - g| <= tolerance."""
        tol = self.tolerance if tolerance is None else tolerance
        g = self._by_query.get(int(query))
        if g is None:
            return False
        i = np.searchsorted(g, match - tol)
        return bool(i < len(g) and g[i] <= match + tol)

    def dumps(self) -> str:
        lines = [f"# tolerance {self.tolerance}\n"]
        lines += [f"{q} {m}\n" for q, m in sorted(self.pairs)]
        return "".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, tolerance: int | None = None) -> "GroundTruth":
        pairs, tol = [], DEFAULT_TOLERANCE
        for lineno, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                parts = s[1:].split()
                if len(parts) == 2 and parts[0] == "tolerance":
                    tol = int(parts[1])
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'query match', got {line!r}")
            pairs.append((int(parts[0]), int(parts[1])))
        return cls(pairs, tol if tolerance is None else tolerance)

    @classmethod
    def load(cls, path: str | Path, tolerance: int | None = None) -> "GroundTruth":
        path = Path(path)
        if path.suffix in (".npy", ".mat", ".csv") or _looks_like_matrix(path):
            return cls.from_matrix(load_matrix(path), tolerance if tolerance is not None else DEFAULT_TOLERANCE)
        return cls.loads(path.read_text(), tolerance)

    @classmethod
    def from_matrix(cls, matrix, tolerance: int = DEFAULT_TOLERANCE, frame_ids=None) -> "GroundTruth":
        """Square boolean GT matrix (row query, column match); the upper triangle is ignored."""
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"ground-truth matrix must be square, got {m.shape}")
        q, g = np.nonzero(np.tril(m != 0, k=-1))
        if frame_ids is not None:
            ids = np.asarray(frame_ids)
            q, g = ids[q], ids[g]
        return cls(zip(q.tolist(), g.tolist()), tolerance)


def _looks_like_matrix(path: Path) -> bool:
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                return len(s.replace(",", " ").split()) > 2
    return False


def load_matrix(path: str | Path) -> np.ndarray:
    """Boolean matrix from .npy, .mat (first 2-D array) or whitespace/comma-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        data = loadmat(path)
        for key, value in data.items():
            if not key.startswith("__") and getattr(value, "ndim", 0) == 2:
                return np.asarray(value)
        raise ValueError(f"{path}: no 2-D array found")
    text = path.read_text().replace(",", " ")
    return np.loadtxt(text.splitlines(), ndmin=2)


# -- results ------------------------------------------------------------------


@dataclass
class Detection:
    frame_id: int
    status: str
    matched_id: int | None
    eta_sim: float


def read_results(path_or_rows) -> list[Detection]:
    if isinstance(path_or_rows, (str, Path)):
        with open(path_or_rows, newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = list(path_or_rows)
    out = []
    for r in rows:
        if isinstance(r, Detection):
            out.append(r)
            continue
        if hasattr(r, "status") and not isinstance(r, dict):
            out.append(Detection(int(r.frame_id), r.status, r.matched_id, float(r.eta_sim)))
            continue
        mid = r.get("matched_id", "")
        out.append(Detection(int(r["frame_id"]), r["status"], int(mid) if mid not in ("", None) else None,
                             float(r.get("eta_sim") or "nan")))
    return out


@dataclass(frozen=True)
class CurvePoint:
    alpha: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    curve: list[CurvePoint]
    recall_at_full_precision: float
    auc: float
    precision_undefined: bool = False
    timing: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def summary(self) -> str:
        lines = [
            f"tp={self.tp} fp={self.fp} fn={self.fn}",
            f"precision={self.precision:.4f}{' (no detections)' if self.precision_undefined else ''}",
            f"recall={self.recall:.4f} f1={self.f1:.4f}",
            f"recall@100%precision={self.recall_at_full_precision:.4f}",
            f"pr_auc={self.auc:.4f}",
        ]
        for stage, st in self.timing.items():
            lines.append(f"time[{stage}] median={st['median']:.1f}us mean={st['mean']:.1f}us "
                         f"std={st['std']:.1f}us max={st['max']:.1f}us")
        return "\n".join(lines)

    def curve_csv(self) -> str:
        rows = ["alpha,tp,fp,fn,precision,recall,f1\n"]
        rows += [f"{p.alpha!r},{p.tp},{p.fp},{p.fn},{p.precision!r},{p.recall!r},{p.f1!r}\n" for p in self.curve]
        return "".join(rows)


def _counts(dets: list[Detection], gt: GroundTruth, tol: int) -> tuple[int, int, int]:
    tp_queries = {d.frame_id for d in dets if gt.is_match(d.frame_id, d.matched_id, tol)}
    fp = sum(1 for d in dets if not gt.is_match(d.frame_id, d.matched_id, tol))
    fn = len(gt.queries - tp_queries)
    return len(tp_queries), fp, fn


def pr_curve(rows, gt: GroundTruth, tolerance: int | None = None, statuses=("accepted",)) -> list[CurvePoint]:
    """One point per distinct eta_sim: detections are rows with eta_sim >= alpha."""
    tol = gt.tolerance if tolerance is None else tolerance
    dets = [d for d in read_results(rows) if d.status in statuses and d.matched_id is not None
            and not math.isnan(d.eta_sim)]
    dets.sort(key=lambda d: (-d.eta_sim, d.frame_id))
    n_pos = len(gt.queries)
    points, tp, fp, seen = [], 0, 0, set()
    i = 0
    while i < len(dets):
        alpha = dets[i].eta_sim
        while i < len(dets) and dets[i].eta_sim == alpha:
            d = dets[i]
            if gt.is_match(d.frame_id, d.matched_id, tol):
                if d.frame_id not in seen:
                    seen.add(d.frame_id)
                    tp += 1
            else:
                fp += 1
            i += 1
        points.append(CurvePoint(alpha, tp, fp, n_pos - tp))
    return points


def curve_auc(points: list[CurvePoint]) -> float:
    """Step-wise area: sum of recall increments times precision."""
    auc, prev_r = 0.0, 0.0
    for p in points:
        auc += (p.recall - prev_r) * p.precision
        prev_r = p.recall
    return auc


def timing_stats(path_or_rows) -> dict[str, dict[str, float]]:
    if isinstance(path_or_rows, (str, Path)):
        with open(path_or_rows, newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = list(path_or_rows)
    out = {}
    if not rows:
        return out
    for col in rows[0]:
        if col == "frame_id":
            continue
        v = np.array([float(r[col]) for r in rows])
        out[col.removesuffix("_us")] = {"median": float(np.median(v)), "mean": float(v.mean()),
                                        "std": float(v.std()), "max": float(v.max())}
    return out


def evaluate(results, ground_truth: GroundTruth, tolerance: int | None = None, timings=None,
             statuses=("accepted",)) -> EvalReport:
    """Score accepted detections against ground truth and sweep alpha over eta_sim.

    With no detections precision is undefined; it is reported as 1.0 and flagged.
    """
    tol = ground_truth.tolerance if tolerance is None else tolerance
    dets = [d for d in read_results(results) if d.status in statuses and d.matched_id is not None]
    tp, fp, fn = _counts(dets, ground_truth, tol)
    curve = pr_curve(dets, ground_truth, tol, statuses)
    full = [p.recall for p in curve if p.fp == 0]
    report = EvalReport(tp, fp, fn, curve, max(full, default=0.0), curve_auc(curve), precision_undefined=not dets)
    if timings is not None:
        report.timing = timing_stats(timings)
    return report
