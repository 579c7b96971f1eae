"""The online word-group database.

Holds the word-group table, word and word-group inverse indexes, the direct
index and the distribution table, and answers candidate queries by
accumulating scores over the posting lists of the query's words and groups.
"""

from __future__ import annotations

import io
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scoring
from .features import FrameFeatures
from .scoring import FeaturelessFrame, ScoreCache, ScoringConfig
from .vocab import BowVector, VocabularyTree

DB_MAGIC = b"BOWGDB1\n"
DB_VERSION = 1


@dataclass(frozen=True)
class DatabaseConfig:
    di_level: int = 4
    refresh_refined: bool = False


@dataclass(eq=False)
class WordGroupVector:
    """Sparse group-id -> weight map. ``raw`` counts neighbours, ``refined`` is TF-IDF-like."""

    ids: np.ndarray
    raw: np.ndarray
    refined: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "WordGroupVector":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def tf(self) -> np.ndarray:
        total = self.raw.sum()
        return self.raw / total if total else np.zeros(len(self.raw))

    def raw_dict(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.raw.tolist()))

    def refined_dict(self) -> dict[int, float]:
        if self.refined is None:
            raise ValueError("refined weights not computed")
        return dict(zip(self.ids.tolist(), self.refined.tolist()))


class WordGroupTable:
    """Cumulative raw weight per group id, plus the grand total."""

    def __init__(self, n_groups: int = 0):
        self.cumulative = np.zeros(n_groups, dtype=np.int64)
        self.total = 0

    def _grow(self, n: int) -> None:
        if n > len(self.cumulative):
            self.cumulative = np.concatenate([self.cumulative, np.zeros(n - len(self.cumulative), np.int64)])

    def add(self, groups: WordGroupVector) -> None:
        if len(groups):
            self._grow(int(groups.ids.max()) + 1)
            np.add.at(self.cumulative, groups.ids, groups.raw)
            self.total += int(groups.raw.sum())

    def get(self, i: int) -> int:
        return int(self.cumulative[i]) if i < len(self.cumulative) else 0

    def as_dict(self) -> dict[int, int]:
        nz = np.nonzero(self.cumulative)[0]
        return dict(zip(nz.tolist(), self.cumulative[nz].tolist()))

    def idf(self, ids: np.ndarray, extra: WordGroupVector | None = None) -> np.ndarray:
        """log(total / cumulative) for ``ids``, optionally as if ``extra`` were already folded in."""
        cum = np.zeros(len(ids), dtype=np.float64)
        have = ids < len(self.cumulative)
        cum[have] = self.cumulative[ids[have]]
        total = float(self.total)
        if extra is not None and len(extra):
            pos = np.searchsorted(extra.ids, ids)
            pos = np.minimum(pos, len(extra.ids) - 1)
            hit = extra.ids[pos] == ids
            cum[hit] += extra.raw[pos[hit]]
            total += float(extra.raw.sum())
        with np.errstate(divide="ignore"):
            return np.log(total / cum)


def extract_word_groups(xy: np.ndarray, size: np.ndarray, word_ids: np.ndarray, block: int = 512) -> WordGroupVector:
    """Raw word-group weights of one frame.

    For every feature, count the other features strictly closer (pixel
    distance) than its size; group ``i`` sums these counts over the
    occurrences of word ``i``. Groups with zero weight are omitted.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    size = np.asarray(size, dtype=np.float64)
    word_ids = np.asarray(word_ids, dtype=np.int64)
    n = len(xy)
    if len(size) != n or len(word_ids) != n:
        raise ValueError("keypoints and word ids differ in length")
    if n == 0:
        return WordGroupVector.empty()
    x, y = xy[:, 0], xy[:, 1]
    counts = np.empty(n, dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        dx = x[lo:hi, None] - x[None, :]
        dy = y[lo:hi, None] - y[None, :]
        d = np.sqrt(dx * dx + dy * dy)
        counts[lo:hi] = (d < size[lo:hi, None]).sum(axis=1)
    counts -= size > 0  # each feature sees itself at distance 0
    per_word = np.bincount(word_ids, weights=counts)
    ids = np.nonzero(per_word > 0)[0]
    return WordGroupVector(ids.astype(np.int64), per_word[ids].astype(np.int64))


def refine_weights(raw: WordGroupVector, table: WordGroupTable, pending: bool = False) -> WordGroupVector:
    """Refined weight tf_i * log(total / cumulative_i).

    The table must already contain this frame's raw weights, or pass
    ``pending=True`` to fold them in virtually.
    """
    if not len(raw):
        return WordGroupVector.empty()
    idf = table.idf(raw.ids, extra=raw if pending else None)
    return WordGroupVector(raw.ids, raw.raw, raw.tf * idf)


def compute_distribution(xy: np.ndarray, width: float, height: float, m: int) -> np.ndarray:
    return scoring.distribution_vector(xy, width, height, m)


class InverseIndex:
    """id -> postings of (ordinal, value columns), ordinals ascending."""

    def __init__(self, n_values: int = 1):
        self.n_values = n_values
        self._ids: dict[int, np.ndarray] = {}
        self._vals: dict[int, np.ndarray] = {}
        self._len: dict[int, int] = {}

    def add(self, ordinal: int, ids: np.ndarray, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(len(ids), self.n_values)
        for i, v in zip(ids.tolist(), values):
            n = self._len.get(i, 0)
            buf = self._ids.get(i)
            if buf is None or n == len(buf):
                cap = max(4, 2 * n)
                nb = np.empty(cap, dtype=np.int64)
                nv = np.empty((cap, self.n_values))
                if buf is not None:
                    nb[:n] = buf[:n]
                    nv[:n] = self._vals[i][:n]
                self._ids[i], self._vals[i] = nb, nv
            self._ids[i][n] = ordinal
            self._vals[i][n] = v
            self._len[i] = n + 1

    def postings(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        n = self._len.get(i, 0)
        if not n:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.n_values))
        return self._ids[i][:n], self._vals[i][:n]

    def __contains__(self, i: int) -> bool:
        return i in self._len

    def keys(self):
        return self._len.keys()

    def gather(self, ids: np.ndarray, touched: set | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated postings of ``ids``: (ordinals, values, position of the query id)."""
        parts_o, parts_v, parts_q = [], [], []
        for q, i in enumerate(ids.tolist()):
            n = self._len.get(i, 0)
            if not n:
                continue
            if touched is not None:
                touched.add(i)
            parts_o.append(self._ids[i][:n])
            parts_v.append(self._vals[i][:n])
            parts_q.append(np.full(n, q, dtype=np.int64))
        if not parts_o:
            return np.zeros(0, np.int64), np.zeros((0, self.n_values)), np.zeros(0, np.int64)
        return np.concatenate(parts_o), np.concatenate(parts_v), np.concatenate(parts_q)


@dataclass(eq=False)
class FrameEntry:
    """A frame after transformation and word-group extraction."""

    frame: FrameFeatures
    bow: BowVector
    word_ids: np.ndarray
    node_ids: np.ndarray
    groups: WordGroupVector  # refined against the table with this frame folded in
    distribution: np.ndarray

    @property
    def direct_index(self) -> dict[int, np.ndarray]:
        return direct_index(self.node_ids)


def direct_index(node_ids: np.ndarray) -> dict[int, np.ndarray]:
    """node id -> ascending feature indices."""
    order = np.argsort(node_ids, kind="stable")
    nodes, starts = np.unique(node_ids[order], return_index=True)
    return {int(n): part for n, part in zip(nodes, np.split(order, starts[1:]))}


@dataclass
class QueryResult:
    """Candidates above threshold, best first, with per-frame score breakdowns."""

    candidates: list[tuple[int, float]] = field(default_factory=list)
    rejected: bool = False
    reason: str = ""
    eta_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_sim: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_temp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cache: ScoreCache = field(default_factory=ScoreCache)


class Database:
    """Word-group database over a fixed vocabulary.

    Frames are stored by insertion ordinal 0..N-1; ``frame_ids`` maps an
    ordinal back to the source frame id. One writer, many readers: adds and
    queries are serialized by a lock so no query sees a half-added frame.
    """

    def __init__(self, vocabulary: VocabularyTree, config: DatabaseConfig = DatabaseConfig(), m_batches: int = 8):
        if not 0 <= config.di_level <= vocabulary.config.L_w:
            raise ValueError(f"di_level {config.di_level} outside [0, {vocabulary.config.L_w}]")
        self.vocabulary = vocabulary
        self.config = config
        self.m_batches = m_batches
        self.table = WordGroupTable(vocabulary.n_words)
        self.word_index = InverseIndex(1)
        self.group_index = InverseIndex(2)  # columns: refined snapshot, tf
        self.frame_ids: list[int] = []
        self.frames: list[FrameFeatures] = []
        self.node_ids: list[np.ndarray] = []
        self.direct: list[dict[int, np.ndarray]] = []
        self._bows: list[BowVector] = []
        self._groups: list[WordGroupVector] = []
        self._dist = np.zeros((0, m_batches))
        self._nonempty = np.zeros(0, dtype=bool)
        self._lock = threading.RLock()
        self.last_touched: dict[str, set] = {"words": set(), "groups": set()}

    @property
    def size(self) -> int:
        return len(self.frame_ids)

    def __len__(self) -> int:
        return self.size

    # -- stored vectors -----------------------------------------------------

    def bow(self, ordinal: int) -> BowVector:
        return self._bows[ordinal]

    def groups(self, ordinal: int, pending: WordGroupVector | None = None) -> WordGroupVector:
        """Stored group vector.

        With ``refresh_refined`` the refined weights are recomputed against the
        current table, with the query's raw weights ``pending`` folded in.
        """
        g = self._groups[ordinal]
        if self.config.refresh_refined and len(g):
            return WordGroupVector(g.ids, g.raw, g.tf * self.table.idf(g.ids, extra=pending))
        return g

    def distribution(self, ordinal: int) -> np.ndarray:
        return self._dist[ordinal]

    # -- building -----------------------------------------------------------

    def transform(self, frame: FrameFeatures) -> tuple[BowVector, np.ndarray, np.ndarray]:
        return self.vocabulary.transform(frame, self.config.di_level)

    def prepare(self, frame: FrameFeatures, timings: dict | None = None) -> FrameEntry:
        """Transform a frame and extract its refined groups, without storing it."""
        t0 = time.perf_counter()
        bow, words, nodes = self.transform(frame)
        t1 = time.perf_counter()
        raw = extract_word_groups(frame.xy, frame.size, words)
        with self._lock:
            groups = refine_weights(raw, self.table, pending=True)
        dist = compute_distribution(frame.xy, frame.width, frame.height, self.m_batches)
        t2 = time.perf_counter()
        if timings is not None:
            timings["transform"] = t1 - t0
            timings["word_groups"] = t2 - t1
        return FrameEntry(frame, bow, words, nodes, groups, dist)

    def add(self, entry: FrameEntry) -> int:
        """Store a prepared frame. Raw group weights enter the table before refinement."""
        with self._lock:
            if self.frame_ids and entry.frame.frame_id <= self.frame_ids[-1]:
                raise ValueError(f"frame id {entry.frame.frame_id} not after {self.frame_ids[-1]}")
            self.table.add(entry.groups)
            groups = refine_weights(entry.groups, self.table)
            return self._store(entry, groups)

    def add_frame(self, frame: FrameFeatures) -> int:
        return self.add(self.prepare(frame))

    def _store(self, entry: FrameEntry, groups: WordGroupVector) -> int:
        ordinal = self.size
        self.frame_ids.append(entry.frame.frame_id)
        self.frames.append(entry.frame)
        self.node_ids.append(entry.node_ids)
        self.direct.append(direct_index(entry.node_ids))
        self._bows.append(entry.bow)
        self._groups.append(groups)
        self.word_index.add(ordinal, entry.bow.ids, entry.bow.weights)
        if len(groups):
            self.group_index.add(ordinal, groups.ids, np.stack([groups.refined, groups.tf], axis=1))
        if ordinal == len(self._dist):
            grow = max(16, len(self._dist))
            self._dist = np.concatenate([self._dist, np.zeros((grow, self.m_batches))])
            self._nonempty = np.concatenate([self._nonempty, np.zeros(grow, dtype=bool)])
        self._dist[ordinal] = entry.distribution
        self._nonempty[ordinal] = len(entry.bow) > 0
        return ordinal

    # -- query --------------------------------------------------------------

    def query(
        self,
        entry: FrameEntry,
        config: ScoringConfig = ScoringConfig(),
        alpha: float = 0.0,
        recent_exclusion: int = 0,
        cache: ScoreCache | None = None,
    ) -> QueryResult:
        """Score the prepared frame against every stored frame via the inverse indexes.

        Stored frame ``j`` is eligible when ``j < N - recent_exclusion`` and its
        word vector is nonempty; eligible frames whose fused score exceeds
        ``alpha`` are returned, best first. The query counts as frame ``N``.
        """
        with self._lock:
            return self._query(entry, config, alpha, recent_exclusion, cache)

    def _query(self, entry, config, alpha, recent_exclusion, cache) -> QueryResult:
        n = self.size
        t = n
        words_touched, groups_touched = set(), set()
        self.last_touched = {"words": words_touched, "groups": groups_touched}
        if n == 0:
            return QueryResult(rejected=True, reason="empty database", cache=ScoreCache(t, np.zeros(0)))
        if self._dist.shape[1] != len(entry.distribution):
            raise ValueError("distribution batch count mismatch")

        # word score: sum_i min(q_i, v_i) == 1 - |q - v|_1 / 2 for L1-normalized vectors
        o, v, q = self.word_index.gather(entry.bow.ids, words_touched)
        s_w = np.bincount(o, weights=np.minimum(entry.bow.weights[q], v[:, 0]), minlength=n)
        if not s_w[n - 1] >= config.min_self_score:
            return QueryResult(rejected=True, reason="featureless frame", cache=ScoreCache(t, np.zeros(0)))
        eta_w = s_w / s_w[n - 1]

        g = entry.groups
        o, v, q = self.group_index.gather(g.ids, groups_touched)
        if self.config.refresh_refined and len(o):
            stored = v[:, 1] * self.table.idf(g.ids, extra=g)[q]
        else:
            stored = v[:, 0]
        p = np.bincount(o, weights=g.refined[q] * stored, minlength=n) if len(g) else np.zeros(n)
        s_g = scoring.group_score_from_product(p)
        eta_g = s_g / s_g[n - 1] if s_g[n - 1] >= config.min_self_score else np.zeros(n)

        if config.use_distribution:
            s_d = scoring.distribution_scores(entry.distribution, self._dist[:n], config.distribution_literal_max)
            eta_d = s_d / s_d[n - 1] if s_d[n - 1] >= config.min_self_score else np.zeros(n)
        else:
            eta_d = np.zeros(n)

        eta = scoring.combine(eta_w, eta_g, eta_d if config.use_distribution else None, config)
        prev = cache.previous_for(t, n) if cache is not None else np.zeros(n)
        fused = scoring.temporal_fuse(eta, prev, config)

        eligible = self._nonempty[:n].copy()
        eligible[max(0, n - recent_exclusion) :] = False
        hit = np.nonzero(eligible & (fused > alpha))[0]
        order = hit[np.lexsort((hit, -fused[hit]))]
        return QueryResult(
            candidates=[(int(j), float(fused[j])) for j in order],
            eta_w=eta_w,
            eta_g=eta_g,
            eta_d=eta_d,
            eta_sim=eta,
            eta_temp=np.where(eligible, fused, 0.0),
            cache=ScoreCache(t, fused),
        )

    def query_candidates(self, frame: FrameFeatures, config: ScoringConfig = ScoringConfig(), alpha: float = 0.0,
                         recent_exclusion: int = 0, cache: ScoreCache | None = None) -> list[tuple[int, float]]:
        """Prepare ``frame`` and return its candidates; raises FeaturelessFrame on rejection."""
        res = self.query(self.prepare(frame), config, alpha, recent_exclusion, cache)
        if res.rejected and res.reason == "featureless frame":
            raise FeaturelessFrame(res.reason)
        return res.candidates

    # -- snapshot -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            n = self.size
            offs = np.cumsum([0] + [len(f) for f in self.frames])
            bow_off = np.cumsum([0] + [len(b) for b in self._bows])
            grp_off = np.cumsum([0] + [len(g) for g in self._groups])
            cat = lambda xs, dt, shape=(0,): np.concatenate(xs).astype(dt) if xs else np.zeros(shape, dt)  # noqa: E731
            arrays = dict(
                version=np.array([DB_VERSION]),
                config=np.array([self.config.di_level, int(self.config.refresh_refined), self.m_batches]),
                vocab_words=np.array([self.vocabulary.n_words, self.vocabulary.descriptor_bytes]),
                frame_ids=np.array(self.frame_ids, dtype=np.int64),
                timestamps=np.array([f.timestamp for f in self.frames]),
                dims=np.array([(f.width, f.height) for f in self.frames], dtype=np.int64).reshape(n, 2),
                feat_off=offs,
                xy=cat([f.xy for f in self.frames], np.float64, (0, 2)),
                size=cat([f.size for f in self.frames], np.float64),
                angle=cat([f.angle for f in self.frames], np.float64),
                octave=cat([f.octave for f in self.frames], np.int32),
                desc=cat([f.descriptors for f in self.frames], np.uint8, (0, self.vocabulary.descriptor_bytes)),
                node_ids=cat(self.node_ids, np.int64),
                bow_off=bow_off,
                bow_ids=cat([b.ids for b in self._bows], np.int64),
                bow_w=cat([b.weights for b in self._bows], np.float64),
                grp_off=grp_off,
                grp_ids=cat([g.ids for g in self._groups], np.int64),
                grp_raw=cat([g.raw for g in self._groups], np.int64),
                grp_ref=cat([g.refined for g in self._groups], np.float64),
                dist=self._dist[:n],
            )
            buf = io.BytesIO()
            np.savez(buf, **arrays)
            return DB_MAGIC + buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, vocabulary: VocabularyTree) -> "Database":
        if not data.startswith(DB_MAGIC):
            raise ValueError("not a database snapshot (bad magic)")
        try:
            z = np.load(io.BytesIO(data[len(DB_MAGIC) :]), allow_pickle=False)
            a = {k: z[k] for k in z.files}
        except Exception as e:  # zip/npy errors vary
            raise ValueError(f"corrupt database snapshot: {e}") from None
        if int(a["version"][0]) != DB_VERSION:
            raise ValueError(f"unsupported snapshot version {int(a['version'][0])}")
        if tuple(a["vocab_words"]) != (vocabulary.n_words, vocabulary.descriptor_bytes):
            raise ValueError("snapshot was built with a different vocabulary")
        di, refresh, m = (int(x) for x in a["config"])
        db = cls(vocabulary, DatabaseConfig(di, bool(refresh)), m)
        fo, bo, go = a["feat_off"], a["bow_off"], a["grp_off"]
        for k in range(len(a["frame_ids"])):
            f = slice(fo[k], fo[k + 1])
            frame = FrameFeatures(int(a["frame_ids"][k]), float(a["timestamps"][k]), int(a["dims"][k, 0]),
                                  int(a["dims"][k, 1]), a["xy"][f], a["size"][f], a["angle"][f], a["octave"][f],
                                  a["desc"][f])
            b = slice(bo[k], bo[k + 1])
            g = slice(go[k], go[k + 1])
            groups = WordGroupVector(a["grp_ids"][g], a["grp_raw"][g], a["grp_ref"][g])
            entry = FrameEntry(frame, BowVector(a["bow_ids"][b], a["bow_w"][b]), np.zeros(0, np.int64),
                               a["node_ids"][f], groups, a["dist"][k])
            db.table.add(groups)
            db._store(entry, groups)
        return db

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, vocabulary: VocabularyTree) -> "Database":
        return cls.from_bytes(Path(path).read_bytes(), vocabulary)
