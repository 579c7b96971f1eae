"""Hierarchical k-medians vocabulary over binary descriptors."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FrameFeatures

MAGIC = b"BOWGVOC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IIIBqIII")
_NODE = struct.Struct("<iid")
_WEIGHTING = {"tf-idf": 0}


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class VocabConfig:
    k_w: int = 10
    L_w: int = 6
    weighting: str = "tf-idf"
    seed: int = 0
    max_iters: int = 100

    def __post_init__(self):
        if self.k_w < 2 or self.L_w < 1:
            raise ValueError(f"need k_w >= 2 and L_w >= 1, got k_w={self.k_w}, L_w={self.L_w}")
        if self.weighting not in _WEIGHTING:
            raise ValueError(f"unsupported weighting {self.weighting!r}")


@dataclass(eq=False)
class BowVector:
    """Sparse L1-normalized word histogram: sorted ``ids`` with positive ``weights``."""

    ids: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls) -> "BowVector":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_dict(cls, d: dict[int, float]) -> "BowVector":
        ids = np.array(sorted(d), dtype=np.int64)
        return cls(ids, np.array([d[i] for i in ids], dtype=np.float64))

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return len(self.ids)


# -- binary k-medians -------------------------------------------------------


def _u64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).view(np.uint64)


def _dist(x64: np.ndarray, c64: np.ndarray) -> np.ndarray:
    return np.bitwise_count(x64[:, None, :] ^ c64[None, :, :]).sum(axis=2, dtype=np.int64)


def bit_majority(members: np.ndarray) -> np.ndarray:
    """Bitwise-majority median; a bit with equal 0/1 counts resolves to 0."""
    bits = np.unpackbits(members, axis=1, bitorder="little")
    ones = bits.sum(axis=0, dtype=np.int64)
    return np.packbits(2 * ones > len(members), bitorder="little")


def _kmeanspp(x64: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    n = len(x64)
    chosen = [int(rng.integers(n))]
    d = _dist(x64, x64[chosen]).min(axis=1)
    while len(chosen) < k:
        w = d.astype(np.float64) ** 2
        total = w.sum()
        if total == 0:
            break
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(w), r, side="right"))
        idx = min(idx, n - 1)
        chosen.append(idx)
        d = np.minimum(d, _dist(x64, x64[idx : idx + 1])[:, 0])
    return chosen


def kmedians(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cluster binary descriptors into ``k`` groups.

    k-means++ seeding with squared Hamming weights, then alternate nearest-center
    assignment (ties to the lowest center) and bit-majority medians. An empty
    cluster is reseeded with the member of the largest cluster farthest from
    its center. Returns ``(centers, labels)``.
    """
    x = np.ascontiguousarray(x, dtype=np.uint8)
    x64 = _u64(x)
    centers = x[_kmeanspp(x64, k, rng)].copy()
    labels = None
    for _ in range(max_iters):
        new = np.argmin(_dist(x64, _u64(centers)), axis=1)
        for _repair in range(k):
            counts = np.bincount(new, minlength=len(centers))
            empty = np.nonzero(counts == 0)[0]
            if len(empty) == 0:
                break
            big = int(np.argmax(counts))
            members = np.nonzero(new == big)[0]
            far = members[int(np.argmax(_dist(x64[members], _u64(centers[big : big + 1]))[:, 0]))]
            centers[empty[0]] = x[far]
            new = np.argmin(_dist(x64, _u64(centers)), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            sel = labels == c
            if sel.any():
                centers[c] = bit_majority(x[sel])
    return centers, labels


# -- tree -------------------------------------------------------------------


@dataclass(eq=False)
class VocabularyTree:
    """Level-ordered node table. Node 0 is the root; leaves carry dense word ids."""

    config: VocabConfig
    centers: np.ndarray  # (n_nodes, n_bytes) uint8
    parent: np.ndarray  # (n_nodes,) int32, -1 for the root
    word_of_node: np.ndarray  # (n_nodes,) int32, -1 for internal nodes
    idf: np.ndarray  # (n_words,) float64

    def __post_init__(self):
        n = len(self.parent)
        self.level = np.zeros(n, dtype=np.int32)
        for i in range(1, n):
            self.level[i] = self.level[self.parent[i]] + 1
        counts = np.bincount(self.parent[1:], minlength=n) if n > 1 else np.zeros(n, int)
        width = max(int(counts.max(initial=0)), 1)
        self.children = np.full((n, width), -1, dtype=np.int64)
        fill = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            p = self.parent[i]
            self.children[p, fill[p]] = i
            fill[p] += 1
        self.leaf_nodes = np.nonzero(self.word_of_node >= 0)[0]
        self._c64 = _u64(self.centers)

    @property
    def n_words(self) -> int:
        return len(self.idf)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def depth(self) -> int:
        return int(self.level.max(initial=0))

    @property
    def descriptor_bytes(self) -> int:
        return self.centers.shape[1]

    def descend(self, descriptors: np.ndarray, di_level: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Greedy root-to-leaf descent by Hamming distance.

        Returns the word id per descriptor and the ancestor node id at
        ``di_level`` (the leaf itself when it sits above that level).
        """
        d = np.ascontiguousarray(descriptors, dtype=np.uint8)
        n = len(d)
        cur = np.zeros(n, dtype=np.int64)
        at_level = cur.copy() if di_level == 0 else None
        if n:
            d64 = _u64(d)
            for step in range(1, self.depth + 1):
                ch = self.children[cur]
                active = ch[:, 0] >= 0
                if active.any():
                    cha = ch[active]
                    dist = np.bitwise_count(d64[active][:, None, :] ^ self._c64[cha]).sum(axis=2, dtype=np.int64)
                    dist[cha < 0] = np.iinfo(np.int64).max
                    cur[active] = cha[np.arange(len(cha)), np.argmin(dist, axis=1)]
                if step == di_level:
                    at_level = cur.copy()
        if at_level is None:
            at_level = cur.copy()
        return self.word_of_node[cur].astype(np.int64), at_level

    def quantize(self, descriptors: np.ndarray) -> np.ndarray:
        return self.descend(descriptors)[0]

    def bow(self, word_ids: np.ndarray) -> BowVector:
        """TF-IDF weights of a word-id multiset, L1-normalized; zero weights dropped."""
        if len(word_ids) == 0:
            return BowVector.empty()
        ids, counts = np.unique(word_ids, return_counts=True)
        w = counts / len(word_ids) * self.idf[ids]
        keep = w > 0
        ids, w = ids[keep], w[keep]
        total = w.sum()
        if total <= 0:
            return BowVector.empty()
        return BowVector(ids.astype(np.int64), w / total)

    def transform(self, frame: FrameFeatures, di_level: int = 0) -> tuple[BowVector, np.ndarray, np.ndarray]:
        if not 0 <= di_level <= self.config.L_w:
            raise ValueError(f"di_level must be in [0, {self.config.L_w}], got {di_level}")
        if len(frame) and frame.descriptors.shape[1] != self.descriptor_bytes:
            raise ValueError(
                f"frame has {frame.descriptor_bits}-bit descriptors, vocabulary expects {self.descriptor_bytes * 8}"
            )
        words, nodes = self.descend(frame.descriptors, di_level)
        return self.bow(words), words, nodes

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.config
        parts = [
            MAGIC,
            _HEADER.pack(FORMAT_VERSION, c.k_w, c.L_w, _WEIGHTING[c.weighting], c.seed, c.max_iters,
                         self.descriptor_bytes, self.n_nodes),
        ]
        for i in range(self.n_nodes):
            w = int(self.word_of_node[i])
            idf = float(self.idf[w]) if w >= 0 else 0.0
            parts.append(_NODE.pack(int(self.parent[i]), w, idf))
            parts.append(self.centers[i].tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VocabularyTree":
        if data[: len(MAGIC)] != MAGIC:
            raise VocabularyError("not a vocabulary file (bad magic)")
        off = len(MAGIC)
        if len(data) < off + _HEADER.size:
            raise VocabularyError("truncated vocabulary header")
        version, k, L, weighting, seed, max_iters, n_bytes, n_nodes = _HEADER.unpack_from(data, off)
        if version != FORMAT_VERSION:
            raise VocabularyError(f"unsupported vocabulary version {version}")
        off += _HEADER.size
        rec = _NODE.size + n_bytes
        if len(data) != off + n_nodes * rec:
            raise VocabularyError(f"vocabulary size mismatch: expected {off + n_nodes * rec} bytes, got {len(data)}")
        names = {v: k for k, v in _WEIGHTING.items()}
        if weighting not in names:
            raise VocabularyError(f"unknown weighting code {weighting}")
        config = VocabConfig(k, L, names[weighting], seed, max_iters)
        parent = np.empty(n_nodes, dtype=np.int32)
        word = np.empty(n_nodes, dtype=np.int32)
        idf_by_node = np.empty(n_nodes)
        centers = np.empty((n_nodes, n_bytes), dtype=np.uint8)
        for i in range(n_nodes):
            parent[i], word[i], idf_by_node[i] = _NODE.unpack_from(data, off)
            centers[i] = np.frombuffer(data, dtype=np.uint8, count=n_bytes, offset=off + _NODE.size)
            off += rec
        leaves = word >= 0
        n_words = int(leaves.sum())
        if sorted(word[leaves].tolist()) != list(range(n_words)):
            raise VocabularyError("word ids are not dense")
        if n_nodes == 0 or parent[0] != -1 or np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, n_nodes)):
            raise VocabularyError("node records are not level-ordered")
        idf = np.empty(n_words)
        idf[word[leaves]] = idf_by_node[leaves]
        return cls(config, centers, parent, word, idf)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "VocabularyTree":
        return cls.from_bytes(Path(path).read_bytes())


def train(descriptors: np.ndarray, config: VocabConfig = VocabConfig(), image_ids: np.ndarray | None = None) -> VocabularyTree:
    """Build the tree by recursive k-medians, breadth first.

    ``image_ids`` (one per descriptor) enables idf = log(N_images / n_images_with_word);
    without it every word gets idf 1. Nodes holding fewer than ``k_w`` descriptors,
    or fewer than ``k_w`` distinct ones, stay leaves.
    """
    pool = np.ascontiguousarray(descriptors, dtype=np.uint8)
    if pool.ndim != 2 or pool.shape[1] % 8:
        raise ValueError("descriptors must be an (n, n_bytes) uint8 array with n_bytes a multiple of 8")
    if len(pool) < config.k_w:
        raise ValueError(f"pool of {len(pool)} descriptors is smaller than k_w={config.k_w}")
    k, L = config.k_w, config.L_w

    centers = [np.zeros(pool.shape[1], dtype=np.uint8)]
    parent = [-1]
    level = [0]
    members: dict[int, np.ndarray] = {0: np.arange(len(pool))}
    queue = deque([0])
    while queue:
        node = queue.popleft()
        idx = members.pop(node)
        if level[node] == L or len(idx) < k or len(np.unique(pool[idx], axis=0)) < k:
            continue
        rng = np.random.default_rng([config.seed, node])
        c, labels = kmedians(pool[idx], k, rng, config.max_iters)
        for j in range(len(c)):
            child = len(parent)
            centers.append(c[j])
            parent.append(node)
            level.append(level[node] + 1)
            members[child] = idx[labels == j]
            queue.append(child)

    parent_arr = np.array(parent, dtype=np.int32)
    is_leaf = np.ones(len(parent), dtype=bool)
    is_leaf[parent_arr[1:]] = False
    word = np.full(len(parent), -1, dtype=np.int32)
    word[is_leaf] = np.arange(int(is_leaf.sum()))
    tree = VocabularyTree(config, np.array(centers, dtype=np.uint8), parent_arr, word, np.ones(int(is_leaf.sum())))
    if image_ids is not None:
        image_ids = np.asarray(image_ids)
        if len(image_ids) != len(pool):
            raise ValueError("image_ids must have one entry per descriptor")
        tree.idf = document_idf(tree.quantize(pool), image_ids, tree.n_words)
    return tree


def document_idf(word_ids: np.ndarray, image_ids: np.ndarray, n_words: int) -> np.ndarray:
    """log(N / n_i) with n_i the number of images containing word i (unseen words count as 1)."""
    n_images = len(np.unique(image_ids))
    pairs = np.unique(np.stack([word_ids, np.asarray(image_ids, dtype=np.int64)], axis=1), axis=0)
    df = np.bincount(pairs[:, 0], minlength=n_words).astype(np.float64)
    return np.log(n_images / np.maximum(df, 1.0))
