"""Brute-force reference implementations used by the tests.

Everything here is written from the formulas directly, with dense arrays and
plain loops, and shares no code with the package beyond the vocabulary tree
(which only supplies word ids and idf values).
"""

from __future__ import annotations

import math

import numpy as np


def pairwise_group_counts(xy, size, words, n_words):
    """Raw group weights by the O(n^2) definition: for each feature, count the
    other features strictly closer than its size, summed per word."""
    xy = np.asarray(xy, dtype=np.float64)
    out = np.zeros(n_words, dtype=np.int64)
    n = len(xy)
    for a in range(n):
        c = 0
        for b in range(n):
            if a != b and math.hypot(xy[a, 0] - xy[b, 0], xy[a, 1] - xy[b, 1]) < size[a]:
                c += 1
        out[words[a]] += c
    return out


def pairwise_group_counts_np(xy, size, words, n_words):
    """Same as ``pairwise_group_counts`` with a full distance matrix."""
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) == 0:
        return np.zeros(n_words, dtype=np.int64)
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    close = d < np.asarray(size)[:, None]
    np.fill_diagonal(close, False)
    return np.bincount(words, weights=close.sum(axis=1), minlength=n_words).astype(np.int64)


def dense_bow(words, idf):
    v = np.zeros(len(idf))
    if len(words) == 0:
        return v
    tf = np.bincount(words, minlength=len(idf)) / len(words)
    v = tf * idf
    s = v.sum()
    return v / s if s > 0 else np.zeros(len(idf))


def histogram(xy, width, height, m):
    v = np.zeros(m)
    for x, y in xy:
        a = math.atan2(y - height / 2, x - width / 2) % (2 * math.pi)
        v[min(int(a // (2 * math.pi / m)), m - 1)] += 1
    n = math.sqrt((v * v).sum())
    return v / n if n else v


def dist_score(vt, vj, literal_max=False):
    if not vt.any() or not vj.any():
        return 0.0
    m = len(vt)
    ds = [math.sqrt(sum((vt[(r + i) % m] - vj[r]) ** 2 for r in range(m))) for i in range(m)]
    return max(ds) if literal_max else 1 - min(ds) / math.sqrt(2)


class LinearScanDatabase:
    """Exhaustive reference for the database query.

    Keeps dense per-frame vectors and its own cumulative group table and
    temporal cache; every query scores every stored frame one by one.
    """

    def __init__(self, tree, scoring, refresh_refined=False):
        self.idf = tree.idf
        self.tree = tree
        self.W = len(tree.idf)
        self.cfg = scoring
        self.refresh = refresh_refined
        self.bows, self.raws, self.refined, self.dists = [], [], [], []
        self.cum = np.zeros(self.W)
        self.total = 0.0
        self.prev = None  # fused values of the previous query, by ordinal

    def _features(self, frame):
        words = self.tree.quantize(frame.descriptors)
        raw = pairwise_group_counts_np(frame.xy, frame.size, words, self.W).astype(np.float64)
        return (dense_bow(words, self.idf), raw,
                histogram(frame.xy, frame.width, frame.height, self.cfg.m_batches))

    def _refine(self, raw, cum, total):
        s = raw.sum()
        out = np.zeros(self.W)
        for i in np.nonzero(raw)[0]:
            out[i] = raw[i] / s * math.log(total / cum[i])
        return out

    @staticmethod
    def _group_score(a, b):
        p = float((a * b).sum())
        return 1.0 if p > 1 else 1 - math.sqrt(1 - p)

    def query(self, frame, alpha, recent_exclusion):
        bow, raw, dist = self._features(frame)
        n = len(self.bows)
        cfg = self.cfg
        if n == 0:
            self.prev = None
            return None, (bow, raw, dist)
        cum, total = self.cum + raw, self.total + raw.sum()
        g = self._refine(raw, cum, total)
        stored = [self._refine(r, cum, total) for r in self.raws] if self.refresh else self.refined

        s_w = [1 - 0.5 * np.abs(bow - b).sum() if bow.any() and b.any() else 0.0 for b in self.bows]
        if not s_w[n - 1] >= cfg.min_self_score:
            self.prev = None
            return None, (bow, raw, dist)
        s_g = [self._group_score(g, r) for r in stored]
        lit = cfg.distribution_literal_max
        s_d = [dist_score(dist, d, lit) for d in self.dists] if cfg.use_distribution else []
        l1 = cfg.word_weight
        fused = np.zeros(n)
        for j in range(n):
            ew = s_w[j] / s_w[n - 1]
            eg = s_g[j] / s_g[n - 1] if s_g[n - 1] >= cfg.min_self_score else 0.0
            if cfg.use_distribution:
                ed = s_d[j] / s_d[n - 1] if s_d[n - 1] >= cfg.min_self_score else 0.0
                eta = l1 * ew + cfg.lambda2 * eg + (1 - l1 - cfg.lambda2) * ed
            else:
                eta = l1 * ew + (1 - l1) * eg
            before = 0.0
            if self.prev is not None and j >= 1 and j - 1 < len(self.prev):
                before = self.prev[j - 1]
            w = cfg.w_max / (1 + ((eta - before) / cfg.alpha_temporal) ** 2)
            fused[j] = w * before + (1 - w) * eta
        self.prev = fused
        out = []
        for j in range(n):
            if j < n - recent_exclusion and self.bows[j].any() and fused[j] > alpha:
                out.append((j, float(fused[j])))
        out.sort(key=lambda c: (-c[1], c[0]))
        return out, (bow, raw, dist)

    def add(self, prepared):
        bow, raw, dist = prepared
        self.cum += raw
        self.total += raw.sum()
        self.bows.append(bow)
        self.raws.append(raw)
        self.refined.append(self._refine(raw, self.cum, self.total))
        self.dists.append(dist)
