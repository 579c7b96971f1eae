"""Shared builders for synthetic frames and sequences."""

from __future__ import annotations

import numpy as np

from bowg.bench.synth import WordModel, flip_bits
from bowg.features import FrameFeatures


def random_frame(rng, word_model: WordModel, n: int, frame_id: int = 0, width: int = 640, height: int = 480,
                 words=None, flips: int = 3, integer_xy: bool = False, size_range=(4.0, 40.0)) -> FrameFeatures:
    """Frame with ``n`` noisy prototype descriptors at random positions."""
    if words is None:
        words = rng.integers(0, word_model.n_words, n)
    words = np.asarray(words)
    desc = flip_bits(word_model.prototypes[words], flips, rng) if n else np.zeros((0, 32), np.uint8)
    if integer_xy:
        xy = np.stack([rng.integers(0, width, n), rng.integers(0, height, n)], axis=1).astype(float)
        size = rng.integers(int(size_range[0]), int(size_range[1]) + 1, n).astype(float)
    else:
        xy = np.stack([rng.uniform(0, width, n), rng.uniform(0, height, n)], axis=1)
        size = rng.uniform(*size_range, n)
    return FrameFeatures(frame_id, float(frame_id), width, height, xy, size, np.full(n, np.nan),
                         np.zeros(n, np.int32), desc)


def place_sequence(rng, word_model: WordModel, n_frames: int, max_features: int = 500, n_places: int = 8,
                   empty_rate: float = 0.03) -> list[FrameFeatures]:
    """Random walk over a few places; each place is a fixed set of (word, position) landmarks.

    Consecutive frames mostly stay at the same place, so temporal fusion and
    group scores see realistic overlap; some frames are empty or pure noise.
    """
    places = []
    for _ in range(n_places):
        k = int(rng.integers(1, max_features + 1))
        words = rng.integers(0, word_model.n_words, k)
        xy = np.stack([rng.uniform(0, 640, k), rng.uniform(0, 480, k)], axis=1)
        places.append((words, xy, rng.uniform(4, 40, k)))
    frames, p = [], 0
    for t in range(n_frames):
        u = rng.random()
        if u < empty_rate:
            frames.append(random_frame(rng, word_model, 0, t))
            continue
        if u < 2 * empty_rate:
            frames.append(random_frame(rng, word_model, int(rng.integers(1, max_features + 1)), t,
                                       integer_xy=True))
            continue
        if rng.random() < 0.15:
            p = int(rng.integers(n_places))
        words, xy, size = places[p]
        keep = rng.random(len(words)) < rng.uniform(0.5, 1.0)
        kw, kxy, ks = words[keep], xy[keep] + rng.normal(0, 1.0, (int(keep.sum()), 2)), size[keep]
        extra = int(rng.integers(0, max(1, max_features - len(kw)) // 4 + 1))
        ew = rng.integers(0, word_model.n_words, extra)
        n = len(kw) + extra
        desc = flip_bits(word_model.prototypes[np.concatenate([kw, ew])], 3, rng)
        fxy = np.concatenate([kxy, np.stack([rng.uniform(0, 640, extra), rng.uniform(0, 480, extra)], axis=1)])
        fs = np.concatenate([ks, rng.uniform(4, 40, extra)])
        frames.append(FrameFeatures(t, float(t), 640, 480, fxy, fs, np.full(n, np.nan), np.zeros(n, np.int32), desc))
    return frames
