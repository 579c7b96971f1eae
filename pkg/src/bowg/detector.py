"""Minimal multi-scale FAST-9 / BRIEF-256 detector.

This exists so raw images can be turned into a features file. Everything
downstream is detector-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .features import FrameFeatures

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)  # fmt: skip
ARC = 9

_PATTERN_SEED = 0x0B0A6


@dataclass(frozen=True)
class DetectorConfig:
    max_features: int = 500
    n_levels: int = 8
    scale_factor: float = 1.2
    fast_threshold: int = 20
    patch_size: int = 31
    descriptor_bits: int = 256
    steer: bool = True
    edge_threshold: int = 19


def _brief_pattern(bits: int, patch_size: int) -> np.ndarray:
    """Fixed test-point pairs, isotropic Gaussian around the patch center."""
    rng = np.random.default_rng(_PATTERN_SEED + bits)
    half = patch_size // 2
    pts = np.rint(rng.normal(0.0, patch_size / 5.0, size=(bits, 4)))
    return np.clip(pts, -half, half).astype(np.int64)  # columns: x1, y1, x2, y2


def fast_score(image: np.ndarray, threshold: int) -> np.ndarray:
    """FAST-9 corner score per pixel, zero where the segment test fails.

    The score is the largest threshold at which the pixel still passes, i.e.
    ``max`` over 9-pixel arcs of the ``min`` absolute difference along the arc,
    separately for the brighter and darker cases. The 3-pixel border is zero.
    """
    img = np.asarray(image, dtype=np.int32)
    h, w = img.shape
    score = np.zeros((h, w), dtype=np.int32)
    if h < 7 or w < 7:
        return score
    c = img[3 : h - 3, 3 : w - 3]
    ring = np.stack([img[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx] for dx, dy in CIRCLE])
    ring = np.concatenate([ring, ring[: ARC - 1]])
    best = np.zeros_like(c)
    for diff in (ring - c, c - ring):
        # sliding minimum over 9 consecutive ring positions
        run = diff.copy()
        n = len(diff)
        for k in range(1, ARC):
            run[: n - k] = np.minimum(run[: n - k], diff[k:])
        best = np.maximum(best, run[:16].max(axis=0))
    best[best <= threshold] = 0
    score[3 : h - 3, 3 : w - 3] = best
    return score


def _nonmax(score: np.ndarray) -> np.ndarray:
    peak = ndimage.maximum_filter(score, size=3, mode="constant")
    return (score > 0) & (score == peak)


def _orientation(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, radius: int) -> np.ndarray:
    """Intensity-centroid angle in [0, 2*pi) over a circular patch."""
    off = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    disk = dx**2 + dy**2 <= radius**2
    dx, dy = dx[disk], dy[disk]
    vals = img[ys[:, None] + dy[None, :], xs[:, None] + dx[None, :]].astype(np.float64)
    m10 = (vals * dx).sum(axis=1)
    m01 = (vals * dy).sum(axis=1)
    return np.mod(np.arctan2(m01, m10), 2 * np.pi)


def _brief(smooth: np.ndarray, ys, xs, angles, pattern, steer: bool) -> np.ndarray:
    n = len(ys)
    x1, y1, x2, y2 = (pattern[:, i][None, :] for i in range(4))
    if steer:
        c = np.cos(angles)[:, None]
        s = np.sin(angles)[:, None]
        rx1, ry1 = np.rint(c * x1 - s * y1), np.rint(s * x1 + c * y1)
        rx2, ry2 = np.rint(c * x2 - s * y2), np.rint(s * x2 + c * y2)
    else:
        rx1, ry1, rx2, ry2 = (np.broadcast_to(a, (n, len(pattern))) for a in (x1, y1, x2, y2))
    h, w = smooth.shape
    ya = np.clip(ys[:, None] + ry1.astype(np.int64), 0, h - 1)
    xa = np.clip(xs[:, None] + rx1.astype(np.int64), 0, w - 1)
    yb = np.clip(ys[:, None] + ry2.astype(np.int64), 0, h - 1)
    xb = np.clip(xs[:, None] + rx2.astype(np.int64), 0, w - 1)
    bits = smooth[ya, xa] < smooth[yb, xb]
    return np.packbits(bits, axis=1, bitorder="little")


def _pyramid(image: np.ndarray, config: DetectorConfig) -> list[np.ndarray]:
    levels = [image.astype(np.float64)]
    for i in range(1, config.n_levels):
        scale = config.scale_factor**-i
        h = int(round(image.shape[0] * scale))
        w = int(round(image.shape[1] * scale))
        if min(h, w) < config.patch_size + 2:
            break
        zoom = (h / image.shape[0], w / image.shape[1])
        levels.append(ndimage.zoom(levels[0], zoom, order=1, mode="nearest", grid_mode=True))
    return levels


def detect(image: np.ndarray, config: DetectorConfig = DetectorConfig(), frame_id: int = 0, timestamp: float = 0.0) -> FrameFeatures:
    """Detect FAST corners over an image pyramid and describe them with BRIEF."""
    if config.n_levels < 1 or config.scale_factor <= 1:
        raise ValueError("need n_levels >= 1 and scale_factor > 1")
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a nonempty 2-D grayscale image")
    height, width = img.shape
    n_bytes = config.descriptor_bits // 8
    empty = FrameFeatures(frame_id, timestamp, width, height, descriptors=np.zeros((0, n_bytes), np.uint8))
    if min(height, width) < config.patch_size:
        return empty

    pattern = _brief_pattern(config.descriptor_bits, config.patch_size)
    half = config.patch_size // 2
    border = max(config.edge_threshold, half + 1)
    # per-level candidates: (response, level, y, x)
    found = []
    levels = _pyramid(img, config)
    for lvl, im in enumerate(levels):
        score = fast_score(np.rint(im).astype(np.int32), config.fast_threshold)
        mask = _nonmax(score)
        mask[:border] = mask[-border:] = False
        mask[:, :border] = mask[:, -border:] = False
        ys, xs = np.nonzero(mask)
        found.append((score[ys, xs], np.full(len(ys), lvl), ys, xs))
    resp = np.concatenate([f[0] for f in found])
    lvl = np.concatenate([f[1] for f in found])
    ys = np.concatenate([f[2] for f in found])
    xs = np.concatenate([f[3] for f in found])
    if len(resp) == 0:
        return empty
    # strongest first; ties by level, row, column
    order = np.lexsort((xs, ys, lvl, -resp))[: config.max_features]
    order = order[np.lexsort((xs[order], ys[order], lvl[order]))]
    lvl, ys, xs = lvl[order], ys[order], xs[order]

    xy = np.zeros((len(order), 2))
    sizes = np.zeros(len(order))
    angles = np.zeros(len(order))
    desc = np.zeros((len(order), n_bytes), dtype=np.uint8)
    for level in np.unique(lvl):
        sel = np.nonzero(lvl == level)[0]
        im = levels[level]
        scale = config.scale_factor**level
        angles[sel] = _orientation(im, ys[sel], xs[sel], half)
        smooth = ndimage.gaussian_filter(im, 2.0, mode="nearest")
        desc[sel] = _brief(smooth, ys[sel], xs[sel], angles[sel], pattern, config.steer)
        # map level pixel centers back to level-0 coordinates
        xy[sel, 0] = (xs[sel] + 0.5) * scale - 0.5
        xy[sel, 1] = (ys[sel] + 0.5) * scale - 0.5
        sizes[sel] = config.patch_size * scale
    return FrameFeatures(frame_id, timestamp, width, height, xy, sizes, angles, lvl, desc)


def read_pgm(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")
