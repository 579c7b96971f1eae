"""Correspondence search and fundamental-matrix verification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import hamming_matrix


@dataclass(frozen=True)
class GeometryConfig:
    max_hamming: int = 64
    ratio: float = 0.8
    epi_threshold: float = 2.0
    ransac_iters: int = 500
    ransac_seed: int = 0
    ransac_confidence: float = 0.999
    min_inliers: int = 12
    distance: str = "symmetric"  # or "sampson"
    exhaustive: bool = False


@dataclass
class Matches:
    """Correspondences as parallel arrays, plus the number of descriptor comparisons made."""

    query_idx: np.ndarray
    match_idx: np.ndarray
    distance: np.ndarray
    comparisons: int = 0

    def __len__(self) -> int:
        return len(self.query_idx)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.query_idx.tolist(), self.match_idx.tolist()))


def _match_block(d: np.ndarray, config: GeometryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mutual nearest neighbours passing the distance cap and ratio test (query side)."""
    na, nb = d.shape
    best_b = np.argmin(d, axis=1)
    best = d[np.arange(na), best_b]
    if nb > 1:
        second = np.partition(d, 1, axis=1)[:, 1].astype(np.float64)
    else:
        second = np.full(na, np.inf)
    best_a = np.argmin(d, axis=0)
    ok = (best <= config.max_hamming) & (best < config.ratio * second) & (best_a[best_b] == np.arange(na))
    ia = np.nonzero(ok)[0]
    return ia, best_b[ia]


def match_features(desc_a: np.ndarray, desc_b: np.ndarray, nodes_a: dict | None = None, nodes_b: dict | None = None,
                   config: GeometryConfig = GeometryConfig()) -> Matches:
    """Match two descriptor sets.

    With direct indexes (node id -> feature indices) only features sharing a
    node are compared; without them, or with ``config.exhaustive``, all pairs.
    """
    empty = np.zeros(0, dtype=np.int64)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return Matches(empty, empty, empty, 0)
    if config.exhaustive or nodes_a is None or nodes_b is None:
        d = hamming_matrix(desc_a, desc_b)
        ia, ib = _match_block(d, config)
        return Matches(ia, ib, d[ia, ib].astype(np.int64), d.size)
    qa, qb, qd = [], [], []
    comparisons = 0
    for node in sorted(nodes_a.keys() & nodes_b.keys()):
        fa, fb = nodes_a[node], nodes_b[node]
        d = hamming_matrix(desc_a[fa], desc_b[fb])
        comparisons += d.size
        ia, ib = _match_block(d, config)
        qa.append(fa[ia])
        qb.append(fb[ib])
        qd.append(d[ia, ib])
    if not qa:
        return Matches(empty, empty, empty, comparisons)
    qa, qb, qd = np.concatenate(qa), np.concatenate(qb), np.concatenate(qd)
    order = np.argsort(qa, kind="stable")
    return Matches(qa[order], qb[order], qd[order].astype(np.int64), comparisons)


# -- fundamental matrix -----------------------------------------------------


def _hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / mean_dist if mean_dist > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    """Zero the smallest singular value, scale to unit Frobenius norm, fix the sign."""
    u, s, vt = np.linalg.svd(F)
    s[2] = 0.0
    s /= np.linalg.norm(s)
    F = (u * s) @ vt
    k = np.argmax(np.abs(F))
    return -F if F.flat[k] < 0 else F


def eight_point(pa: np.ndarray, pb: np.ndarray) -> np.ndarray | None:
    """Normalized 8-point estimate of F with pb^T F pa = 0 (least squares for > 8 points)."""
    if len(pa) < 8:
        return None
    na, Ta = _hartley(pa)
    nb, Tb = _hartley(pb)
    xa, ya = na[:, 0], na[:, 1]
    xb, yb = nb[:, 0], nb[:, 1]
    A = np.stack([xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, np.ones(len(pa))], axis=1)
    _, s, vt = np.linalg.svd(A)
    if s[0] == 0 or (len(s) >= 8 and s[7] / s[0] < 1e-12):
        return None
    F = vt[-1].reshape(3, 3)
    u, sv, vt2 = np.linalg.svd(F)
    sv[2] = 0.0
    F = Tb.T @ ((u * sv) @ vt2) @ Ta
    return enforce_rank2(F)


def epipolar_residuals(F: np.ndarray, pa: np.ndarray, pb: np.ndarray, kind: str = "symmetric") -> np.ndarray:
    """Per-correspondence residual in pixels.

    ``symmetric``: RMS of the distances of pb to the line F pa and of pa to the
    line F^T pb. ``sampson``: first-order geometric error.
    """
    ha = np.column_stack([pa, np.ones(len(pa))])
    hb = np.column_stack([pb, np.ones(len(pb))])
    lb = ha @ F.T  # lines in image b
    la = hb @ F  # lines in image a
    e = np.einsum("ij,ij->i", hb, lb)
    na = la[:, 0] ** 2 + la[:, 1] ** 2
    nb = lb[:, 0] ** 2 + lb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "sampson":
            r = np.abs(e) / np.sqrt(na + nb)
        elif kind == "symmetric":
            r = np.sqrt((e * e / na + e * e / nb) / 2)
        else:
            raise ValueError(f"unknown epipolar distance {kind!r}")
    return np.where(np.isfinite(r), r, np.inf)


def _collinear(p: np.ndarray) -> bool:
    return bool(_collinear_batch(p[None])[0])


def _collinear_batch(p: np.ndarray) -> np.ndarray:
    """Per sample (B, m, 2): True when the points are (nearly) on one line."""
    s = np.linalg.svd(p - p.mean(axis=1, keepdims=True), compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (s[:, 0] == 0) | (s[:, 1] / s[:, 0] < 1e-3)


def _eight_point_batch(pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimal 8-point solves for B samples (B, 8, 2); returns (F (B, 3, 3), valid mask)."""
    B = len(pa)

    def norm(p):
        c = p.mean(axis=1, keepdims=True)
        d = np.sqrt(((p - c) ** 2).sum(axis=2)).mean(axis=1)
        sc = np.where(d > 0, math.sqrt(2) / np.where(d > 0, d, 1), 1.0)
        T = np.zeros((B, 3, 3))
        T[:, 0, 0] = T[:, 1, 1] = sc
        T[:, 0, 2] = -sc * c[:, 0, 0]
        T[:, 1, 2] = -sc * c[:, 0, 1]
        T[:, 2, 2] = 1
        return (p - c) * sc[:, None, None], T

    na, Ta = norm(pa)
    nb, Tb = norm(pb)
    xa, ya, xb, yb = na[..., 0], na[..., 1], nb[..., 0], nb[..., 1]
    A = np.stack([xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, np.ones_like(xa)], axis=2)
    A9 = np.concatenate([A, np.zeros((B, 1, 9))], axis=1)  # square so the null vector is the last row of vt
    _, sv, vt = np.linalg.svd(A9)
    valid = (sv[:, 0] > 0) & (sv[:, 7] / np.where(sv[:, 0] > 0, sv[:, 0], 1) >= 1e-12)
    F = vt[:, -1].reshape(B, 3, 3)
    u, s3, vt3 = np.linalg.svd(F)
    s3[:, 2] = 0
    F = np.transpose(Tb, (0, 2, 1)) @ ((u * s3[:, None, :]) @ vt3) @ Ta
    return F, valid


def _canonical_batch(F: np.ndarray) -> np.ndarray:
    """Unit Frobenius norm, largest-magnitude entry positive (as enforce_rank2)."""
    F = F / np.linalg.norm(F.reshape(len(F), 9), axis=1)[:, None, None]
    flat = F.reshape(len(F), 9)
    sign = np.sign(flat[np.arange(len(F)), np.argmax(np.abs(flat), axis=1)])
    return F * np.where(sign < 0, -1.0, 1.0)[:, None, None]


def _residuals_batch(F: np.ndarray, pa: np.ndarray, pb: np.ndarray, kind: str) -> np.ndarray:
    """epipolar_residuals for a stack of B matrices: (B, n)."""
    ha = np.column_stack([pa, np.ones(len(pa))])
    hb = np.column_stack([pb, np.ones(len(pb))])
    lb = np.einsum("nj,bij->bni", ha, F)
    la = np.einsum("ni,bij->bnj", hb, F)
    e = np.einsum("nj,bnj->bn", hb, lb)
    na = la[..., 0] ** 2 + la[..., 1] ** 2
    nb = lb[..., 0] ** 2 + lb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "sampson":
            r = np.abs(e) / np.sqrt(na + nb)
        elif kind == "symmetric":
            r = np.sqrt((e * e / na + e * e / nb) / 2)
        else:
            raise ValueError(f"unknown epipolar distance {kind!r}")
    return np.where(np.isfinite(r), r, np.inf)


def _needed_iterations(inliers: int, n: int, config: GeometryConfig) -> int:
    """Draws needed to hit an all-inlier 8-sample (without replacement) with the configured confidence."""
    if inliers < 8:
        return config.ransac_iters
    p = 1.0
    for i in range(8):
        p *= (inliers - i) / (n - i)
    if p >= 1:
        return 1
    return math.ceil(math.log(1 - config.ransac_confidence) / math.log(1 - p))


def _polish(F, mask, pa, pb, config: GeometryConfig, rounds: int = 5):
    """Least-squares refits on the inlier set while they keep every inlier count and lower the cost."""
    thr2 = config.epi_threshold**2

    def cost(r):
        return np.minimum(r * r, thr2).sum()

    r = epipolar_residuals(F, pa, pb, config.distance)
    c = cost(r)
    for _ in range(rounds):
        if mask.sum() < 8:
            break
        F2 = eight_point(pa[mask], pb[mask])
        if F2 is None:
            break
        r2 = epipolar_residuals(F2, pa, pb, config.distance)
        m2, c2 = r2 <= config.epi_threshold, cost(r2)
        if m2.sum() < mask.sum() or c2 >= c:
            break
        F, mask, c = F2, m2, c2
    return F, mask


@dataclass
class FundamentalResult:
    ok: bool
    F: np.ndarray | None
    inliers: np.ndarray  # boolean mask over the input correspondences
    iterations: int = 0

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def estimate_fundamental(pa: np.ndarray, pb: np.ndarray, config: GeometryConfig = GeometryConfig()) -> FundamentalResult:
    """RANSAC over 8-point samples scored by truncated squared residual, then
    least-squares refits on the inlier set while they improve.

    Fails without trying when there are fewer than max(8, min_inliers)
    correspondences, and after RANSAC with fewer than ``min_inliers`` inliers.
    """
    pa = np.asarray(pa, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pb, dtype=np.float64).reshape(-1, 2)
    n = len(pa)
    none = np.zeros(n, dtype=bool)
    if n < max(8, config.min_inliers):
        return FundamentalResult(False, None, none)
    rng = np.random.default_rng(config.ransac_seed)
    thr2 = config.epi_threshold**2
    best_F, best_mask, best_cost = None, none, np.inf
    limit, it = config.ransac_iters, 0
    chunk = 64
    while it < limit:
        b = min(chunk, limit - it)
        samples = np.argpartition(rng.random((b, n)), 8, axis=1)[:, :8]
        sa, sb = pa[samples], pb[samples]
        ok = ~(_collinear_batch(sa) | _collinear_batch(sb))
        Fs, valid = _eight_point_batch(sa, sb)
        ok &= valid
        Fs = _canonical_batch(np.where(ok[:, None, None], Fs, np.eye(3)))
        r = _residuals_batch(Fs, pa, pb, config.distance)
        masks = r <= config.epi_threshold
        costs = np.minimum(r * r, thr2).sum(axis=1)  # truncated quadratic, favours accurate models
        # scan hypotheses in draw order so the adaptive limit behaves as in a sequential loop
        for i in range(b):
            it += 1
            if ok[i] and costs[i] < best_cost:
                best_F, best_mask, best_cost = Fs[i], masks[i], costs[i]
                limit = min(limit, max(it, _needed_iterations(int(masks[i].sum()), n, config)))
            if it >= limit:
                break
    if best_F is None:
        return FundamentalResult(False, None, none, it)
    best_F, best_mask = _polish(best_F, best_mask, pa, pb, config)
    best_count = int(best_mask.sum())
    return FundamentalResult(best_count >= config.min_inliers, best_F, best_mask, it)


def verify_pair(desc_a, xy_a, desc_b, xy_b, nodes_a=None, nodes_b=None, config: GeometryConfig = GeometryConfig()):
    """Match then estimate F; returns (FundamentalResult, Matches)."""
    m = match_features(desc_a, desc_b, nodes_a, nodes_b, config)
    res = estimate_fundamental(np.asarray(xy_a)[m.query_idx], np.asarray(xy_b)[m.match_idx], config)
    return res, m
