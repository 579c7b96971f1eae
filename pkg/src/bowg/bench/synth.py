"""Synthetic pipe-world sequences with controllable perceptual aliasing.

The world is a ring-shaped pipe. Landmarks sit on the wall; the camera moves
along the axis looking forward, so features form a ring around the image
center. The ring is split into areas. In aliasing mode all areas draw words
from one small shared pool with identical overall frequencies. Only the
co-occurrence layout differs: each area has its own cluster words, which
appear in tight spatial clusters and nowhere else. Each area also has its own
angular feature profile.

Descriptors come from a hierarchical prototype tree, so a vocabulary trained
on samples from it recovers well-separated words.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..features import FrameFeatures, save_features
from ..vocab import VocabConfig, VocabularyTree, train
from .evaluate import GroundTruth


def flip_bits(desc: np.ndarray, n_flips: int, rng: np.random.Generator) -> np.ndarray:
    """Flip up to ``n_flips`` random bits per row (positions drawn with replacement)."""
    desc = np.asarray(desc, dtype=np.uint8)
    if n_flips <= 0 or len(desc) == 0:
        return desc.copy()
    n, nb = desc.shape
    mask = np.zeros((n, nb * 8), dtype=bool)
    mask[np.arange(n)[:, None], rng.integers(0, nb * 8, (n, n_flips))] = True
    return desc ^ np.packbits(mask, axis=1, bitorder="little")


class WordModel:
    """k-ary prototype tree of depth L; leaves are the ideal visual words."""

    def __init__(self, k: int, L: int, bits: int = 256, level_flips: list[int] | None = None, seed: int = 0):
        self.k, self.L, self.bits = k, L, bits
        if level_flips is None:
            level_flips = [max(10, int(96 / 2**lvl)) for lvl in range(L)]
        rng = np.random.default_rng([seed, 7001])
        level = rng.integers(0, 256, (1, bits // 8), dtype=np.uint8)
        for flips in level_flips:
            level = flip_bits(np.repeat(level, k, axis=0), flips, rng)
        self.prototypes = level

    @property
    def n_words(self) -> int:
        return len(self.prototypes)

    def training_pool(self, per_word: int, flips: int, n_images: int, seed: int = 0):
        """Noisy samples of every prototype, spread over ``n_images`` pseudo-images."""
        rng = np.random.default_rng([seed, 7002])
        words = np.repeat(np.arange(self.n_words), per_word)
        desc = flip_bits(self.prototypes[words], flips, rng)
        return desc, rng.integers(0, n_images, len(desc))

    def train_vocabulary(self, per_word: int = 12, flips: int = 6, n_images: int = 400, seed: int = 0) -> VocabularyTree:
        desc, images = self.training_pool(per_word, flips, n_images, seed)
        return train(desc, VocabConfig(k_w=self.k, L_w=self.L, seed=seed), image_ids=images)


@dataclass(frozen=True)
class ScenarioConfig:
    n_areas: int = 4
    frames_per_area: int = 10
    connector_frames: int = 6  # plain pipe closing the ring
    gap_frames: int = 0  # plain pipe between consecutive areas
    revisit_area: int = 0
    revisit_frames: int | None = None  # default: the whole area
    laps: int = 1  # full laps before the revisit segment
    aliasing: bool = True
    pool_size: int = 24
    cluster_words: int = 6
    cluster_fraction: float = 0.25
    cluster_size: int = 4
    cluster_spread: float = 0.01  # wall units
    features_per_frame: int = 250
    p_detect: float = 0.5
    p_member: float = 0.9  # per-member detection once its cluster is detected
    clutter_fraction: float = 0.2
    angular_concentration: float = 2.0
    angular_uniform_mix: float = 0.4
    roll_std: float = 0.0
    step: float = 0.5
    depth_near: float = 1.0
    depth_far: float = 3.0
    width: int = 640
    height: int = 480
    focal: float = 300.0
    patch_size: float = 31.0
    size_scale: float = 0.4  # keypoint size = patch_size * size_scale / depth
    pixel_noise: float = 0.5
    landmark_bits: int = 16
    observation_bits: int = 3
    spurious_frames: int = 0  # upper bound: slots with no eligible earlier area are skipped
    gt_radius: float = 1.0
    overlap_floor: float = 0.8  # minimum between-area word overlap the aliasing scenario must reach
    vocab_k: int = 4
    vocab_L: int = 3
    seed: int = 0

    @property
    def area_length(self) -> float:
        return self.frames_per_area * self.step


@dataclass
class Scenario:
    config: ScenarioConfig
    frames: list[FrameFeatures]
    ground_truth: GroundTruth
    camera_z: np.ndarray  # ring coordinate of every frame
    frame_area: np.ndarray  # area index per frame (-1 connector, -2 spurious)
    lap: np.ndarray
    area_words: list[np.ndarray] = field(default_factory=list)
    word_model: WordModel | None = None

    def frames_in(self, area: int, lap: int = 0) -> np.ndarray:
        return np.nonzero((self.frame_area == area) & (self.lap == lap))[0]


def _sample_angles(rng, n, mu, cfg: ScenarioConfig) -> np.ndarray:
    th = rng.vonmises(mu, cfg.angular_concentration, n)
    uni = rng.random(n) < cfg.angular_uniform_mix
    th[uni] = rng.uniform(0, 2 * math.pi, uni.sum())
    return np.mod(th, 2 * math.pi)


def generate(cfg: ScenarioConfig, word_model: WordModel | None = None) -> Scenario:
    """Render the scenario: lap(s) over every area and the connector, then the revisit segment."""
    rng = np.random.default_rng([cfg.seed, 9001])
    if word_model is None:
        word_model = WordModel(cfg.vocab_k, cfg.vocab_L, seed=cfg.seed)
    W = word_model.n_words
    area_len = cfg.area_length
    gap_len = cfg.gap_frames * cfg.step
    conn_len = cfg.connector_frames * cfg.step
    segments = []  # (area, start, length); area -1 is plain pipe
    z = 0.0
    for a in range(cfg.n_areas):
        segments.append((a, z, area_len))
        z += area_len
        last = a == cfg.n_areas - 1
        segments.append((-1, z, conn_len if last else gap_len))
        z += conn_len if last else gap_len
    ring = z
    area_start = {a: z0 for a, z0, _ in segments if a >= 0}
    mid_depth = (cfg.depth_near + cfg.depth_far) / 2
    wall_per_unit = 2 * math.pi  # unit radius

    # visible wall per frame = 2*pi*(far - near); landmark density to hit the feature target
    landmark_frac = 1 - cfg.clutter_fraction
    density = cfg.features_per_frame * landmark_frac / cfg.p_detect / (wall_per_unit * (cfg.depth_far - cfg.depth_near))

    pool = rng.choice(W, size=min(cfg.pool_size, W), replace=False) if cfg.aliasing else np.arange(W)
    # cluster word sets: disjoint slices of the pool while it lasts, then random
    shuffled = rng.permutation(pool)
    cluster_sets = []
    for a in range(cfg.n_areas):
        lo = a * cfg.cluster_words
        if lo + cfg.cluster_words <= len(shuffled):
            cluster_sets.append(np.sort(shuffled[lo : lo + cfg.cluster_words]))
        else:
            cluster_sets.append(np.sort(rng.choice(pool, size=min(cfg.cluster_words, len(pool)), replace=False)))
    lm_theta, lm_z, lm_word, lm_cluster = [], [], [], []
    next_cluster = 0
    area_words = []
    for area, z0, length in segments:
        if length <= 0 or area < 0:
            continue
        mu = 2 * math.pi * (area % max(cfg.n_areas, 1)) / max(cfg.n_areas, 1) + 0.3
        n_lm = rng.poisson(density * wall_per_unit * length)
        cw = cluster_sets[area]
        area_words.append(cw)
        n_clustered = int(round(cfg.cluster_fraction * n_lm))
        n_clusters = n_clustered // cfg.cluster_size
        # clusters: tight groups of cluster words
        c_theta = _sample_angles(rng, n_clusters, mu, cfg)
        c_z = rng.uniform(z0, z0 + length, n_clusters)
        m = n_clusters * cfg.cluster_size
        lm_theta.append(np.repeat(c_theta, cfg.cluster_size) + rng.normal(0, cfg.cluster_spread, m))
        lm_z.append(np.repeat(c_z, cfg.cluster_size) + rng.normal(0, cfg.cluster_spread, m))
        lm_word.append(rng.choice(cw, m) if m else np.zeros(0, dtype=np.int64))
        lm_cluster.append(np.repeat(np.arange(next_cluster, next_cluster + n_clusters), cfg.cluster_size))
        next_cluster += n_clusters
        # isolated landmarks: words outside this area's cluster set, so overall frequencies stay flat
        n_iso = n_lm - m
        rest = np.setdiff1d(pool, cw) if cfg.aliasing and len(cw) < len(pool) else pool
        lm_theta.append(_sample_angles(rng, n_iso, mu, cfg))
        lm_z.append(rng.uniform(z0, z0 + length, n_iso))
        lm_word.append(rng.choice(rest, n_iso))
        lm_cluster.append(np.full(n_iso, -1))
    lm_theta = np.mod(np.concatenate(lm_theta), 2 * math.pi)
    lm_z = np.mod(np.concatenate(lm_z), ring)
    lm_word = np.concatenate(lm_word).astype(np.int64)
    lm_cluster = np.concatenate(lm_cluster).astype(np.int64)
    order = np.argsort(lm_z, kind="stable")
    lm_theta, lm_z, lm_word, lm_cluster = lm_theta[order], lm_z[order], lm_word[order], lm_cluster[order]
    lm_desc = flip_bits(word_model.prototypes[lm_word], cfg.landmark_bits, rng)

    # trajectory
    per_lap = int(round(ring / cfg.step))
    revisit = cfg.frames_per_area if cfg.revisit_frames is None else cfg.revisit_frames
    start = area_start[cfg.revisit_area]
    # positions are view centers; the camera sits mid_depth behind
    view = [(i * cfg.step) % ring for i in range(per_lap * cfg.laps)]
    view += [(start + (i + 0.5) * cfg.step) % ring for i in range(revisit)]
    view = np.array(view)
    cam_z = np.mod(view - mid_depth, ring)
    travelled = np.concatenate([np.arange(per_lap * cfg.laps) * cfg.step,
                                per_lap * cfg.laps * cfg.step + start + np.arange(revisit) * cfg.step])
    lap = (travelled // ring).astype(np.int64)
    area_of = np.full(len(view), -1, dtype=np.int64)
    for a, z0, length in segments:
        if a >= 0:
            area_of[(view >= z0) & (view < z0 + length)] = a

    # spurious look-alikes: a frame of some earlier area rendered in the middle of a later one
    spurious_src: dict[int, float] = {}
    if cfg.spurious_frames and cfg.n_areas >= 2:
        later = np.nonzero((area_of >= 0) & (area_of != cfg.revisit_area) & (lap == 0))[0]
        slots = rng.choice(later, size=min(cfg.spurious_frames, len(later)), replace=False)
        for s in sorted(slots.tolist()):
            earlier = np.nonzero(area_of[: s - cfg.frames_per_area] >= 0)[0]
            earlier = earlier[(area_of[earlier] != area_of[s]) & (area_of[earlier] != cfg.revisit_area)]
            if len(earlier):
                spurious_src[s] = float(cam_z[rng.choice(earlier)])

    frames = []
    for t, z in enumerate(cam_z):
        render_z = spurious_src.get(t, z)
        roll = rng.normal(0, cfg.roll_std) if cfg.roll_std > 0 else 0.0
        frames.append(_render(t, render_z, roll, lm_theta, lm_z, lm_cluster, lm_desc, next_cluster, ring, pool, word_model, cfg, rng))
    frame_area = area_of.copy()
    for s in spurious_src:
        frame_area[s] = -2

    gt = _ground_truth(cam_z, travelled, ring, cfg, exclude=set(spurious_src))
    return Scenario(cfg, frames, gt, cam_z, frame_area, lap, area_words, word_model)


def _render(t, z_cam, roll, lm_theta, lm_z, lm_cluster, lm_desc, n_clusters, ring, pool, word_model, cfg, rng) -> FrameFeatures:
    depth = np.mod(lm_z - z_cam, ring)
    vis = np.nonzero((depth >= cfg.depth_near) & (depth <= cfg.depth_far))[0]
    # clusters are detected as a unit, isolated landmarks independently
    seen = rng.random(n_clusters + 1) < cfg.p_detect
    cl = lm_cluster[vis]
    keep = np.where(cl >= 0, seen[cl] & (rng.random(len(vis)) < cfg.p_member), rng.random(len(vis)) < cfg.p_detect)
    vis = vis[keep]
    d = depth[vis]
    th = lm_theta[vis] + roll
    cx, cy = cfg.width / 2, cfg.height / 2
    u = cx + cfg.focal * np.cos(th) / d + rng.normal(0, cfg.pixel_noise, len(vis))
    v = cy + cfg.focal * np.sin(th) / d + rng.normal(0, cfg.pixel_noise, len(vis))
    desc = flip_bits(lm_desc[vis], cfg.observation_bits, rng)
    size = cfg.patch_size * cfg.size_scale / d

    n_clutter = rng.poisson(cfg.features_per_frame * cfg.clutter_fraction)
    ct = rng.uniform(0, 2 * math.pi, n_clutter)
    cd = rng.uniform(cfg.depth_near, cfg.depth_far, n_clutter)
    cu = cx + cfg.focal * np.cos(ct) / cd
    cv = cy + cfg.focal * np.sin(ct) / cd
    cwords = rng.choice(pool, n_clutter)
    cdesc = flip_bits(word_model.prototypes[cwords], cfg.landmark_bits + cfg.observation_bits, rng)

    u = np.concatenate([u, cu])
    v = np.concatenate([v, cv])
    size = np.concatenate([size, cfg.patch_size * cfg.size_scale / cd])
    ang = np.mod(np.concatenate([th, ct]), 2 * math.pi)
    desc = np.concatenate([desc, cdesc]) if n_clutter else desc
    inside = (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height)
    perm = rng.permutation(int(inside.sum()))
    idx = np.nonzero(inside)[0][perm]
    octave = np.maximum(0, np.round(np.log(size[idx] / cfg.patch_size) / math.log(1.2))).astype(np.int32)
    xy = np.round(np.stack([u[idx], v[idx]], axis=1), 3)
    return FrameFeatures(t, float(t), cfg.width, cfg.height, xy, np.round(size[idx], 3),
                         np.round(ang[idx], 6), octave, desc[idx])


def _ground_truth(cam_z, travelled, ring, cfg: ScenarioConfig, exclude=()) -> GroundTruth:
    """(t, g) is a loop when the camera is back within gt_radius after travelling over half the ring."""
    pairs = set()
    for t in range(len(cam_z)):
        if t in exclude:
            continue
        g = np.arange(t)
        dz = np.abs(cam_z[t] - cam_z[g])
        dz = np.minimum(dz, ring - dz)
        ok = (dz <= cfg.gt_radius + 1e-9) & (travelled[t] - travelled[g] > ring / 2)
        ok &= ~np.isin(g, list(exclude))
        pairs.update((t, int(j)) for j in g[ok])
    return GroundTruth(pairs, tolerance=2)


def word_overlap(scn: Scenario, tree: VocabularyTree) -> np.ndarray:
    """Histogram intersection of word frequencies between areas (first lap)."""
    hists = []
    for a in range(scn.config.n_areas):
        words = np.concatenate([tree.quantize(scn.frames[i].descriptors) for i in scn.frames_in(a)])
        h = np.bincount(words, minlength=tree.n_words).astype(float)
        hists.append(h / h.sum())
    n = len(hists)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = np.minimum(hists[i], hists[j]).sum()
    return out


def write_scenario(scn: Scenario, out_dir: str | Path, vocabulary: VocabularyTree | None = None) -> dict[str, Path]:
    """Write features, ground truth and (optionally) the vocabulary; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"features": out / "features.txt", "ground_truth": out / "gt.txt"}
    save_features(paths["features"], scn.frames, 256)
    scn.ground_truth.save(paths["ground_truth"])
    meta = out / "scenario.txt"
    meta.write_text("".join(f"{k} = {v}\n" for k, v in asdict(scn.config).items()))
    paths["scenario"] = meta
    if vocabulary is not None:
        paths["vocabulary"] = out / "vocab.bin"
        vocabulary.save(paths["vocabulary"])
    return paths


def generate_aliasing(config: ScenarioConfig = ScenarioConfig(), seed: int | None = None, out_dir=None,
                      with_vocabulary: bool = True) -> tuple[Scenario, VocabularyTree | None]:
    """Generate the aliasing scenario and, with ``out_dir``, write features, ground truth and vocabulary."""
    if seed is not None:
        config = replace(config, seed=seed)
    scn = generate(config)
    tree = scn.word_model.train_vocabulary(seed=config.seed) if with_vocabulary else None
    if out_dir is not None:
        write_scenario(scn, out_dir, tree)
    return scn, tree


def long_sequence(n_frames: int = 10_000, seed: int = 0, **overrides) -> ScenarioConfig:
    """Non-aliasing ring of many areas; one lap then a revisit of the first areas."""
    base = dict(n_areas=100, frames_per_area=50, connector_frames=0, aliasing=False, features_per_frame=250,
                vocab_k=10, vocab_L=3, seed=seed)
    base.update(overrides)
    cfg = ScenarioConfig(**base)
    per_lap = cfg.n_areas * cfg.frames_per_area + cfg.connector_frames
    if n_frames <= per_lap:
        # a partial ring; leftover frames revisit the start
        fpa = min(cfg.frames_per_area, n_frames)
        n_areas = n_frames // fpa
        return replace(cfg, n_areas=n_areas, frames_per_area=fpa, connector_frames=0,
                       revisit_frames=n_frames - n_areas * fpa)
    return replace(cfg, revisit_frames=n_frames - per_lap)


@dataclass
class RevisitRanking:
    frame_id: int
    top: int  # best-scoring reference ordinal under the full score
    top_correct: bool  # in the revisited area or a ground-truth match
    top_q_in_area: bool
    word_confused: bool  # raw word score puts some other-area reference above some revisited-area one


def revisit_rankings(scn: Scenario, tree: VocabularyTree, scoring=None, recent_exclusion: int | None = None,
                     q: int = 5, di_level: int = 0) -> list[RevisitRanking]:
    """Replay the scenario and rank the first-lap area frames for every revisit query."""
    from ..database import Database, DatabaseConfig
    from ..scoring import ScoreCache, ScoringConfig, word_score

    scoring = scoring or ScoringConfig()
    excl = scn.config.frames_per_area if recent_exclusion is None else recent_exclusion
    db = Database(tree, DatabaseConfig(di_level=di_level), scoring.m_batches)
    refs = np.nonzero((scn.lap == 0) & (scn.frame_area >= 0))[0]
    area = scn.config.revisit_area
    in_area = scn.frame_area[refs] == area
    cache = ScoreCache()
    out = []
    for t, frame in enumerate(scn.frames):
        entry = db.prepare(frame)
        qr = db.query(entry, scoring, 0.0, excl, cache)
        cache = qr.cache
        if scn.lap[t] > 0 and scn.frame_area[t] == area and not qr.rejected:
            s = qr.eta_temp[refs]
            order = refs[np.argsort(-s, kind="stable")]
            sw = np.array([word_score(entry.bow, db.bow(j)) for j in refs])
            top = int(order[0])
            ok = scn.frame_area[top] == area or scn.ground_truth.is_match(frame.frame_id, top, 0)
            out.append(RevisitRanking(frame.frame_id, top, bool(ok), bool(np.all(scn.frame_area[order[:q]] == area)),
                                      bool(sw[~in_area].max() > sw[in_area].min())))
        db.add(entry)
    return out
