import csv
import io
from contextlib import redirect_stdout
from dataclasses import replace

import numpy as np
import pytest

from bowg.bench.evaluate import (
    Detection,
    GroundTruth,
    curve_auc,
    evaluate,
    load_matrix,
    pr_curve,
    read_results,
    timing_stats,
)
from bowg.bench.runner import RESULT_COLUMNS, TIMING_COLUMNS, run_frames, run_sequence
from bowg.bench.synth import (
    ScenarioConfig,
    generate,
    generate_aliasing,
    long_sequence,
    revisit_rankings,
    word_overlap,
    write_scenario,
)
from bowg.cli import main
from bowg.config import Settings
from bowg.features import load_features, save_features
from bowg.loop import ACCEPTED, FAILED_GEOMETRIC, FAILED_TEMPORAL, NO_CANDIDATE

from helpers import place_sequence

STATUSES = {ACCEPTED, FAILED_GEOMETRIC, FAILED_TEMPORAL, NO_CANDIDATE}


def _cli(argv) -> str:
    buf = io.StringIO()
    with redirect_stdout(buf):
        assert main([str(a) for a in argv]) == 0
    return buf.getvalue()


@pytest.fixture(scope="module")
def small_scenario(tmp_path_factory):
    out = tmp_path_factory.mktemp("scn")
    scn, tree = generate_aliasing(replace(ScenarioConfig(), n_areas=2, frames_per_area=5, connector_frames=0), seed=3,
                                  out_dir=out)
    return scn, tree, out


# -- runner ------------------------------------------------------------------------


def test_ten_frame_run(word_model, tree, tmp_path):
    rng = np.random.default_rng(0)
    frames = place_sequence(rng, word_model, 10, 80)
    save_features(tmp_path / "f.txt", frames, 256)
    tree.save(tmp_path / "v.bin")
    s = Settings().with_values({"di_level": 2})
    summary = run_sequence(tmp_path / "f.txt", tmp_path / "v.bin", settings=s, results_path=tmp_path / "r.csv",
                           timing_path=tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 10 and tuple(rows[0]) == RESULT_COLUMNS
    assert all(r["status"] in STATUSES for r in rows)
    # never reorders frames
    assert [int(r["frame_id"]) for r in rows] == [f.frame_id for f in frames]
    timing = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert tuple(timing[0]) == TIMING_COLUMNS
    for t in timing:
        stages = sum(int(t[c]) for c in TIMING_COLUMNS[1:-2])
        assert stages == int(t["total_us"])
        assert stages <= int(t["wall_us"]) + 1  # per-stage rounding
    assert len(summary.query_times()) == 10 and summary.growth(4)[-1][:2] == (8, 10)


def test_rerun_byte_identical(small_scenario, tmp_path):
    scn, tree, out = small_scenario
    s = Settings().with_values({"di_level": 2, "alpha_threshold": 0.2})
    for name in ("a", "b"):
        run_sequence(out / "features.txt", out / "vocab.bin", settings=s, results_path=tmp_path / f"{name}.csv",
                     timing_path=tmp_path / f"{name}_t.csv", timings=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_t.csv").read_bytes() == (tmp_path / "b_t.csv").read_bytes()


def test_run_frames_in_memory(small_scenario):
    scn, tree, _ = small_scenario
    summary = run_frames(scn.frames, tree, Settings().with_values({"di_level": 2}))
    assert [r.frame_id for r in summary.results] == [f.frame_id for f in scn.frames]
    assert (summary.wall > 0).all()


# -- evaluation --------------------------------------------------------------------


def _rows(*dets):
    return [Detection(q, "accepted", m, s) for q, m, s in dets]


def test_all_correct_precision_one():
    gt = GroundTruth([(10, 1), (11, 2), (12, 3)])
    rep = evaluate(_rows((10, 1, 0.9), (11, 2, 0.8), (12, 3, 0.7)), gt)
    assert rep.precision == 1.0 and rep.recall == 1.0 and not rep.precision_undefined
    assert rep.recall_at_full_precision == 1.0


def test_zero_detections():
    gt = GroundTruth([(10, 1)])
    rep = evaluate([Detection(10, "no-candidate", None, float("nan"))], gt)
    assert rep.recall == 0.0 and rep.precision == 1.0 and rep.precision_undefined
    assert "no detections" in rep.summary()


def test_five_rows_one_false_positive():
    gt = GroundTruth([(10, 1), (11, 2), (12, 3), (13, 4), (14, 5)], tolerance=0)
    rep = evaluate(_rows((10, 1, 0.9), (11, 2, 0.8), (12, 3, 0.7), (13, 4, 0.6), (14, 9, 0.5)), gt)
    assert rep.tp == 4 and rep.fp == 1 and rep.fn == 1
    assert rep.precision == pytest.approx(0.8)
    assert rep.f1 == pytest.approx(2 * 0.8 * 0.8 / 1.6)
    assert rep.recall_at_full_precision == pytest.approx(0.8)


def test_tolerance():
    gt = GroundTruth([(20, 5)], tolerance=2)
    assert gt.is_match(20, 7) and not gt.is_match(20, 8) and gt.is_match(20, 8, tolerance=3)
    assert not gt.is_match(21, 5)
    assert evaluate(_rows((20, 7, 0.5)), gt).tp == 1
    assert evaluate(_rows((20, 7, 0.5)), gt, tolerance=0).fp == 1


def test_curve_recomputable_from_csv(small_scenario, tmp_path):
    scn, tree, out = small_scenario
    s = Settings().with_values({"di_level": 2, "alpha_threshold": 0.0, "k_temporal": 0, "geometric_check": False,
                                "recent_exclusion": 3})
    run_sequence(out / "features.txt", out / "vocab.bin", settings=s, results_path=tmp_path / "r.csv",
                 timing_path=None)
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    rep = evaluate(tmp_path / "r.csv", scn.ground_truth)
    assert rep.curve
    n_pos = len(scn.ground_truth.queries)
    for p in rep.curve:
        chosen = [r for r in rows if r["status"] == "accepted" and r["eta_sim"] and float(r["eta_sim"]) >= p.alpha]
        good = [r for r in chosen if scn.ground_truth.is_match(int(r["frame_id"]), int(r["matched_id"]))]
        assert p.tp == len({r["frame_id"] for r in good})
        assert p.fp == len(chosen) - len(good)
        assert p.fn == n_pos - p.tp
        assert p.precision * (p.tp + p.fp) == pytest.approx(p.tp)
    assert [p.alpha for p in rep.curve] == sorted({p.alpha for p in rep.curve}, reverse=True)
    assert rep.auc == pytest.approx(curve_auc(pr_curve(rows, scn.ground_truth)))
    lines = rep.curve_csv().splitlines()
    assert len(lines) == len(rep.curve) + 1 and lines[0].startswith("alpha,tp,fp,fn")


def test_evaluate_is_pure(small_scenario, tmp_path):
    scn, tree, out = small_scenario
    summary = run_frames(scn.frames, tree, Settings().with_values({"di_level": 2, "alpha_threshold": 0.0}))
    a = evaluate(summary.results, scn.ground_truth)
    b = evaluate(summary.results, scn.ground_truth)
    assert a.curve == b.curve and a.auc == b.auc


def test_timing_stats():
    rows = [{"frame_id": "0", "query_us": "10"}, {"frame_id": "1", "query_us": "30"}]
    st = timing_stats(rows)
    assert st["query"] == {"median": 20.0, "mean": 20.0, "std": 10.0, "max": 30.0}
    assert timing_stats([]) == {}


def test_ground_truth_text_round_trip(tmp_path):
    gt = GroundTruth([(5, 1), (9, 0), (9, 3)], tolerance=4)
    assert GroundTruth.loads(gt.dumps()) == gt
    gt.save(tmp_path / "gt.txt")
    assert GroundTruth.load(tmp_path / "gt.txt") == gt
    assert GroundTruth.load(tmp_path / "gt.txt", tolerance=1).tolerance == 1
    assert GroundTruth.loads("3 1\n").tolerance == 2
    with pytest.raises(ValueError):
        GroundTruth([(1, 4)])
    with pytest.raises(ValueError, match="line 2"):
        GroundTruth.loads("3 1\n1 2 3\n")


def test_ground_truth_matrix_formats(tmp_path):
    from scipy.io import savemat

    m = np.zeros((6, 6), dtype=bool)
    m[4, 1] = m[5, 0] = m[5, 1] = True
    m[1, 4] = True  # upper triangle ignored
    expect = {(4, 1), (5, 0), (5, 1)}
    np.save(tmp_path / "gt.npy", m)
    savemat(tmp_path / "gt.mat", {"truth": m.astype(np.uint8)})
    np.savetxt(tmp_path / "gt.txt", m.astype(int), fmt="%d")
    np.savetxt(tmp_path / "gt.csv", m.astype(int), fmt="%d", delimiter=",")
    for name in ("gt.npy", "gt.mat", "gt.txt", "gt.csv"):
        assert GroundTruth.load(tmp_path / name).pairs == expect
        assert load_matrix(tmp_path / name).shape == (6, 6)
    assert GroundTruth.from_matrix(m, frame_ids=[10, 11, 12, 13, 14, 15]).pairs == {(14, 11), (15, 10), (15, 11)}
    with pytest.raises(ValueError):
        GroundTruth.from_matrix(np.zeros((2, 3)))


def test_read_results_variants(tmp_path):
    (tmp_path / "r.csv").write_text(",".join(RESULT_COLUMNS) + "\n" + "3,no-candidate,,,,,,,,0,0\n"
                                    "4,accepted,1,0.5,0.5,,0.5,1,1,20,7\n")
    dets = read_results(tmp_path / "r.csv")
    assert dets[0].matched_id is None and np.isnan(dets[0].eta_sim)
    assert dets[1] == Detection(4, "accepted", 1, 0.5)


# -- synthetic scenario ------------------------------------------------------------


def test_synth_deterministic(tmp_path):
    cfg = replace(ScenarioConfig(), n_areas=2, frames_per_area=4, connector_frames=2)
    generate_aliasing(cfg, seed=5, out_dir=tmp_path / "a")
    generate_aliasing(cfg, seed=5, out_dir=tmp_path / "b")
    for name in ("features.txt", "gt.txt", "scenario.txt", "vocab.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate_aliasing(cfg, seed=6, out_dir=tmp_path / "c")
    assert (tmp_path / "a" / "features.txt").read_bytes() != (tmp_path / "c" / "features.txt").read_bytes()


def test_synth_word_overlap_floor():
    scn, tree = generate_aliasing(seed=0)
    ov = word_overlap(scn, tree)
    off = ov[~np.eye(len(ov), dtype=bool)]
    assert off.min() >= scn.config.overlap_floor
    assert np.allclose(ov, ov.T)


def test_synth_structure():
    scn = generate(ScenarioConfig(seed=1))
    cfg = scn.config
    n = cfg.n_areas * cfg.frames_per_area + cfg.connector_frames + cfg.frames_per_area
    assert len(scn.frames) == n == len(scn.lap) == len(scn.frame_area)
    assert [f.frame_id for f in scn.frames] == list(range(n))
    revisit = np.nonzero(scn.lap == 1)[0]
    assert (scn.frame_area[revisit] == cfg.revisit_area).all()
    # every revisit query has a ground-truth match; none before the ring closes (connector frames may see area 0)
    assert set(revisit.tolist()) <= scn.ground_truth.queries
    first_lap_end = cfg.n_areas * cfg.frames_per_area
    assert min(scn.ground_truth.queries) >= first_lap_end


def test_spurious_frames_excluded_from_truth():
    scn = generate(ScenarioConfig(seed=2, spurious_frames=4))
    spurious = set(np.nonzero(scn.frame_area == -2)[0].tolist())
    assert 1 <= len(spurious) <= 4
    assert not any(q in spurious or m in spurious for q, m in scn.ground_truth.pairs)


def test_revisit_rankings_word_confusion():
    scn, tree = generate_aliasing(seed=0)
    rr = revisit_rankings(scn, tree, di_level=2)
    assert len(rr) == scn.config.frames_per_area
    # pure word score confuses the areas on every revisit query
    assert all(r.word_confused for r in rr)
    assert sum(r.top_correct for r in rr) >= 0.8 * len(rr)


def test_long_sequence_config():
    cfg = long_sequence(1200, seed=1)
    assert cfg.n_areas * cfg.frames_per_area + cfg.revisit_frames == 1200 and not cfg.aliasing
    cfg = long_sequence(300)
    assert cfg.n_areas * cfg.frames_per_area == 300 and cfg.revisit_frames == 0
    cfg = long_sequence(120)
    assert cfg.n_areas * cfg.frames_per_area + cfg.revisit_frames == 120


# -- config ------------------------------------------------------------------------


def test_settings_round_trip(tmp_path):
    s = Settings().with_values({"alpha_threshold": "0.45", "k_temporal": 2, "use_distribution": "yes",
                                "lambda1": "0.3", "di_level": "3", "distance": "sampson"})
    assert s.loop.alpha_threshold == 0.45 and s.loop.k_temporal == 2 and s.scoring.use_distribution
    assert s.geometry.distance == "sampson" and s.database.di_level == 3
    assert Settings.loads(s.dumps()) == s
    (tmp_path / "c.cfg").write_text("alpha_threshold = 0.5  # comment\nlambda1 = auto\n")
    t = Settings.load(tmp_path / "c.cfg")
    assert t.loop.alpha_threshold == 0.5 and t.scoring.lambda1 is None
    # min_inliers feeds both the loop and geometry sections
    u = Settings().with_values({"min_inliers": "20"})
    assert u.loop.min_inliers == u.geometry.min_inliers == 20
    with pytest.raises(KeyError):
        Settings().with_values({"nope": 1})
    with pytest.raises(ValueError):
        Settings().with_values({"geometric_check": "maybe"})


# -- CLI -------------------------------------------------------------------------------


def test_cli_synth_run_eval(tmp_path):
    out = _cli(["synth", "--out", tmp_path / "s", "--seed", 1, "--n-areas", 2, "--frames-per-area", 5])
    assert "ground-truth pairs" in out
    run = _cli(["run", "--features", tmp_path / "s/features.txt", "--vocab", tmp_path / "s/vocab.bin",
                "--out", tmp_path / "r.csv", "--timing", tmp_path / "t.csv", "--di-level", 2,
                "--alpha_threshold", 0.0, "--k-temporal", 0, "--geometric-check", "false", "--no-timings"])
    assert "# resolved config" in run and "alpha_threshold = 0.0" in run and "growth curve" in run
    ev = _cli(["eval", "--results", tmp_path / "r.csv", "--gt", tmp_path / "s/gt.txt", "--timing", tmp_path / "t.csv",
               "--curve", tmp_path / "curve.csv"])
    assert "recall@100%precision" in ev and "time[query]" in ev
    assert (tmp_path / "curve.csv").read_text().startswith("alpha,")


def test_cli_config_file(tmp_path):
    _cli(["synth", "--out", tmp_path / "s", "--n-areas", 2, "--frames-per-area", 4])
    (tmp_path / "c.cfg").write_text("di_level = 2\nalpha_threshold = 0.9\n")
    out = _cli(["run", "--features", tmp_path / "s/features.txt", "--vocab", tmp_path / "s/vocab.bin",
                "--out", tmp_path / "r.csv", "--timing", tmp_path / "t.csv", "--config", tmp_path / "c.cfg",
                "--alpha-threshold", 0.8])
    assert "alpha_threshold = 0.8" in out and "di_level = 2" in out


def test_cli_synth_long(tmp_path):
    _cli(["synth", "--out", tmp_path / "l", "--long", 120])
    assert len(load_features(tmp_path / "l/features.txt")) == 120


def test_cli_vocab_train(tmp_path, word_model):
    rng = np.random.default_rng(0)
    save_features(tmp_path / "f.txt", place_sequence(rng, word_model, 20, 60), 256)
    out = _cli(["vocab", "train", "--features", tmp_path / "f.txt", "--k", 4, "--L", 2, "--out", tmp_path / "v.bin"])
    assert "words" in out
    from bowg.vocab import VocabularyTree

    assert VocabularyTree.load(tmp_path / "v.bin").config.k_w == 4


def test_cli_db_save_load(tmp_path, word_model, tree):
    rng = np.random.default_rng(1)
    frames = place_sequence(rng, word_model, 30, 60)
    save_features(tmp_path / "a.txt", frames[:20], 256)
    save_features(tmp_path / "b.txt", frames[20:], 256)
    tree.save(tmp_path / "v.bin")
    out = _cli(["db", "save", "--features", tmp_path / "a.txt", "--vocab", tmp_path / "v.bin", "--out",
                tmp_path / "db.bin", "--di-level", 2])
    assert "20 frames" in out
    out = _cli(["db", "load", "--db", tmp_path / "db.bin", "--vocab", tmp_path / "v.bin", "--features",
                tmp_path / "b.txt", "--out", tmp_path / "db2.bin", "--di-level", 2])
    assert "loaded" in out and "30 frames" in out
    assert len([l for l in out.splitlines() if l[:1].isdigit()]) == 10


def test_cli_extract(tmp_path):
    from bowg.detector import write_pgm

    img = np.zeros((120, 160), np.uint8)
    img[30:90, 40:110] = 220
    img[50:70, 60:80] = 60
    write_pgm(tmp_path / "a.pgm", img)
    write_pgm(tmp_path / "b.pgm", np.roll(img, 5, axis=1))
    out = _cli(["extract", "--images", tmp_path / "a.pgm", tmp_path / "b.pgm", "--out", tmp_path / "f.txt",
                "--max-features", 50])
    frames = load_features(tmp_path / "f.txt")
    assert len(frames) == 2 and [f.frame_id for f in frames] == [0, 1] and len(frames[0]) > 0
    assert "features" in out
