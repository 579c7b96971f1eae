"""Command-line entry point: ``bowg <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import Settings
from .features import load_features, save_features


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("config keys (override --config)")
    for key in sorted(Settings.keys()):
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        g.add_argument(*flags, dest=f"cfg_{key}", metavar="V", default=None)


def _settings(args) -> Settings:
    s = Settings.load(args.config) if args.config else Settings()
    values = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return s.with_values(values)


def _print_config(s: Settings, out=None) -> None:
    out = out or sys.stdout
    out.write("# resolved config\n")
    for line in s.dumps().splitlines():
        out.write(f"#   {line}\n")


def _frames(paths):
    frames = []
    for p in paths:
        frames.extend(load_features(p))
    return frames


# -- commands -------------------------------------------------------------------


def cmd_vocab_train(args) -> int:
    from .vocab import VocabConfig, train

    frames = _frames(args.features)
    desc = np.concatenate([f.descriptors for f in frames]) if frames else np.zeros((0, 32), np.uint8)
    images = np.concatenate([np.full(len(f), i) for i, f in enumerate(frames)]) if frames else np.zeros(0)
    cfg = VocabConfig(k_w=args.k, L_w=args.L, weighting=args.weighting, seed=args.seed, max_iters=args.max_iters)
    print(f"# training on {len(desc)} descriptors from {len(frames)} frames: k={cfg.k_w} L={cfg.L_w} seed={cfg.seed}")
    tree = train(desc, cfg, image_ids=images if args.weighting == "tf-idf" else None)
    tree.save(args.out)
    print(f"wrote {args.out}: {tree.n_words} words, {tree.n_nodes} nodes")
    return 0


def cmd_extract(args) -> int:
    from .detector import DetectorConfig, detect, read_pgm

    cfg = DetectorConfig(max_features=args.max_features, fast_threshold=args.fast_threshold,
                         n_levels=args.n_levels, scale_factor=args.scale_factor)
    frames = []
    for i, path in enumerate(args.images):
        frames.append(detect(read_pgm(path), cfg, frame_id=i, timestamp=float(i)))
        print(f"{path}: {len(frames[-1])} features")
    save_features(args.out, frames, cfg.descriptor_bits)
    print(f"wrote {args.out}")
    return 0


def cmd_run(args) -> int:
    from .bench.runner import run_sequence

    s = _settings(args)
    _print_config(s)
    summary = run_sequence(args.features, args.vocab, settings=s, results_path=args.out,
                           timing_path=args.timing, timings=not args.no_timings)
    statuses: dict[str, int] = {}
    for r in summary.results:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    print(f"frames={len(summary.results)} " + " ".join(f"{k}={v}" for k, v in sorted(statuses.items())))
    qt = summary.query_times()
    if len(qt):
        print(f"mean time per frame: {qt.mean() * 1e3:.3f} ms")
        print("# growth curve: start,stop,mean_ms")
        for a, b, m in summary.growth(args.block):
            print(f"{a},{b},{m * 1e3:.3f}")
    print(f"wrote {args.out}" + (f" and {args.timing}" if args.timing else ""))
    return 0


def cmd_eval(args) -> int:
    from .bench.evaluate import GroundTruth, evaluate

    gt = GroundTruth.load(args.gt, tolerance=args.tolerance)
    rep = evaluate(args.results, gt, timings=args.timing)
    print(rep.summary())
    if args.curve:
        Path(args.curve).write_text(rep.curve_csv())
        print(f"wrote {args.curve}")
    return 0


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .bench.synth import ScenarioConfig, generate, long_sequence, write_scenario

    if args.long:
        cfg = long_sequence(args.long, seed=args.seed)
    else:
        cfg = replace(ScenarioConfig(), seed=args.seed, frames_per_area=args.frames_per_area,
                      spurious_frames=args.spurious_frames, n_areas=args.n_areas)
    scn = generate(cfg)
    tree = scn.word_model.train_vocabulary(seed=cfg.seed)
    paths = write_scenario(scn, args.out, tree)
    print(f"{len(scn.frames)} frames, {len(scn.ground_truth)} ground-truth pairs")
    for name, p in paths.items():
        print(f"wrote {name}: {p}")
    return 0


def cmd_db_save(args) -> int:
    from .bench.runner import detector_from
    from .vocab import VocabularyTree

    s = _settings(args)
    _print_config(s)
    det = detector_from(VocabularyTree.load(args.vocab), s)
    for f in _frames(args.features):
        det.detect(f) if args.detect else det.db.add_frame(f)
    det.db.save(args.out)
    print(f"wrote {args.out}: {det.db.size} frames")
    return 0


def cmd_db_load(args) -> int:
    from .database import Database
    from .loop import LoopDetector
    from .vocab import VocabularyTree

    s = _settings(args)
    db = Database.load(args.db, VocabularyTree.load(args.vocab))
    print(f"loaded {args.db}: {db.size} frames, ids {db.frame_ids[0] if db.size else '-'}..{db.frame_ids[-1] if db.size else '-'}")
    if args.features:
        _print_config(s)
        det = LoopDetector(db, s.scoring, s.loop, s.geometry)
        for f in _frames(args.features):
            r = det.detect(f)
            print(f"{r.frame_id},{r.status},{'' if r.matched_id is None else r.matched_id},{r.eta_sim!r}")
        if args.out:
            db.save(args.out)
            print(f"wrote {args.out}: {db.size} frames")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bowg", description="Bag-of-Word-Groups loop-closure detection")
    sub = ap.add_subparsers(dest="command", required=True)

    vocab = sub.add_parser("vocab", help="vocabulary tools").add_subparsers(dest="vocab_command", required=True)
    p = vocab.add_parser("train", help="train a vocabulary tree from feature files")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--L", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--weighting", choices=("tf-idf", "tf"), default="tf-idf")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab_train)

    p = sub.add_parser("extract", help="detect features in PGM images")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-features", type=int, default=500)
    p.add_argument("--fast-threshold", type=int, default=20)
    p.add_argument("--n-levels", type=int, default=8)
    p.add_argument("--scale-factor", type=float, default=1.2)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("run", help="replay a features file through the detector")
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", default="results.csv")
    p.add_argument("--timing", default="timing.csv")
    p.add_argument("--no-timings", action="store_true", help="write zero timings (byte-identical reruns)")
    p.add_argument("--block", type=int, default=1000, help="growth-curve block size in frames")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="precision/recall of a results CSV against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tolerance", type=int, default=None)
    p.add_argument("--timing", default=None)
    p.add_argument("--curve", default=None, help="write the alpha sweep as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic perceptual-aliasing scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-areas", type=int, default=4)
    p.add_argument("--frames-per-area", type=int, default=10)
    p.add_argument("--spurious-frames", type=int, default=0)
    p.add_argument("--long", type=int, default=0, metavar="N", help="non-aliasing N-frame throughput sequence")
    p.set_defaults(func=cmd_synth)

    db = sub.add_parser("db", help="database snapshots").add_subparsers(dest="db_command", required=True)
    p = db.add_parser("save", help="build a database from features and save it")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detect", action="store_true", help="run detection while adding")
    _add_config_flags(p)
    p.set_defaults(func=cmd_db_save)
    p = db.add_parser("load", help="load a snapshot, optionally continue with more frames")
    p.add_argument("--db", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", nargs="*")
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_db_load)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
