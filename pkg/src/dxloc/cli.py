"""``dxloc`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import evaluation as ev
from .config import ConfigError, apply_overrides, known_keys, read_config
from .errors import DataError
from .features import read_intrinsics
from .synth import SynthConfig, generate_synthetic
from .vocabulary import MatchParams, save_vocab, train_incremental

log = logging.getLogger("dxloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_overrides(path, *targets) -> dict:
    if path is None:
        return {}
    values = read_config(path)
    allowed = set()
    for t in targets:
        allowed |= known_keys(t)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return values


def cmd_train_vocab(args) -> None:
    frames = ev.read_frames(args.input)
    params = MatchParams(max_pairs_kept=args.top_matches, mutual_check=not args.no_mutual,
                         ratio_threshold=args.ratio)
    vocab = train_incremental(frames, params, k=args.k, max_levels=args.levels,
                              seed=args.seed, merge_eps=args.merge_eps)
    save_vocab(vocab, args.out)
    log.info("trained %d words (%d nodes) from %d frames", vocab.num_words, vocab.num_nodes, len(frames))


def cmd_build_db(args) -> None:
    db = ev.build_database(args.input, args.vocab, args.out)
    log.info("stored %d keyframes in %s", len(db), args.out)


def cmd_detect_loops(args) -> None:
    sweep = ev.LcdSweep()
    values = _load_overrides(args.config, sweep)
    sweep = apply_overrides(sweep, values)
    db = ev.load_database(args.db, args.vocab)
    if db.vocab is None:
        raise DataError("database has no vocabulary; pass --vocab")
    points = ev.detect_loops_eval(db, args.queries, sweep, args.out)
    for mode in ev.MODES:
        log.info("%s: best precision at recall >= 0.8: %s", mode,
                 ev.best_precision_at_recall(points, mode, 0.8))


def cmd_relocalize(args) -> None:
    cfg = ev.RelocEvalConfig()
    cfg = apply_overrides(cfg, _load_overrides(args.config, cfg))
    K = read_intrinsics(args.intrinsics) if args.intrinsics else None
    rows = ev.run_reloc_eval(args.db, args.queries, cfg, K, args.out)
    n = len(rows)
    log.info("success %d/%d", sum(r.success for r in rows), n)


def cmd_synth(args) -> None:
    cfg = SynthConfig()
    cfg = apply_overrides(cfg, _load_overrides(args.config, cfg))
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    # re-run validation on the final values
    cfg = SynthConfig(**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__})
    ds = generate_synthetic(cfg, args.out)
    log.info("wrote %d frames, %d loops, %d aliases to %s", len(ds.sequence.frames),
             len(ds.sequence.loops), len(ds.sequence.aliases), args.out)


def cmd_bench(args) -> None:
    rows = ev.run_benchmark(args.vocab, args.db, args.out, max_frames=args.max_frames)
    for r in rows:
        log.info("%-16s n=%-4d mean=%s ms p95=%s ms", r.stage, len(r.times), r.mean_ms, r.p95_ms)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dxloc", description="Place recognition and re-localization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-vocab", help="train a vocabulary from a frame sequence")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--levels", type=int, default=6)
    s.add_argument("--top-matches", type=int, default=300)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--no-mutual", action="store_true")
    s.add_argument("--merge-eps", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_vocab)

    s = sub.add_parser("build-db", help="quantize frames into a keyframe database")
    s.add_argument("--input", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("detect-loops", help="loop-closure PR sweep")
    s.add_argument("--db", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--config")
    s.add_argument("--vocab")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect_loops)

    s = sub.add_parser("relocalize", help="re-localization report")
    s.add_argument("--db", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--config")
    s.add_argument("--intrinsics")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_relocalize)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bench", help="time the toolkit kernels")
    s.add_argument("--vocab", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-frames", type=int, default=100)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dxloc: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"dxloc: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"dxloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
