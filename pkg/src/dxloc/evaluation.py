"""Loop-closure PR sweeps, re-localization reports and kernel timings."""
from __future__ import annotations

import csv
import io
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .database import Keyframe, KeyframeDatabase, LcdConfig
from .errors import IoFailure, MissingGroundTruth
from .features import CameraIntrinsics, FrameFeatures, read_frame_features, read_intrinsics
from .relocalization import RelocConfig, relocalize
from .synth import read_pairs, read_poses
from .vocabulary import Vocabulary, compute_visual_vector, load_vocab, vector_from_words

MODES = ("two_phase", "bow_top1", "bow_top1_tf")
PR_COLUMNS = ("mode", "threshold", "tp", "fp", "fn", "precision", "recall")
RELOC_COLUMNS = ("query_id", "found", "success", "rot_err_deg", "trans_err_m",
                 "num_groups", "num_matches", "num_inliers", "time_ms")
BENCH_COLUMNS = ("stage", "count", "mean_ms", "p95_ms")
BENCH_STAGES = ("vocab_load", "quantize_vector", "query_topk", "detect_loop", "relocalize")


def _grid(lo: float, hi: float, step: float) -> tuple:
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class LcdSweep:
    K: int = 10
    min_temporal_gap: int = 30
    loop_tolerance: int = 2
    global_thresholds: tuple = _grid(0.0, 1.0, 0.05)
    bow_thresholds: tuple = _grid(0.0, 2.0, 0.05)


@dataclass(frozen=True)
class PrPoint:
    mode: str
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise IoFailure(f"{d} is not a directory")
    return sorted(p for p in d.glob("*.dxf"))


def read_frames(directory) -> list[FrameFeatures]:
    frames = [read_frame_features(p) for p in list_frames(directory)]
    return sorted(frames, key=lambda f: f.frame_id)


def reweighted(db: KeyframeDatabase, weighting: str) -> KeyframeDatabase:
    """Copy of ``db`` whose visual vectors use another weighting (no re-quantization)."""
    out = KeyframeDatabase(db.vocab, weighting)
    for kf in db.keyframes:
        out._insert(_reweight(kf, db.vocab, weighting))
    return out


def _reweight(kf: Keyframe, vocab: Vocabulary, weighting: str) -> Keyframe:
    if vocab is None or not kf.word_to_keypoints:
        return Keyframe(-1, kf.frame, kf.visual_vector, kf.pose, kf.word_to_keypoints)
    words = np.empty(kf.frame.num_keypoints, np.int64)
    for w, idx in kf.word_to_keypoints.items():
        words[idx] = w
    return Keyframe(-1, kf.frame, vector_from_words(words, vocab, weighting), kf.pose, kf.word_to_keypoints)


# --------------------------------------------------------------------------
# loop closure

@dataclass
class QueryOutcome:
    frame_id: int
    two_phase: tuple[int, float] | None     # (frame id, global distance)
    bow_top1: tuple[int, float] | None      # (frame id, bow score)
    bow_top1_tf: tuple[int, float] | None


def lcd_outcomes(db: KeyframeDatabase, queries, sweep: LcdSweep = LcdSweep(),
                 db_tf: KeyframeDatabase | None = None) -> list[QueryOutcome]:
    """Per-query best candidates for every mode.  Causal: only keyframes with
    an earlier frame id are eligible."""
    if db_tf is None:
        db_tf = reweighted(db, "tf")
    cfg = LcdConfig(K=sweep.K, global_dist_threshold=2.0, min_temporal_gap=sweep.min_temporal_gap)
    fids = db.frame_ids()
    out = []
    for frame in queries:
        future = fids >= frame.frame_id
        q = db.make_keyframe(frame)
        cands = db.loop_candidates(q, cfg, future)
        two = bow = None
        if cands:
            kid, _, dist = min(cands, key=lambda c: (c[2], c[0]))
            two = (int(fids[kid]), dist)
            bow = (int(fids[cands[0][0]]), cands[0][1])
        qtf = _reweight(q, db.vocab, "tf")
        top = db_tf.query_topk(qtf.visual_vector, 1, future | db_tf.temporal_exclusion(frame.frame_id, sweep.min_temporal_gap))
        tf = (int(fids[top[0][0]]), top[0][1]) if top else None
        out.append(QueryOutcome(frame.frame_id, two, bow, tf))
    return out


def pr_sweep(outcomes, loops, sweep: LcdSweep = LcdSweep()) -> list[PrPoint]:
    """PR points for every mode and threshold.  Each planted loop counts at
    most once; a wrong detection on a loop query is both a FP and a FN."""
    truth = {}
    for i, j in loops:
        truth.setdefault(max(i, j), []).append(min(i, j))
    points = []
    for mode in MODES:
        grid = sweep.global_thresholds if mode == "two_phase" else sweep.bow_thresholds
        for thr in grid:
            tp = fp = fn = 0
            for o in outcomes:
                hit = getattr(o, mode)
                fired = hit is not None and (hit[1] <= thr if mode == "two_phase" else hit[1] >= thr)
                partners = truth.get(o.frame_id)
                correct = fired and partners is not None and any(
                    abs(hit[0] - p) <= sweep.loop_tolerance for p in partners)
                if correct:
                    tp += 1
                else:
                    fp += fired
                    fn += partners is not None
            points.append(PrPoint(mode, float(thr), tp, fp, fn))
    return points


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def pr_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PR_COLUMNS)
    for p in points:
        w.writerow([p.mode, _fmt(p.threshold), p.tp, p.fp, p.fn, _fmt(p.precision), _fmt(p.recall)])
    return buf.getvalue()


def resolve_sequence_dir(dataset_dir) -> Path:
    d = Path(dataset_dir)
    return d / "seq" if (d / "seq").is_dir() else d


def read_loops(directory) -> list[tuple[int, int]]:
    p = Path(directory) / "loops.txt"
    if not p.exists():
        raise MissingGroundTruth(f"{p} not found")
    return read_pairs(p)


def run_lcd_eval(dataset_dir, vocab_path, sweep: LcdSweep = LcdSweep(), out=None) -> list[PrPoint]:
    """Build a database from the sequence and sweep all three detection modes."""
    seq = resolve_sequence_dir(dataset_dir)
    loops = read_loops(seq)
    vocab = load_vocab(vocab_path)
    frames = read_frames(seq)
    db = KeyframeDatabase(vocab)
    for f in frames:
        db.add_keyframe(f)
    points = pr_sweep(lcd_outcomes(db, frames, sweep), loops, sweep)
    if out is not None:
        Path(out).write_text(pr_csv(points))
    return points


def detect_loops_eval(db: KeyframeDatabase, queries_dir, sweep: LcdSweep = LcdSweep(), out=None) -> list[PrPoint]:
    loops = read_loops(queries_dir)
    points = pr_sweep(lcd_outcomes(db, read_frames(queries_dir), sweep), loops, sweep)
    if out is not None:
        Path(out).write_text(pr_csv(points))
    return points


def best_precision_at_recall(points, mode: str, min_recall: float) -> float | None:
    vals = [p.precision for p in points
            if p.mode == mode and p.recall is not None and p.recall >= min_recall and p.precision is not None]
    return max(vals) if vals else None


# --------------------------------------------------------------------------
# re-localization

@dataclass(frozen=True)
class RelocEvalConfig:
    reloc: RelocConfig = field(default_factory=RelocConfig)
    success_max_trans_m: float = 0.25
    success_max_rot_deg: float = 5.0


@dataclass
class RelocRow:
    query_id: int
    found: bool
    success: bool
    rot_err_deg: float | None
    trans_err_m: float | None
    num_groups: int
    num_matches: int
    num_inliers: int
    time_ms: float


def evaluate_queries(db: KeyframeDatabase, queries, gt: dict, K: CameraIntrinsics,
                     cfg: RelocEvalConfig = RelocEvalConfig()) -> list[RelocRow]:
    rows = []
    for q in queries:
        if q.frame_id not in gt:
            raise MissingGroundTruth(f"no ground-truth pose for query {q.frame_id}")
        pose, diag = relocalize(db, q, K, cfg.reloc)
        ok = [g for g in diag.groups if g.status == "ok"]
        matches = max((g.num_matches for g in diag.groups), default=0)
        if pose is None:
            rows.append(RelocRow(q.frame_id, False, False, None, None, len(diag.groups),
                                 matches, 0, diag.seconds * 1e3))
            continue
        rot = math.degrees(pose.rotation_error(gt[q.frame_id]))
        trans = pose.translation_error(gt[q.frame_id])
        success = rot <= cfg.success_max_rot_deg and trans <= cfg.success_max_trans_m
        rows.append(RelocRow(q.frame_id, True, success, rot, trans, len(diag.groups),
                             ok[0].num_matches, ok[0].num_inliers, diag.seconds * 1e3))
    return rows


def reloc_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RELOC_COLUMNS)
    for r in rows:
        w.writerow([r.query_id, _fmt(r.found), _fmt(r.success), _fmt(r.rot_err_deg), _fmt(r.trans_err_m),
                    r.num_groups, r.num_matches, r.num_inliers, _fmt(r.time_ms)])
    n = len(rows)
    found = [r for r in rows if r.found]
    w.writerow(["summary",
                _fmt(len(found) / n if n else None),
                _fmt(sum(r.success for r in rows) / n if n else None),
                _fmt(float(np.median([r.rot_err_deg for r in found])) if found else None),
                _fmt(float(np.median([r.trans_err_m for r in found])) if found else None),
                "", "", "",
                _fmt(float(np.mean([r.time_ms for r in rows])) if n else None)])
    return buf.getvalue()


def find_intrinsics(*dirs) -> CameraIntrinsics:
    for d in dirs:
        p = Path(d) / "intrinsics.txt"
        if p.exists():
            return read_intrinsics(p)
    raise IoFailure("no intrinsics.txt found in " + ", ".join(map(str, dirs)))


def run_reloc_eval(map_dir, queries_dir, cfg: RelocEvalConfig = RelocEvalConfig(),
                   intrinsics: CameraIntrinsics | None = None, out=None) -> list[RelocRow]:
    """Relocalize every query frame against a saved database."""
    poses = Path(queries_dir) / "poses.txt"
    if not poses.exists():
        raise MissingGroundTruth(f"{poses} not found")
    gt = read_poses(poses)
    K = intrinsics or find_intrinsics(map_dir, queries_dir)
    db = KeyframeDatabase.load(map_dir)
    rows = evaluate_queries(db, read_frames(queries_dir), gt, K, cfg)
    if out is not None:
        Path(out).write_text(reloc_csv(rows))
    return rows


# --------------------------------------------------------------------------
# build / bench

def build_database(input_dir, vocab_path, out_dir) -> KeyframeDatabase:
    """Quantize every frame in ``input_dir`` into a saved database.  Poses come
    from ``poses.txt`` when present (identity otherwise); the vocabulary and
    intrinsics are copied alongside so the directory is self-contained."""
    d = Path(input_dir)
    vocab = load_vocab(vocab_path)
    poses = read_poses(d / "poses.txt") if (d / "poses.txt").exists() else {}
    db = KeyframeDatabase(vocab)
    for f in read_frames(d):
        db.add_keyframe(f, poses.get(f.frame_id))
    db.save(out_dir)
    try:
        shutil.copyfile(vocab_path, Path(out_dir) / "vocab.dxv")
        if (d / "intrinsics.txt").exists():
            shutil.copyfile(d / "intrinsics.txt", Path(out_dir) / "intrinsics.txt")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return db


def load_database(db_dir, vocab_path=None) -> KeyframeDatabase:
    vp = Path(vocab_path) if vocab_path else Path(db_dir) / "vocab.dxv"
    vocab = load_vocab(vp) if vp.exists() else None
    return KeyframeDatabase.load(db_dir, vocab)


@dataclass
class BenchRow:
    stage: str
    times: list[float]

    @property
    def mean_ms(self):
        return float(np.mean(self.times)) * 1e3 if self.times else None

    @property
    def p95_ms(self):
        return float(np.percentile(self.times, 95)) * 1e3 if self.times else None


def _timed(fn, items, warmup: int) -> list[float]:
    for it in items[:warmup]:
        fn(it)
    out = []
    for it in items:
        t0 = time.perf_counter()
        fn(it)
        out.append(time.perf_counter() - t0)
    return out


def run_benchmark(vocab_path, db_dir, out=None, max_frames: int = 100, warmup: int = 3,
                  load_repeats: int = 5, lcd: LcdConfig = LcdConfig(),
                  reloc: RelocConfig = RelocConfig()) -> list[BenchRow]:
    """Mean and p95 per-frame times of the toolkit's kernels, rows in fixed order."""
    vocab = load_vocab(vocab_path)
    load_times = _timed(lambda _: load_vocab(vocab_path), [None] * load_repeats, warmup=1)
    db = KeyframeDatabase.load(db_dir, vocab)
    frames = [kf.frame for kf in db.keyframes[:max_frames]]
    vecs = [compute_visual_vector(f, vocab) for f in frames]
    kfs = [db.make_keyframe(f) for f in frames]
    rows = [BenchRow("vocab_load", load_times),
            BenchRow("quantize_vector", _timed(lambda f: compute_visual_vector(f, vocab), frames, warmup)),
            BenchRow("query_topk", _timed(lambda v: db.query_topk(v, lcd.K), vecs, warmup)),
            BenchRow("detect_loop", _timed(lambda k: db.detect_loop(k, lcd), kfs, warmup))]
    try:
        K = find_intrinsics(db_dir)
        with_depth = [f for f in frames if f.has_points3d]
        rows.append(BenchRow("relocalize", _timed(lambda f: relocalize(db, f, K, reloc), with_depth, warmup)))
    except IoFailure:
        rows.append(BenchRow("relocalize", []))
    if out is not None:
        Path(out).write_text(bench_csv(rows))
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.stage, len(r.times), _fmt(r.mean_ms), _fmt(r.p95_ms)])
    return buf.getvalue()
