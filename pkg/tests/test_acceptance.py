"""Acceptance criteria 1-10, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured runtime
straight to the terminal, then asserts the criterion and its runtime bound.
"""
import csv
import io
import time

import numpy as np
import pytest

from conftest import make_scene, nearest_leaf, planted_leaves
from dxloc import evaluation as ev
from dxloc.cli import main
from dxloc.database import InvertedIndex, KeyframeDatabase
from dxloc.errors import BadMagic, CorruptPayload
from dxloc.features import FrameFeatures
from dxloc.geometry import (Pose, RansacParams, project, ransac_pnp, refine_pose_trace,
                            reprojection_jacobian, so3_exp)
from dxloc.relocalization import RelocConfig, relocalize
from dxloc.synth import (INTRINSICS, SynthConfig, SynthWorld, generate_synthetic, make_reloc_queries,
                         make_sequence, make_training_sequence, planted_split_scene)
from dxloc.vocabulary import (NO_PARENT, MatchParams, Vocabulary, VisualVector, VisualWord, build_tree,
                              incremental_words, load_vocab, match_adjacent, save_vocab, similarity,
                              train_incremental)


@pytest.fixture
def report(capsys):
    """Print the verdict line, then fail the test if the criterion did not hold."""
    def _report(n: int, name: str, checks: dict, elapsed: float, bound: float):
        checks = dict(checks, runtime=elapsed < bound)
        failed = [k for k, ok in checks.items() if not ok]
        verdict = "PASS" if not failed else "FAIL"
        detail = f"{elapsed:.2f}s (bound {bound:g}s)" + (f"; failed: {', '.join(failed)}" if failed else "")
        with capsys.disabled():
            print(f"\n{verdict} criterion {n}: {name} [{detail}]")
        assert not failed, failed
    return _report


def random_l1(rng, n_words, support):
    ids = np.sort(rng.choice(n_words, support, replace=False))
    w = rng.random(support) + 1e-3
    return VisualVector(ids, w / w.sum())


def leaf_words(cent):
    return [VisualWord(i, c, 1.0, 1) for i, c in enumerate(cent)]


def frame_of(desc, scores=None, fid=0):
    desc = np.asarray(desc, dtype=np.float64)
    n = desc.shape[0]
    scores = np.full(n, 0.5) if scores is None else scores
    kp = np.column_stack([np.zeros(n), np.zeros(n), scores])
    g = np.zeros(2)
    g[0] = 1.0
    return FrameFeatures(fid, kp, desc, g)


# 1 ----------------------------------------------------------------------------------

def test_criterion_1_similarity_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    sym = self_two = identity = True
    vecs = [random_l1(rng, 1000, int(rng.integers(1, 60))) for _ in range(1000)]
    for i, v in enumerate(vecs):
        self_two &= abs(similarity(v, v) - 2.0) <= 1e-9
        u = vecs[(i * 7 + 3) % len(vecs)]
        sym &= similarity(u, v) == similarity(v, u)
        # independent identity: s = 2 * sum(min) over the shared support
        du, dv = u.to_dict(), v.to_dict()
        two_min = 2.0 * sum(min(du[w], dv[w]) for w in set(du) & set(dv))
        identity &= abs(similarity(u, v) - two_min) <= 1e-12
    a = VisualVector([0, 2, 4], [0.2, 0.3, 0.5])
    b = VisualVector([1, 3, 5], [0.6, 0.3, 0.1])
    disjoint = similarity(a, b) == 0.0
    report(1, "BoW similarity identities", dict(symmetry=sym, self_is_two=self_two, two_min=identity,
                                                disjoint_zero=disjoint), time.perf_counter() - t0, 1.0)


# 2 ----------------------------------------------------------------------------------

def dense_topk(rows: np.ndarray, q: np.ndarray, K: int):
    """Score every stored vector against ``q`` over the full vocabulary."""
    terms = (np.abs(rows) + np.abs(q)) - np.abs(rows - q)
    s = np.cumsum(terms, axis=1)[:, -1]
    ids = np.flatnonzero(s > 0)
    order = sorted(ids.tolist(), key=lambda i: (-s[i], i))[:K]
    return [(i, float(s[i])) for i in order]


def test_criterion_2_retrieval_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    same_order = close = True
    for _ in range(100):
        n_kf = int(rng.integers(1, 1001))
        n_words = int(rng.integers(10, 5001))
        max_support = min(40, n_words)
        idx = InvertedIndex()
        rows = np.zeros((n_kf, n_words))
        for k in range(n_kf):
            v = random_l1(rng, n_words, int(rng.integers(1, max_support + 1)))
            idx.add(k, v)
            rows[k, v.ids] = v.weights
        for _ in range(3):
            q = random_l1(rng, n_words, int(rng.integers(1, max_support + 1)))
            qd = np.zeros(n_words)
            qd[q.ids] = q.weights
            K = int(rng.integers(1, 20))
            got, want = idx.query_topk(q, K), dense_topk(rows, qd, K)
            same_order &= [k for k, _ in got] == [k for k, _ in want]
            close &= all(abs(a - b) <= 1e-9 for (_, a), (_, b) in zip(got, want))
    report(2, "inverted index equals dense scoring", dict(order=same_order, scores=close),
           time.perf_counter() - t0, 30.0)


# 3 ----------------------------------------------------------------------------------

def test_criterion_3_quantization_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cent = planted_leaves(rng, branches=(10, 10), d=32, spread=(1.0, 0.15))
    vocab = build_tree(leaf_words(cent), k=10, max_levels=6, seed=0)
    c = vocab.word_centroids().astype(np.float64)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    sep = dist[np.triu_indices(len(c), 1)].min()
    # per-axis sigma so the leaf separation is 5 noise norms
    sigma = sep / 5 / np.sqrt(c.shape[1])
    x = c[rng.integers(0, len(c), 10_000)] + rng.normal(size=(10_000, c.shape[1])) * sigma
    agree = np.array_equal(vocab.quantize_batch(x), nearest_leaf(vocab, x))
    argmin_ok = True
    for row in x:
        for _, children, d, chosen_child in vocab.quantize_trace(row):
            pos = children.tolist().index(chosen_child)
            argmin_ok &= bool(np.all(d[pos] <= d)) and pos == int(np.argmin(d))
    report(3, "tree descent equals brute-force nearest leaf", dict(agreement=agree, trace_argmin=argmin_ok),
           time.perf_counter() - t0, 10.0)


# 4 ----------------------------------------------------------------------------------

def test_criterion_4_incremental_training(report, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    d = rng.normal(size=(10, 16)) * 10
    words = incremental_words([frame_of(d), frame_of(d, fid=1)])
    two_identical = words.centroids.shape[0] == 10 and words.member_count.tolist() == [2] * 10

    # 400 planted matches, keep the 300 with the highest min score
    n = 400
    base = rng.normal(size=(n, 32)) * 10
    perm = rng.permutation(n)
    sa, sb = rng.permutation(n) / n, rng.permutation(n) / n
    pairs = match_adjacent(frame_of(base, sa), frame_of(base[perm], sb), MatchParams(max_pairs_kept=300))
    inv = np.argsort(perm)
    rank = np.minimum(sa, sb[inv])
    want = sorted(range(n), key=lambda i: (-rank[i], i))[:300]
    cap = len(pairs) == 300 and sorted(p[0] for p in pairs) == sorted(want)

    # adjacent noisy frames from the synthetic corridor (sigma = separation / 20)
    world = SynthWorld(SynthConfig(seed=4))
    train = make_training_sequence(world).frames
    vocab = train_incremental(train, seed=0)
    seq = make_sequence(world).frames
    same = total = 0
    for a, b in zip(seq[:-1], seq[1:]):
        for i, j, *_ in match_adjacent(a, b):
            wa = vocab.quantize(a.local_descriptors[i])
            wb = vocab.quantize(b.local_descriptors[j])
            same += wa == wb
            total += 1
    rate = same / total

    save_vocab(train_incremental(train, seed=0), tmp_path / "a.dxv")
    save_vocab(train_incremental(train, seed=0), tmp_path / "b.dxv")
    deterministic = (tmp_path / "a.dxv").read_bytes() == (tmp_path / "b.dxv").read_bytes()
    report(4, f"incremental training (adjacent same-word rate {rate:.3f})",
           dict(two_identical_frames=two_identical, top300_cap=cap, same_word_rate=rate >= 0.95,
                deterministic=deterministic), time.perf_counter() - t0, 60.0)


# 5 ----------------------------------------------------------------------------------

def test_criterion_5_geometry(report):
    t0 = time.perf_counter()
    K = INTRINSICS
    rng = np.random.default_rng(5)
    noiseless = True
    for _ in range(100):
        pts, px, gt, _ = make_scene(rng, K, n=30)
        pose, _ = ransac_pnp((pts, px), K, RansacParams(seed=1))
        noiseless &= pose.rotation_error(gt) < 1e-6 and pose.translation_error(gt) < 1e-6

    outliers = True
    worst_deg, worst_j = 0.0, 1.0
    for _ in range(20):
        # 70 inliers with 1 px RMS pixel error, 30 uniform outliers
        pts, px, gt, mask = make_scene(rng, K, n=100, noise_px=2 ** -0.5, n_outliers=30)
        pose, inl = ransac_pnp((pts, px), K, RansacParams(seed=2))
        planted = set(np.flatnonzero(mask).tolist())
        found = set(inl.tolist())
        jac = len(planted & found) / len(planted | found)
        deg = np.rad2deg(pose.rotation_error(gt))
        worst_deg, worst_j = max(worst_deg, deg), min(worst_j, jac)
        outliers &= deg < 0.5 and jac >= 0.95

    jac_ok = True
    for _ in range(30):
        pts, _, pose, _ = make_scene(rng, K, n=8)
        J = reprojection_jacobian(pose, pts, K)
        num = np.zeros_like(J)
        h = 1e-6
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            plus = Pose(so3_exp(e[:3]) @ pose.rotation, pose.translation + e[3:])
            minus = Pose(so3_exp(-e[:3]) @ pose.rotation, pose.translation - e[3:])
            num[:, k] = (project(pts, plus, K) - project(pts, minus, K)).reshape(-1) / (2 * h)
        jac_ok &= np.abs(J - num).max() / np.abs(num).max() < 1e-4

    monotone = True
    for _ in range(30):
        pts, px, gt, _ = make_scene(rng, K, n=40, noise_px=2.0, n_outliers=5)
        init = Pose(so3_exp(rng.normal(size=3) * 0.05) @ gt.rotation, gt.translation + rng.normal(size=3) * 0.1)
        _, trace = refine_pose_trace(init, (pts, px), K)
        monotone &= all(b <= a for a, b in zip(trace, trace[1:]))
    report(5, f"geometry (outlier case: worst {worst_deg:.3f} deg, worst Jaccard {worst_j:.3f})",
           dict(noiseless=noiseless, outliers=outliers, jacobian=jac_ok, monotone=monotone),
           time.perf_counter() - t0, 60.0)


# 6 ----------------------------------------------------------------------------------

def test_criterion_6_two_phase_dominance(report, tmp_path):
    t0 = time.perf_counter()
    ds = generate_synthetic(SynthConfig(seed=0), tmp_path / "ds")
    assert len(ds.sequence.loops) == 20 and len(ds.sequence.aliases) == 5
    save_vocab(train_incremental(ds.training.frames, seed=0), tmp_path / "v.dxv")
    points = ev.run_lcd_eval(tmp_path / "ds", tmp_path / "v.dxv")
    two = ev.best_precision_at_recall(points, "two_phase", 0.8)
    one = ev.best_precision_at_recall(points, "bow_top1", 0.8)
    report(6, f"two-phase LCD precision {two} vs phase-1-only {one} at recall >= 0.8",
           dict(two_phase=two is not None and two >= 0.95, phase_one_lower=one is None or one < two),
           time.perf_counter() - t0, 60.0)


# 7 ----------------------------------------------------------------------------------

def test_criterion_7_group_matching(report):
    t0 = time.perf_counter()
    both = 0
    for seed in range(100):
        scene = planted_split_scene(seed)
        db = KeyframeDatabase()
        for f, p in zip(scene.frames, scene.poses):
            db.add_keyframe(f, p)
        grouped, _ = relocalize(db, scene.query, INTRINSICS, RelocConfig())
        single, _ = relocalize(db, scene.query, INTRINSICS, RelocConfig(group_gap=0))
        ok = grouped is not None and grouped.translation_error(scene.query_pose) < 0.05
        both += ok and single is None
    report(7, f"group matching beats singletons in {both}/100 trials", dict(rate=both >= 95),
           time.perf_counter() - t0, 60.0)


# 8 ----------------------------------------------------------------------------------

def test_criterion_8_disjoint_viewpoint(report):
    t0 = time.perf_counter()
    cfg = SynthConfig(seed=8, num_reloc_queries=0, num_disjoint_queries=20)
    world = SynthWorld(cfg)
    seq = make_sequence(world)
    db = KeyframeDatabase()
    for f, p in zip(seq.frames, seq.poses):
        db.add_keyframe(f, p)
    queries = make_reloc_queries(world)
    assert set(queries.kinds) == {"disjoint"} and len(queries.frames) == 20
    gt = {f.frame_id: p for f, p in zip(queries.frames, queries.poses)}
    rows = ev.evaluate_queries(db, queries.frames, gt, INTRINSICS)
    rate = sum(r.success for r in rows) / len(rows)
    report(8, "disjoint-feature queries", dict(success_zero=rate == 0.0, no_pose=not any(r.found for r in rows)),
           time.perf_counter() - t0, 60.0)


# 9 ----------------------------------------------------------------------------------

def complete_tree(k: int, levels: int, d: int, rng) -> Vocabulary:
    sizes = [k ** level for level in range(levels + 1)]
    n = sum(sizes)
    internal = n - sizes[-1]
    parent = np.empty(n, np.uint32)
    parent[0] = NO_PARENT
    parent[1:] = (np.arange(1, n) - 1) // k
    first = np.zeros(n, np.uint32)
    first[:internal] = 1 + np.arange(internal) * k
    nc = np.zeros(n, np.uint32)
    nc[:internal] = k
    leaf = np.zeros(n, np.uint8)
    leaf[internal:] = 1
    idf = np.zeros(n, np.float32)
    idf[internal:] = rng.uniform(0.0, 5.0, sizes[-1])
    return Vocabulary(parent, first, nc, leaf, idf, rng.normal(size=(n, d)).astype(np.float32), k)


def test_criterion_9_vocabulary_serialization(report, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    small = build_tree(leaf_words(planted_leaves(rng, (5, 4), d=8)), k=5)
    save_vocab(small, tmp_path / "s.dxv")
    round_trip = load_vocab(tmp_path / "s.dxv").to_bytes() == small.to_bytes() == (tmp_path / "s.dxv").read_bytes()
    buf = small.to_bytes()
    truncation = True
    for cut in range(len(buf)):
        try:
            Vocabulary.from_bytes(buf[:cut])
            truncation = False
        except (CorruptPayload, BadMagic):
            pass

    big = complete_tree(10, 5, 256, rng)
    assert big.num_words == 100_000
    save_vocab(big, tmp_path / "big.dxv")
    load_vocab(tmp_path / "big.dxv")   # warm-up
    times = []
    for _ in range(5):
        t = time.perf_counter()
        loaded = load_vocab(tmp_path / "big.dxv")
        times.append(time.perf_counter() - t)
    load_ms = float(np.median(times)) * 1e3
    big_round_trip = loaded.equals(big)
    raw = (tmp_path / "big.dxv").read_bytes()
    for cut in rng.integers(0, len(raw), 20):
        try:
            Vocabulary.from_bytes(raw[:int(cut)])
            truncation = False
        except (CorruptPayload, BadMagic):
            pass
    report(9, f"vocabulary files (100k-leaf load {load_ms:.0f} ms)",
           dict(round_trip=round_trip and big_round_trip, load_under_200ms=load_ms < 200, truncation=truncation),
           time.perf_counter() - t0, 60.0)


# 10 ---------------------------------------------------------------------------------

def run_pipeline(root, seed: int):
    ds, v, db = root / "ds", root / "v.dxv", root / "db"
    assert main(["synth", "--seed", str(seed), "--out", str(ds)]) == 0
    assert main(["train-vocab", "--input", str(ds / "train"), "--out", str(v), "--seed", str(seed)]) == 0
    assert main(["build-db", "--input", str(ds / "seq"), "--vocab", str(v), "--out", str(db)]) == 0
    assert main(["detect-loops", "--db", str(db), "--queries", str(ds / "seq"), "--out", str(root / "pr.csv")]) == 0
    assert main(["relocalize", "--db", str(db), "--queries", str(ds / "queries"),
                 "--out", str(root / "reloc.csv")]) == 0
    rows = list(csv.reader(io.StringIO((root / "reloc.csv").read_text())))
    col = rows[0].index("time_ms")
    reloc = [r[:col] + r[col + 1:] for r in rows]
    return (root / "pr.csv").read_bytes(), reloc


def test_criterion_10_end_to_end_determinism(report, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    pr_a, reloc_a = run_pipeline(tmp_path / "a", 10)
    pr_b, reloc_b = run_pipeline(tmp_path / "b", 10)
    report(10, "synth -> train -> build -> detect/relocalize twice",
           dict(pr_identical=pr_a == pr_b and len(pr_a) > 0, reloc_identical=reloc_a == reloc_b and len(reloc_a) > 2),
           time.perf_counter() - t0, 120.0)
