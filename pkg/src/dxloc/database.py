"""Keyframe store with an inverted word index and two-phase loop detection."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, CorruptPayload, DimensionMismatch, InvariantViolation,
                     IoFailure, VersionMismatch)
from .features import FrameFeatures, read_frame_features, write_frame_features
from .geometry import Pose
from .vocabulary import VisualVector, Vocabulary, score_terms, vector_from_words

DB_MAGIC = b"DXDB"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<4sII")
_KF_HEAD = struct.Struct("<Q12dI")
_ENTRY = np.dtype([("word", "<u4"), ("weight", "<f4")])


@dataclass(frozen=True)
class LcdConfig:
    K: int = 10
    global_dist_threshold: float = 0.3
    min_temporal_gap: int = 30

    def __post_init__(self):
        if self.K < 1:
            raise InvariantViolation("K must be >= 1")
        if not 0 <= self.global_dist_threshold <= 2:
            raise InvariantViolation("global_dist_threshold must be in [0, 2]")


@dataclass(frozen=True)
class LoopClosure:
    query_id: int
    matched_keyframe_id: int
    bow_score: float
    global_distance: float


@dataclass(eq=False)
class Keyframe:
    keyframe_id: int
    frame: FrameFeatures
    visual_vector: VisualVector
    pose: Pose | None
    word_to_keypoints: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def frame_id(self) -> int:
        return self.frame.frame_id


def global_distance(g1: np.ndarray, g2: np.ndarray) -> float:
    """``1 - <g1, g2>`` for L2-normalised descriptors, in ``[0, 2]``."""
    g1 = np.asarray(g1, dtype=np.float64).reshape(-1)
    g2 = np.asarray(g2, dtype=np.float64).reshape(-1)
    if g1.shape != g2.shape:
        raise DimensionMismatch(f"global descriptor dims {g1.size} vs {g2.size}")
    return float(1.0 - g1 @ g2)


class InvertedIndex:
    """word id -> postings ``(keyframe_id, weight)``, appended in insertion order."""

    def __init__(self):
        self._postings: dict[int, tuple[list, list]] = {}
        self._frozen: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.size = 0

    def add(self, keyframe_id: int, v: VisualVector) -> None:
        for w, x in zip(v.ids.tolist(), v.weights.tolist()):
            ids, ws = self._postings.setdefault(w, ([], []))
            ids.append(keyframe_id)
            ws.append(x)
            self._frozen.pop(w, None)
        self.size = max(self.size, keyframe_id + 1)

    def postings(self, word: int) -> tuple[np.ndarray, np.ndarray]:
        arr = self._frozen.get(word)
        if arr is None:
            ids, ws = self._postings.get(word, ([], []))
            arr = (np.array(ids, np.int64), np.array(ws, np.float64))
            self._frozen[word] = arr
        return arr

    def as_dict(self) -> dict[int, list[tuple[int, float]]]:
        return {w: list(zip(ids, ws)) for w, (ids, ws) in sorted(self._postings.items())}

    def scores(self, v: VisualVector) -> np.ndarray:
        """Similarity of ``v`` to every indexed keyframe; only shared words contribute."""
        acc = np.zeros(self.size)
        for w, q in zip(v.ids.tolist(), v.weights.tolist()):
            ids, ws = self.postings(w)
            if ids.size:
                np.add.at(acc, ids, score_terms(q, ws))
        return acc

    def query_topk(self, v: VisualVector, K: int, exclude=None) -> list[tuple[int, float]]:
        if len(v) == 0 or self.size == 0:
            return []
        acc = self.scores(v)
        cand = acc > 0
        if exclude is not None:
            cand &= ~_exclusion_mask(exclude, self.size)
        ids = np.flatnonzero(cand)
        order = np.lexsort((ids, -acc[ids]))[:K]
        return [(int(ids[o]), float(acc[ids[o]])) for o in order]


def _exclusion_mask(exclude, n: int) -> np.ndarray:
    if isinstance(exclude, np.ndarray) and exclude.dtype == bool:
        return exclude[:n]
    mask = np.zeros(n, bool)
    if isinstance(exclude, range) and exclude.step == 1:
        mask[max(0, exclude.start):max(0, min(n, exclude.stop))] = True
        return mask
    ids = np.fromiter((i for i in exclude if 0 <= i < n), dtype=np.int64)
    mask[ids] = True
    return mask


class KeyframeDatabase:
    """Single-writer, multi-reader keyframe store.

    ``weighting`` selects tf-idf (default) or raw term-frequency word weights.
    Without a vocabulary, keyframes get empty visual vectors and only
    global-descriptor retrieval is meaningful.
    """

    def __init__(self, vocab: Vocabulary | None = None, weighting: str = "tfidf"):
        self.vocab = vocab
        self.weighting = weighting
        self.keyframes: list[Keyframe] = []
        self.index = InvertedIndex()
        self._lock = threading.RLock()
        self._gbuf = np.zeros((0, 0))
        self._fbuf = np.zeros(0, np.int64)

    def __len__(self) -> int:
        return len(self.keyframes)

    def make_keyframe(self, frame: FrameFeatures, pose: Pose | None = None,
                      keyframe_id: int = -1) -> Keyframe:
        """Quantize a frame into a keyframe without storing it."""
        if self.vocab is None or frame.num_keypoints == 0:
            return Keyframe(keyframe_id, frame, VisualVector(), pose, {})
        if frame.d_local != self.vocab.dim:
            raise DimensionMismatch(f"frame descriptors are {frame.d_local}-D, vocabulary {self.vocab.dim}-D")
        words = self.vocab.quantize_batch(frame.local_descriptors)
        vec = vector_from_words(words, self.vocab, self.weighting)
        order = np.argsort(words, kind="stable")
        uniq, starts = np.unique(words[order], return_index=True)
        w2k = dict(zip(uniq.tolist(), np.split(order, starts[1:])))
        return Keyframe(keyframe_id, frame, vec, pose, w2k)

    def add_keyframe(self, frame: FrameFeatures, pose: Pose | None = None) -> int:
        if self.keyframes and frame.d_global != self.keyframes[0].frame.d_global:
            raise DimensionMismatch("global descriptor dimension differs from the database")
        kf = self.make_keyframe(frame, pose)
        return self._insert(kf)

    def _insert(self, kf: Keyframe) -> int:
        with self._lock:
            kf.keyframe_id = len(self.keyframes)
            self.keyframes.append(kf)
            self.index.add(kf.keyframe_id, kf.visual_vector)
            n = len(self.keyframes)
            g = kf.frame.global_descriptor
            if n > self._fbuf.shape[0] or self._gbuf.shape[1] != g.shape[0]:
                cap = max(16, 2 * n)
                gbuf = np.zeros((cap, g.shape[0]))
                fbuf = np.zeros(cap, np.int64)
                if n > 1:
                    gbuf[: n - 1] = self._gbuf[: n - 1]
                    fbuf[: n - 1] = self._fbuf[: n - 1]
                # readers holding the old buffers keep a consistent snapshot
                self._gbuf, self._fbuf = gbuf, fbuf
            self._gbuf[n - 1] = g
            self._fbuf[n - 1] = kf.frame_id
            return kf.keyframe_id

    def rebuild_index(self) -> InvertedIndex:
        idx = InvertedIndex()
        for kf in self.keyframes:
            idx.add(kf.keyframe_id, kf.visual_vector)
        idx.size = len(self.keyframes)
        return idx

    # -- read side ---------------------------------------------------------

    def global_matrix(self) -> np.ndarray:
        with self._lock:
            return self._gbuf[: len(self.keyframes)]

    def frame_ids(self) -> np.ndarray:
        with self._lock:
            return self._fbuf[: len(self.keyframes)]

    def query_topk(self, v: VisualVector, K: int, exclude=None) -> list[tuple[int, float]]:
        """Top-K keyframes by BoW similarity, descending, ties to the lower id.

        Keyframes sharing no word with ``v`` score 0 and are never returned.
        """
        with self._lock:
            return self.index.query_topk(v, K, exclude)

    def temporal_exclusion(self, frame_id: int, gap: int) -> np.ndarray:
        return np.abs(self.frame_ids() - frame_id) < gap

    def loop_candidates(self, query: Keyframe, cfg: LcdConfig, exclude=None):
        """Phase 1: BoW top-K outside the temporal window, with global distances."""
        with self._lock:
            if not self.keyframes:
                return []
            mask = self.temporal_exclusion(query.frame_id, cfg.min_temporal_gap)
            if exclude is not None:
                mask |= _exclusion_mask(exclude, len(self.keyframes))
            top = self.index.query_topk(query.visual_vector, cfg.K, mask)
            g = self.global_matrix()
            q = query.frame.global_descriptor.astype(np.float64)
            if top and g.shape[1] != q.shape[0]:
                raise DimensionMismatch("global descriptor dimension differs from the database")
            return [(kid, s, float(1.0 - g[kid] @ q)) for kid, s in top]

    def detect_loop(self, query: Keyframe, cfg: LcdConfig = LcdConfig(),
                    exclude=None) -> LoopClosure | None:
        """Two-phase detection: BoW top-K, then the candidate with the smallest
        global distance if it does not exceed the threshold."""
        cands = self.loop_candidates(query, cfg, exclude)
        if not cands:
            return None
        kid, score, dist = min(cands, key=lambda c: (c[2], c[0]))
        if dist > cfg.global_dist_threshold:
            return None
        return LoopClosure(query.keyframe_id, kid, score, dist)

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        try:
            d.mkdir(parents=True, exist_ok=True)
            parts = [_DB_HEADER.pack(DB_MAGIC, DB_VERSION, len(self.keyframes))]
            for kf in self.keyframes:
                pose = kf.pose if kf.pose is not None else Pose()
                parts.append(_KF_HEAD.pack(kf.frame_id, *pose.matrix.reshape(-1), len(kf.visual_vector)))
                ent = np.empty(len(kf.visual_vector), _ENTRY)
                ent["word"] = kf.visual_vector.ids
                ent["weight"] = kf.visual_vector.weights
                parts.append(ent.tobytes())
                write_frame_features(kf.frame, d / keyframe_filename(kf.keyframe_id))
            (d / "db.dxi").write_bytes(b"".join(parts))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, directory, vocab: Vocabulary | None = None,
             weighting: str = "tfidf") -> "KeyframeDatabase":
        """Load a saved database; visual vectors are recomputed from the frames
        when a vocabulary is given and checked against the stored entries."""
        d = Path(directory)
        try:
            buf = (d / "db.dxi").read_bytes()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if buf[:4] != DB_MAGIC:
            raise BadMagic("not a keyframe database index")
        if len(buf) < _DB_HEADER.size:
            raise CorruptPayload("truncated database header")
        _, version, n = _DB_HEADER.unpack_from(buf)
        if version != DB_VERSION:
            raise VersionMismatch(f"database version {version}, expected {DB_VERSION}")
        db = cls(vocab, weighting)
        off = _DB_HEADER.size
        for kid in range(n):
            if len(buf) < off + _KF_HEAD.size:
                raise CorruptPayload("truncated keyframe record")
            rec = _KF_HEAD.unpack_from(buf, off)
            off += _KF_HEAD.size
            frame_id, m, count = rec[0], rec[1:13], rec[13]
            if len(buf) < off + count * _ENTRY.itemsize:
                raise CorruptPayload("truncated visual vector")
            ent = np.frombuffer(buf, _ENTRY, count=count, offset=off)
            off += count * _ENTRY.itemsize
            frame = read_frame_features(d / keyframe_filename(kid))
            if frame.frame_id != frame_id:
                raise CorruptPayload(f"keyframe {kid}: frame id {frame.frame_id} != index {frame_id}")
            kf = db.make_keyframe(frame, Pose.from_matrix(m), kid)
            stored = ent["word"].astype(np.int64)
            if vocab is None:
                w = ent["weight"].astype(np.float64)
                kf.visual_vector = VisualVector(stored, w / w.sum()) if count else VisualVector()
            elif (not np.array_equal(stored, kf.visual_vector.ids)
                  or not np.allclose(ent["weight"], kf.visual_vector.weights, rtol=0, atol=1e-6)):
                raise CorruptPayload(f"keyframe {kid}: stored visual vector disagrees with vocabulary")
            db._insert(kf)
        if off != len(buf):
            raise CorruptPayload("trailing bytes in database index")
        return db


def keyframe_filename(keyframe_id: int) -> str:
    return f"kf_{keyframe_id:06d}.dxf"

