"""Visual vocabulary: incremental word training, tree quantization and BoW scoring.

Training walks an ordered image sequence.  Descriptors matched to the previous
frame join the word of their partner (the word centroid becomes the running
mean of its members); unmatched descriptors found new words.  The resulting
leaf set is organised into a tree by hierarchical k-means, which never alters
or merges the leaves themselves.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from ._kmeans import kmeans
from .errors import (BadMagic, CorruptPayload, DimensionMismatch, EmptySequence,
                     EmptyVocabulary, InvariantViolation, IoFailure, NoWords,
                     VersionMismatch)
from .features import FrameFeatures

VOCAB_MAGIC = b"DXVB"
VOCAB_VERSION = 1
NO_PARENT = 0xFFFFFFFF
_VOCAB_HEADER = struct.Struct("<4sIIIII")  # magic, version, D_local, k, num_nodes, N


def _node_dtype(d: int) -> np.dtype:
    return np.dtype([("parent", "<u4"), ("first_child", "<u4"), ("num_children", "<u4"),
                     ("is_leaf", "u1"), ("idf", "<f4"), ("centroid", "<f4", (d,))])


@dataclass(frozen=True)
class MatchParams:
    max_pairs_kept: int = 300
    mutual_check: bool = True
    ratio_threshold: float = 0.8

    def __post_init__(self):
        if self.max_pairs_kept < 1:
            raise InvariantViolation("max_pairs_kept must be >= 1")
        if not 0 < self.ratio_threshold <= 1:
            raise InvariantViolation("ratio_threshold must be in (0, 1]")


@dataclass
class VisualWord:
    word_id: int
    centroid: np.ndarray
    idf: float = 0.0
    member_count: int = 0


# --------------------------------------------------------------------------
# descriptor matching

def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense L2 distance matrix, float64, as one matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = 0.8,
                      mutual: bool = True):
    """Brute-force nearest neighbour matching with Lowe ratio and optional mutual check.

    Returns ``(ia, ib, dist)`` arrays, ordered by ``ia``.
    """
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if da.shape[0] == 0 or db.shape[0] == 0:
        return empty
    if da.shape[1] != db.shape[1]:
        raise DimensionMismatch(f"descriptor dims {da.shape[1]} vs {db.shape[1]}")
    dist = pairwise_distances(da, db)
    rows = np.arange(dist.shape[0])
    nn = np.argmin(dist, axis=1)
    d1 = dist[rows, nn]
    if dist.shape[1] >= 2:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
    else:
        d2 = np.full(dist.shape[0], np.inf)
    keep = d1 < ratio * d2
    if mutual:
        keep &= np.argmin(dist, axis=0)[nn] == rows
    return rows[keep], nn[keep], d1[keep]


def match_adjacent(a: FrameFeatures, b: FrameFeatures, params: MatchParams = MatchParams()):
    """Match two frames and keep the ``max_pairs_kept`` most reliable pairs.

    Reliability of a pair is the smaller of its two keypoint detection scores.
    Returns a list of ``(index_in_a, index_in_b, distance)`` sorted by that rank
    (descending), ties by ``(index_in_a, index_in_b)``.
    """
    if a.num_keypoints and b.num_keypoints and a.d_local != b.d_local:
        raise DimensionMismatch(f"descriptor dims {a.d_local} vs {b.d_local}")
    ia, ib, d = match_descriptors(a.local_descriptors, b.local_descriptors,
                                  params.ratio_threshold, params.mutual_check)
    if ia.size == 0:
        return []
    rank = np.minimum(a.scores[ia], b.scores[ib]).astype(np.float64)
    order = np.lexsort((ib, ia, -rank))[: params.max_pairs_kept]
    return [(int(ia[o]), int(ib[o]), float(d[o])) for o in order]


# --------------------------------------------------------------------------
# incremental training

@dataclass
class IncrementalWords:
    """Leaf set produced by the incremental pass, before tree building."""

    centroids: np.ndarray          # (W, D) float64 running means
    member_count: np.ndarray       # (W,)
    frame_count: np.ndarray        # (W,) number of training frames containing the word
    assignments: list[np.ndarray]  # per frame: word index of every descriptor
    num_frames: int

    @property
    def idf(self) -> np.ndarray:
        idf = np.log(self.num_frames / (1.0 + self.frame_count))
        return np.maximum(idf, 0.0)


def incremental_words(sequence: Sequence[FrameFeatures],
                      params: MatchParams = MatchParams()) -> IncrementalWords:
    if len(sequence) == 0:
        raise EmptySequence("training sequence is empty")
    dims = {f.d_local for f in sequence if f.num_keypoints}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed descriptor dimensions {sorted(dims)}")
    d = dims.pop() if dims else 0
    cap = 1024
    cent = np.zeros((cap, d))
    count = np.zeros(cap, np.int64)
    fcount = np.zeros(cap, np.int64)
    nwords = 0
    assignments = []
    prev, prev_assign = None, None
    for frame in sequence:
        n = frame.num_keypoints
        x = frame.local_descriptors.astype(np.float64)
        assign = np.full(n, -1, np.int64)
        if prev is not None and n and prev.num_keypoints:
            pairs = match_adjacent(prev, frame, params)
            if pairs:
                ia = np.array([p[0] for p in pairs])
                ib = np.array([p[1] for p in pairs])
                # without the mutual check one b may be claimed twice; first rank wins
                ib, first = np.unique(ib, return_index=True)
                ia = ia[first]
                w = prev_assign[ia]
                assign[ib] = w
                count[w] += 1
                cent[w] += (x[ib] - cent[w]) / count[w][:, None]
        new = np.nonzero(assign < 0)[0]
        if nwords + new.size > cap:
            cap = max(2 * cap, nwords + new.size)
            cent = np.concatenate([cent[:nwords], np.zeros((cap - nwords, d))])
            count = np.concatenate([count[:nwords], np.zeros(cap - nwords, np.int64)])
            fcount = np.concatenate([fcount[:nwords], np.zeros(cap - nwords, np.int64)])
        ids = np.arange(nwords, nwords + new.size)
        assign[new] = ids
        cent[ids] = x[new]
        count[ids] = 1
        nwords += new.size
        fcount[assign] += 1
        assignments.append(assign)
        prev, prev_assign = frame, assign
    return IncrementalWords(cent[:nwords].copy(), count[:nwords].copy(),
                            fcount[:nwords].copy(), assignments, len(sequence))


def merge_words(words: IncrementalWords, eps: float) -> IncrementalWords:
    """Merge words whose centroids lie within ``eps`` (single linkage).

    Merged centroids are member-weighted means; a frame counts once per merged word.
    """
    pairs = cKDTree(words.centroids).query_pairs(eps, output_type="ndarray")
    n = words.centroids.shape[0]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    # relabel so that merged word ids follow first appearance
    _, first = np.unique(labels, return_index=True)
    lab = np.argsort(np.argsort(first))[labels]
    m = first.size
    count = np.bincount(lab, weights=words.member_count, minlength=m)
    cent = np.zeros((m, words.centroids.shape[1]))
    np.add.at(cent, lab, words.centroids * words.member_count[:, None])
    cent /= count[:, None]
    assignments = [lab[a] for a in words.assignments]
    fcount = np.zeros(m, np.int64)
    for a in assignments:
        fcount[np.unique(a)] += 1
    return IncrementalWords(cent, count.astype(np.int64), fcount, assignments, words.num_frames)


def train_incremental(sequence: Sequence[FrameFeatures], params: MatchParams = MatchParams(),
                      k: int = 10, max_levels: int = 6, seed: int = 0,
                      merge_eps: float | None = None) -> "Vocabulary":
    words = incremental_words(sequence, params)
    if merge_eps is not None and merge_eps > 0:
        words = merge_words(words, merge_eps)
    meta = dict(seed=seed, params_hash=_params_hash(params, k, max_levels, merge_eps))
    return _build_tree_arrays(words.centroids, words.idf, k, max_levels, seed,
                              member_count=words.member_count, meta=meta)


def _params_hash(params: MatchParams, k, max_levels, merge_eps) -> str:
    text = f"{params.max_pairs_kept}|{params.mutual_check}|{params.ratio_threshold!r}|{k}|{max_levels}|{merge_eps!r}"
    return hashlib.sha1(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# tree

def build_tree(words: Sequence[VisualWord], k: int = 10, max_levels: int = 6,
               seed: int = 0) -> "Vocabulary":
    """Organise a fixed leaf set under internal nodes by top-down hierarchical k-means."""
    if len(words) == 0:
        raise NoWords("cannot build a tree without words")
    cent = np.stack([np.asarray(w.centroid, dtype=np.float64) for w in words])
    idf = np.array([w.idf for w in words], dtype=np.float64)
    counts = np.array([w.member_count for w in words], dtype=np.int64)
    return _build_tree_arrays(cent, idf, k, max_levels, seed, member_count=counts)


def _build_tree_arrays(cent: np.ndarray, idf: np.ndarray, k: int, max_levels: int,
                       seed: int, member_count=None, meta=None) -> "Vocabulary":
    if cent.shape[0] == 0:
        raise NoWords("cannot build a tree without words")
    if k < 2:
        raise InvariantViolation("branching factor k must be >= 2")
    if max_levels < 1:
        raise InvariantViolation("max_levels must be >= 1")
    rng = np.random.default_rng(seed)

    # nested build: a node is ("leaf", word_index) or ("node", [children], leaf indices)
    def split(idx: np.ndarray, depth: int):
        if idx.size <= k or depth + 1 >= max_levels:
            return [("leaf", int(i)) for i in idx]
        labels = kmeans(cent[idx], k, rng)
        groups = [idx[labels == c] for c in range(labels.max() + 1)]
        groups = [g for g in groups if g.size]
        if len(groups) <= 1:
            return [("leaf", int(i)) for i in idx]
        return [("leaf", int(g[0])) if g.size == 1 else ("node", split(g, depth + 1), g)
                for g in groups]

    root = ("node", split(np.arange(cent.shape[0]), 0), np.arange(cent.shape[0]))

    parent, first_child, num_children, is_leaf, node_idf, centroids, source = [], [], [], [], [], [], []
    queue = [(root, NO_PARENT)]
    head = 0
    while head < len(queue):
        node, par = queue[head]
        me = head
        head += 1
        parent.append(par)
        if node[0] == "leaf":
            w = node[1]
            first_child.append(0)
            num_children.append(0)
            is_leaf.append(1)
            node_idf.append(idf[w])
            centroids.append(cent[w])
            source.append(w)
        else:
            _, children, leaves = node
            first_child.append(len(queue))
            num_children.append(len(children))
            is_leaf.append(0)
            node_idf.append(0.0)
            centroids.append(cent[leaves].mean(axis=0))
            source.append(-1)
            queue.extend((c, me) for c in children)
    source = np.array(source)
    leaf_src = source[source >= 0]
    mc = None if member_count is None else np.asarray(member_count)[leaf_src]
    vocab = Vocabulary(np.array(parent, np.uint32), np.array(first_child, np.uint32),
                       np.array(num_children, np.uint32), np.array(is_leaf, np.uint8),
                       np.array(node_idf, np.float32), np.array(centroids, np.float32), k,
                       member_count=mc, training_meta=meta or {})
    vocab.source_word = leaf_src
    return vocab


class Vocabulary:
    """Immutable vocabulary tree stored as flat breadth-first node arrays.

    Leaves are visual words; word ids are the breadth-first rank of each leaf.
    """

    def __init__(self, parent, first_child, num_children, is_leaf, idf, centroids, k,
                 member_count=None, training_meta=None, validate=True):
        # views, so freezing them below leaves the caller's arrays writable;
        # centroids loaded from a file stay a strided view of the record buffer
        self.parent = np.asarray(parent, np.uint32).view()
        self.first_child = np.asarray(first_child, np.uint32).view()
        self.num_children = np.asarray(num_children, np.uint32).view()
        self.is_leaf = np.asarray(is_leaf, np.uint8).view()
        self.node_idf = np.asarray(idf, np.float32).view()
        self.centroids = np.asarray(centroids, dtype=np.float32).view()
        self.k = int(k)
        self.member_count = member_count
        self.training_meta = dict(training_meta or {})
        self.source_word = None
        if validate:
            self._validate()
        self.leaf_nodes = np.flatnonzero(self.is_leaf)
        self.word_of_node = np.full(self.num_nodes, -1, np.int64)
        self.word_of_node[self.leaf_nodes] = np.arange(self.leaf_nodes.size)
        self.idf = self.node_idf[self.leaf_nodes].astype(np.float64)
        for arr in (self.parent, self.first_child, self.num_children, self.is_leaf,
                    self.node_idf, self.centroids, self.idf):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def num_words(self) -> int:
        return int(self.leaf_nodes.size)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def levels(self) -> int:
        depth = np.zeros(self.num_nodes, np.int64)
        for i in range(1, self.num_nodes):
            depth[i] = depth[self.parent[i]] + 1
        return int(depth.max()) if self.num_nodes else 0

    def children(self, node: int) -> np.ndarray:
        fc = int(self.first_child[node])
        return np.arange(fc, fc + int(self.num_children[node]))

    def word_centroids(self) -> np.ndarray:
        return self.centroids[self.leaf_nodes]

    def words(self) -> list[VisualWord]:
        mc = self.member_count if self.member_count is not None else np.zeros(self.num_words, int)
        return [VisualWord(w, self.centroids[n], float(self.idf[w]), int(mc[w]))
                for w, n in enumerate(self.leaf_nodes)]

    def _validate(self):
        n = self.num_nodes
        if n == 0:
            return
        if not (self.first_child.shape == self.num_children.shape == self.is_leaf.shape
                == self.node_idf.shape == (n,)) or self.centroids.shape[0] != n:
            raise CorruptPayload("node arrays have inconsistent lengths")
        if self.parent[0] != NO_PARENT:
            raise CorruptPayload("root must have no parent")
        leaf = self.is_leaf.astype(bool)
        if np.any(self.is_leaf > 1) or np.any(self.num_children[leaf] != 0):
            raise CorruptPayload("leaf with children")
        internal = np.flatnonzero(~leaf)
        nc = self.num_children[internal].astype(np.int64)
        if np.any(nc == 0):
            raise CorruptPayload("internal node without children")
        if nc.sum() != n - 1:
            raise CorruptPayload("child counts do not cover the node array")
        expect_fc = 1 + np.concatenate([[0], np.cumsum(nc)[:-1]])
        if np.any(self.first_child[internal] != expect_fc):
            raise CorruptPayload("children are not laid out breadth-first")
        if np.any(self.parent[1:] != np.repeat(internal, nc)):
            raise CorruptPayload("parent indices disagree with child ranges")
        if not np.all(np.isfinite(self.centroids)) or np.any(self.node_idf < 0):
            raise InvariantViolation("non-finite centroid or negative idf")

    # -- quantization ------------------------------------------------------

    def quantize_batch(self, descriptors: np.ndarray) -> np.ndarray:
        """Greedy root-to-leaf descent for every row; returns word ids."""
        x = np.asarray(descriptors, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionMismatch("descriptors must be 2D")
        if self.num_words == 0:
            raise EmptyVocabulary("vocabulary has no words")
        if x.shape[0] == 0:
            return np.zeros(0, np.int64)
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"descriptor dim {x.shape[1]} vs vocabulary {self.dim}")
        cur = np.zeros(x.shape[0], np.int64)
        active = np.flatnonzero(self.is_leaf[cur] == 0)
        while active.size:
            nodes = cur[active]
            for node in np.unique(nodes):
                rows = active[nodes == node]
                ch = self.children(int(node))
                c = self.centroids[ch].astype(np.float64)
                d = ((x[rows, None, :] - c[None, :, :]) ** 2).sum(-1)
                cur[rows] = ch[np.argmin(d, axis=1)]
            active = active[self.is_leaf[cur[active]] == 0]
        return self.word_of_node[cur]

    def quantize(self, descriptor: np.ndarray) -> int:
        return int(self.quantize_batch(np.asarray(descriptor).reshape(1, -1))[0])

    def quantize_trace(self, descriptor: np.ndarray):
        """Descent path as ``[(node, children, squared distances, chosen child)]``."""
        x = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if self.num_words == 0:
            raise EmptyVocabulary("vocabulary has no words")
        if x.shape[0] != self.dim:
            raise DimensionMismatch(f"descriptor dim {x.shape[0]} vs vocabulary {self.dim}")
        trace, node = [], 0
        while not self.is_leaf[node]:
            ch = self.children(node)
            d = ((x[None, :] - self.centroids[ch].astype(np.float64)) ** 2).sum(-1)
            nxt = int(ch[np.argmin(d)])
            trace.append((node, ch, d, nxt))
            node = nxt
        return trace

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        rec = np.zeros(self.num_nodes, dtype=_node_dtype(self.dim))
        rec["parent"] = self.parent
        rec["first_child"] = self.first_child
        rec["num_children"] = self.num_children
        rec["is_leaf"] = self.is_leaf
        rec["idf"] = np.where(self.is_leaf == 1, self.node_idf, 0)
        rec["centroid"] = self.centroids
        head = _VOCAB_HEADER.pack(VOCAB_MAGIC, VOCAB_VERSION, self.dim, self.k,
                                  self.num_nodes, self.num_words)
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Vocabulary":
        if buf[:4] != VOCAB_MAGIC:
            raise BadMagic("not a vocabulary file")
        if len(buf) < _VOCAB_HEADER.size:
            raise CorruptPayload("truncated vocabulary header")
        _, version, d, k, num_nodes, n_words = _VOCAB_HEADER.unpack_from(buf)
        if version != VOCAB_VERSION:
            raise VersionMismatch(f"vocabulary version {version}, expected {VOCAB_VERSION}")
        dt = _node_dtype(d)
        if len(buf) != _VOCAB_HEADER.size + num_nodes * dt.itemsize:
            raise CorruptPayload("vocabulary size does not match header counts")
        rec = np.frombuffer(buf, dtype=dt, count=num_nodes, offset=_VOCAB_HEADER.size)
        vocab = cls(rec["parent"], rec["first_child"], rec["num_children"], rec["is_leaf"],
                    rec["idf"], rec["centroid"], k)
        if vocab.num_words != n_words:
            raise CorruptPayload("leaf count disagrees with header")
        return vocab

    def equals(self, other: "Vocabulary") -> bool:
        """Structural, bitwise equality of everything that is persisted."""
        return self.k == other.k and self.to_bytes() == other.to_bytes()


def save_vocab(vocab: Vocabulary, path) -> None:
    try:
        Path(path).write_bytes(vocab.to_bytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_vocab(path) -> Vocabulary:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return Vocabulary.from_bytes(buf)


def quantize(descriptor: np.ndarray, vocab: Vocabulary) -> int:
    return vocab.quantize(descriptor)


# --------------------------------------------------------------------------
# visual vectors and scoring

@dataclass(frozen=True, eq=False)
class VisualVector:
    """Sparse L1-normalised word weights; ``ids`` strictly ascending, weights > 0."""

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, np.int64).reshape(-1))
        object.__setattr__(self, "weights", np.asarray(self.weights, np.float64).reshape(-1))

    @classmethod
    def from_dict(cls, d: dict) -> "VisualVector":
        ids = np.array(sorted(d), dtype=np.int64)
        return cls(ids, np.array([d[i] for i in ids], dtype=np.float64))

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(w) for i, w in zip(self.ids, self.weights)}

    def __len__(self) -> int:
        return self.ids.size

    def __getitem__(self, word: int) -> float:
        pos = np.searchsorted(self.ids, word)
        if pos < self.ids.size and self.ids[pos] == word:
            return float(self.weights[pos])
        return 0.0


def compute_visual_vector(frame: FrameFeatures | np.ndarray, vocab: Vocabulary,
                          weighting: str = "tfidf") -> VisualVector:
    """tf-idf (or plain tf with ``weighting="tf"``) word weights, L1 normalised."""
    desc = frame.local_descriptors if isinstance(frame, FrameFeatures) else np.asarray(frame)
    if desc.shape[0] == 0:
        return VisualVector()
    words = vocab.quantize_batch(desc)
    return vector_from_words(words, vocab, weighting)


def vector_from_words(words: np.ndarray, vocab: Vocabulary, weighting: str = "tfidf") -> VisualVector:
    if words.size == 0:
        return VisualVector()
    ids, counts = np.unique(words, return_counts=True)
    tf = counts / words.size
    if weighting == "tfidf":
        w = tf * vocab.idf[ids]
    elif weighting == "tf":
        w = tf
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    keep = w > 0
    ids, w = ids[keep], w[keep]
    total = w.sum()
    if total <= 0:
        return VisualVector()
    return VisualVector(ids, w / total)


def score_terms(a, b):
    """Per-word terms ``|a| + |b| - |a - b|`` of the BoW similarity score."""
    return (np.abs(a) + np.abs(b)) - np.abs(a - b)


def ordered_sum(terms: np.ndarray) -> float:
    # fixed left-to-right accumulation: inverted-index and dense scores agree bit for bit
    return float(np.cumsum(terms)[-1]) if len(terms) else 0.0


def similarity(v1: VisualVector, v2: VisualVector) -> float:
    """BoW similarity over the union of supports; 2.0 for identical normalised vectors."""
    union = np.union1d(v1.ids, v2.ids)
    a = np.zeros(union.size)
    b = np.zeros(union.size)
    a[np.searchsorted(union, v1.ids)] = v1.weights
    b[np.searchsorted(union, v2.ids)] = v2.weights
    return ordered_sum(score_terms(a, b))
