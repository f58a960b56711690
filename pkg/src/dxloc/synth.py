"""Synthetic corridor world with planted loops, aliases and re-localization queries.

A camera slides along a corridor looking sideways at a wall of 3D landmarks.
Every landmark has its own descriptor cluster (a "true word") and a random
global-descriptor code; a frame's global descriptor is the normalised sum of
the codes it sees, so frames observing the same landmarks have nearby global
descriptors.

Appearance lives in the leading half of both descriptor spaces.  The trailing
halves are reserved for "opposite viewpoint" queries, which are therefore
exactly disjoint from anything in the map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, IoFailure
from .features import CameraIntrinsics, FrameFeatures, write_frame_features, write_intrinsics
from .geometry import Pose, so3_exp

INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
WIDTH, HEIGHT = 640, 480
STEP = 0.25            # meters of corridor per base frame
MARGIN = 4.0           # landmark padding beyond the trajectory ends
# camera looks along world +y, image down is world -z
BASE_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class SynthConfig:
    num_frames: int = 300
    descriptors_per_frame: int = 150
    num_clusters: int = 1600
    cluster_separation: float = 20.0
    revisit_pairs: tuple = ()
    alias_pairs: tuple = ()
    num_revisits: int = 20
    num_aliases: int = 5
    min_loop_gap: int = 40
    d_local: int = 64
    d_global: int = 512
    pixel_noise: float = 0.5
    revisit_offset: float = 0.05
    num_reloc_queries: int = 20
    reloc_offset: float = 0.2
    num_disjoint_queries: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.cluster_separation <= 0:
            raise InvariantViolation("cluster_separation must be > 0")
        if self.num_frames < 2 or self.num_clusters < 1:
            raise InvariantViolation("need at least 2 frames and 1 cluster")
        if self.d_local < 2 or self.d_global < 2:
            raise InvariantViolation("descriptor dimensions must be >= 2")
        for i, j in tuple(self.revisit_pairs) + tuple(self.alias_pairs):
            if not (0 <= i < self.num_frames and 0 <= j < self.num_frames and i != j):
                raise InvariantViolation(f"pair ({i}, {j}) out of range")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class SynthWorld:
    """Landmarks, appearance model and observation model for one seed."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        n = cfg.num_clusters
        length = (cfg.num_frames - 1) * STEP
        self.landmarks = np.column_stack([
            rng.uniform(-MARGIN, length + MARGIN, n),
            rng.uniform(3.0, 6.0, n),
            rng.uniform(-1.8, 1.8, n),
        ])
        self.active_local = max(1, cfg.d_local // 2)
        self.active_global = max(1, cfg.d_global // 2)
        centers = np.zeros((n, cfg.d_local))
        centers[:, : self.active_local] = _unit_rows(rng.normal(size=(n, self.active_local)))
        self.centers = centers
        self.min_separation = _min_pairwise_distance(centers[:, : self.active_local])
        self.sigma = self.min_separation / cfg.cluster_separation
        codes = np.zeros((n, cfg.d_global))
        codes[:, : self.active_global] = _unit_rows(rng.normal(size=(n, self.active_global)))
        self.codes = codes
        self.base_score = rng.uniform(0.3, 1.0, n)

    def base_pose(self, f: float) -> Pose:
        """Smooth corridor trajectory; ``f`` is the (fractional) base frame index."""
        x = f * STEP
        yaw = 0.05 * math.sin(0.07 * f)
        pitch = 0.02 * math.sin(0.05 * f + 1.0)
        R = so3_exp(np.array([0.0, yaw, 0.0])) @ so3_exp(np.array([pitch, 0.0, 0.0])) @ BASE_ROTATION
        center = np.array([x, 0.1 * math.sin(0.03 * f), 0.05 * math.cos(0.04 * f)])
        return Pose(R, -R @ center)

    def visible(self, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Indices, camera-frame coordinates and exact pixels of visible landmarks."""
        xc = pose.transform(self.landmarks)
        z = xc[:, 2]
        ok = z > 0.1
        zs = np.where(ok, z, 1.0)
        u = INTRINSICS.fx * xc[:, 0] / zs + INTRINSICS.cx
        v = INTRINSICS.fy * xc[:, 1] / zs + INTRINSICS.cy
        ok &= (u >= 2) & (u <= WIDTH - 3) & (v >= 2) & (v <= HEIGHT - 3)
        idx = np.flatnonzero(ok)
        return idx, xc[idx], np.column_stack([u[idx], v[idx]])

    def describe(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = np.zeros((idx.size, self.cfg.d_local))
        noise[:, : self.active_local] = rng.normal(size=(idx.size, self.active_local)) * (
            self.sigma / math.sqrt(self.active_local))
        return _unit_rows(self.centers[idx] + noise).astype(np.float32)

    def global_for(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.codes[idx].sum(axis=0)
        # noise at about a tenth of the signal norm
        g[: self.active_global] += rng.normal(size=self.active_global) * (
            0.1 * math.sqrt(max(1, idx.size) / self.active_global))
        return (g / np.linalg.norm(g)).astype(np.float32)

    def observe(self, pose: Pose, frame_id: int, rng: np.random.Generator,
                appearance_of: Pose | None = None, depth_dropout: float = 0.05) -> FrameFeatures:
        """Render one frame.  ``appearance_of`` renders another pose's landmarks
        (descriptors, keypoints and 3D points) while keeping ``pose`` nominal."""
        src = appearance_of if appearance_of is not None else pose
        idx, xc, px = self.visible(src)
        score = np.clip(self.base_score[idx] + rng.normal(size=idx.size) * 0.02, 0.0, 1.0)
        cap = self.cfg.descriptors_per_frame
        if idx.size > cap:
            keep = np.sort(np.argsort(-score, kind="stable")[:cap])
            idx, xc, px, score = idx[keep], xc[keep], px[keep], score[keep]
        perm = rng.permutation(idx.size)
        idx, xc, px, score = idx[perm], xc[perm], px[perm], score[perm]
        px = px + rng.normal(size=px.shape) * self.cfg.pixel_noise
        px = np.clip(px, 0.0, [WIDTH - 1, HEIGHT - 1])
        kp = np.column_stack([px, score]).astype(np.float32)
        has_depth = rng.random(idx.size) >= depth_dropout
        # lift the observed keypoint at the landmark's true depth, as a depth map would
        z = xc[:, 2:3]
        uv = kp[:, :2].astype(np.float64)
        lifted = np.column_stack([(uv[:, 0] - INTRINSICS.cx) / INTRINSICS.fx,
                                  (uv[:, 1] - INTRINSICS.cy) / INTRINSICS.fy,
                                  np.ones(idx.size)]) * z
        return FrameFeatures(frame_id, kp, self.describe(idx, rng), self.global_for(idx, rng),
                             np.flatnonzero(has_depth).astype(np.uint32),
                             lifted[has_depth].astype(np.float32))

    def landmark_ids(self, pose: Pose) -> np.ndarray:
        return self.visible(pose)[0]


def _min_pairwise_distance(x: np.ndarray) -> float:
    from scipy.spatial import cKDTree
    d, _ = cKDTree(x).query(x, k=2)
    return float(d[:, 1].min())


def _perturb(pose: Pose, rng: np.random.Generator, offset: float, angle: float) -> Pose:
    d = rng.normal(size=3)
    d *= offset / np.linalg.norm(d)
    w = rng.normal(size=3)
    w *= angle / np.linalg.norm(w)
    R = so3_exp(w) @ pose.rotation
    center = pose.center + d
    return Pose(R, -R @ center)


def _draw_pairs(cfg: SynthConfig, rng: np.random.Generator, slots: np.ndarray, total: int):
    # keep planted frames at least 3 apart so their neighbours stay on the base path
    chosen: list[int] = []
    for s in rng.permutation(slots):
        if all(abs(int(s) - c) >= 3 for c in chosen):
            chosen.append(int(s))
        if len(chosen) == total:
            break
    if len(chosen) < total:
        return None
    planted = set(chosen)
    # sources stay clear of planted frames and of each other, so every
    # planted place is visited exactly twice
    source_of = {}
    used: list[int] = []
    for j in sorted(chosen):
        sources = [i for i in range(0, j - cfg.min_loop_gap)
                   if all(abs(i - p) > 2 for p in planted) and all(abs(i - u) > 5 for u in used)]
        if not sources:
            return None
        i = int(rng.choice(sources))
        used.append(i)
        source_of[j] = i
    return chosen, source_of


def plan_pairs(cfg: SynthConfig) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Planted revisit and alias pairs, either from the config or drawn from the seed."""
    if cfg.revisit_pairs or cfg.alias_pairs:
        return [tuple(p) for p in cfg.revisit_pairs], [tuple(p) for p in cfg.alias_pairs]
    total = cfg.num_revisits + cfg.num_aliases
    if total == 0:
        return [], []
    rng = np.random.default_rng([cfg.seed, 2])
    n = cfg.num_frames
    lo = cfg.min_loop_gap + 5
    slots = np.arange(lo, n)
    if slots.size < total:
        raise InvariantViolation("sequence too short for the requested revisits and aliases")
    # a draw can paint itself into a corner; redraw from the same stream
    for _ in range(100):
        drawn = _draw_pairs(cfg, rng, slots, total)
        if drawn is not None:
            break
    else:
        raise InvariantViolation("could not place planted revisit and alias frames")
    chosen, source_of = drawn
    pairs = [(source_of[j], j) for j in chosen]
    return sorted(pairs[: cfg.num_revisits], key=lambda p: p[1]), sorted(pairs[cfg.num_revisits:], key=lambda p: p[1])


@dataclass
class SynthSequence:
    frames: list[FrameFeatures]
    poses: list[Pose]
    loops: list[tuple[int, int]] = field(default_factory=list)
    aliases: list[tuple[int, int]] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)


def make_sequence(world: SynthWorld) -> SynthSequence:
    """The evaluation sequence with planted revisits and aliases."""
    cfg = world.cfg
    rng = np.random.default_rng([cfg.seed, 3])
    loops, aliases = plan_pairs(cfg)
    revisit_of = {j: i for i, j in loops}
    alias_of = {k: i for i, k in aliases}
    frames, poses, kinds = [], [], []
    for f in range(cfg.num_frames):
        if f in revisit_of:
            pose = _perturb(world.base_pose(revisit_of[f]), rng, cfg.revisit_offset, math.radians(1.0))
            frame = world.observe(pose, f, rng)
            kinds.append("revisit")
        elif f in alias_of:
            pose = world.base_pose(f)
            src = _perturb(world.base_pose(alias_of[f]), rng, cfg.revisit_offset, math.radians(1.0))
            frame = world.observe(pose, f, rng, appearance_of=src)
            frame = _with_orthogonal_global(frame, world, rng, src)
            kinds.append("alias")
        else:
            pose = world.base_pose(f)
            frame = world.observe(pose, f, rng)
            kinds.append("base")
        frames.append(frame)
        poses.append(pose)
    return SynthSequence(frames, poses, loops, aliases, kinds)


def _with_orthogonal_global(frame: FrameFeatures, world: SynthWorld, rng, src_pose: Pose) -> FrameFeatures:
    g_src = world.codes[world.landmark_ids(src_pose)].sum(axis=0)
    norm = np.linalg.norm(g_src)
    r = np.zeros(world.cfg.d_global)
    r[: world.active_global] = rng.normal(size=world.active_global)
    if norm > 0:
        g_src /= norm
        r -= (r @ g_src) * g_src
    r /= np.linalg.norm(r)
    return FrameFeatures(frame.frame_id, frame.keypoints, frame.local_descriptors,
                         r.astype(np.float32), frame.point_indices, frame.points3d)


def make_training_sequence(world: SynthWorld) -> SynthSequence:
    """One clean pass along the corridor with fresh observation noise."""
    rng = np.random.default_rng([world.cfg.seed, 4])
    poses = [world.base_pose(f) for f in range(world.cfg.num_frames)]
    frames = [world.observe(p, f, rng) for f, p in enumerate(poses)]
    return SynthSequence(frames, poses, kinds=["base"] * len(frames))


def make_reloc_queries(world: SynthWorld, exclude_frames=()) -> SynthSequence:
    """Noisy revisits (offset viewpoint) followed by disjoint opposite-view queries."""
    cfg = world.cfg
    rng = np.random.default_rng([cfg.seed, 5])
    frames, poses, kinds = [], [], []
    allowed = [f for f in range(cfg.num_frames) if f not in set(exclude_frames)]
    for q in range(cfg.num_reloc_queries):
        f = int(rng.choice(allowed))
        pose = _perturb(world.base_pose(f), rng, cfg.reloc_offset, math.radians(2.0))
        frames.append(world.observe(pose, 100000 + q, rng))
        poses.append(pose)
        kinds.append("revisit")
    for q in range(cfg.num_disjoint_queries):
        f = int(rng.integers(cfg.num_frames))
        base = world.base_pose(f)
        turn = so3_exp(np.array([0.0, math.pi, 0.0]))
        pose = Pose(turn @ base.rotation, turn @ base.translation)
        frames.append(disjoint_frame(world, 100000 + cfg.num_reloc_queries + q, rng))
        poses.append(pose)
        kinds.append("disjoint")
    return SynthSequence(frames, poses, kinds=kinds)


def disjoint_frame(world: SynthWorld, frame_id: int, rng: np.random.Generator,
                   num_keypoints: int = 100) -> FrameFeatures:
    """A frame whose local and global descriptors live in the reserved subspaces."""
    cfg = world.cfg
    desc = np.zeros((num_keypoints, cfg.d_local))
    desc[:, world.active_local:] = _unit_rows(rng.normal(size=(num_keypoints, cfg.d_local - world.active_local)))
    g = np.zeros(cfg.d_global)
    g[world.active_global:] = rng.normal(size=cfg.d_global - world.active_global)
    g /= np.linalg.norm(g)
    px = np.column_stack([rng.uniform(0, WIDTH - 1, num_keypoints), rng.uniform(0, HEIGHT - 1, num_keypoints)])
    kp = np.column_stack([px, rng.uniform(0.3, 1.0, num_keypoints)])
    return FrameFeatures(frame_id, kp, desc.astype(np.float32), g.astype(np.float32))


# --------------------------------------------------------------------------
# files

def format_pose_line(frame_id: int, pose: Pose) -> str:
    return " ".join([str(frame_id)] + [repr(float(v)) for v in pose.matrix.reshape(-1)])


def write_poses(path, ids, poses) -> None:
    Path(path).write_text("".join(format_pose_line(i, p) + "\n" for i, p in zip(ids, poses)))


def read_poses(path) -> dict[int, Pose]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            out[int(parts[0])] = Pose.from_matrix([float(v) for v in parts[1:13]])
    return out


def write_pairs(path, pairs) -> None:
    Path(path).write_text("".join(f"{i} {j}\n" for i, j in pairs))


def read_pairs(path) -> list[tuple[int, int]]:
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            out.append((int(parts[0]), int(parts[1])))
    return out


def frame_filename(frame_id: int) -> str:
    return f"frame_{frame_id:06d}.dxf"


def write_sequence(seq: SynthSequence, directory, loops=True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for frame in seq.frames:
        write_frame_features(frame, d / frame_filename(frame.frame_id))
    ids = [f.frame_id for f in seq.frames]
    write_poses(d / "poses.txt", ids, seq.poses)
    write_intrinsics(INTRINSICS, d / "intrinsics.txt")
    if loops:
        write_pairs(d / "loops.txt", seq.loops)
        write_pairs(d / "aliases.txt", seq.aliases)
    if seq.kinds:
        (d / "kinds.txt").write_text("".join(f"{i} {k}\n" for i, k in zip(ids, seq.kinds)))


@dataclass
class SynthDataset:
    root: Path
    sequence: SynthSequence
    training: SynthSequence
    queries: SynthSequence


def generate_synthetic(cfg: SynthConfig, out_dir) -> SynthDataset:
    """Write ``seq/`` (evaluation sequence + ground truth), ``train/`` and ``queries/``."""
    world = SynthWorld(cfg)
    seq = make_sequence(world)
    train = make_training_sequence(world)
    planted = [j for _, j in seq.loops] + [k for _, k in seq.aliases]
    queries = make_reloc_queries(world, exclude_frames=planted)
    root = Path(out_dir)
    try:
        write_sequence(seq, root / "seq")
        write_sequence(train, root / "train", loops=False)
        write_sequence(queries, root / "queries", loops=False)
        write_intrinsics(INTRINSICS, root / "intrinsics.txt")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return SynthDataset(root, seq, train, queries)


# --------------------------------------------------------------------------
# planted group-matching scene

@dataclass
class SplitScene:
    frames: list[FrameFeatures]
    poses: list[Pose]
    query: FrameFeatures
    query_pose: Pose
    split_ids: tuple[int, int]


def planted_split_scene(seed: int, points_per_half: int = 18, num_distractors: int = 8,
                        d_local: int = 64, d_global: int = 128, pixel_noise: float = 0.5) -> SplitScene:
    """Two adjacent map keyframes that each hold 3D points for half of the
    query's landmarks, plus distractor keyframes from unrelated places."""
    rng = np.random.default_rng([seed, 99])
    n = 2 * points_per_half
    query_pose = Pose(so3_exp(rng.normal(size=3) * 0.05) @ BASE_ROTATION, np.zeros(3))
    query_pose = Pose(query_pose.rotation, -query_pose.rotation @ np.array([rng.uniform(-1, 1), 0.0, 0.0]))
    # landmarks spread in front of the query camera
    cam = np.column_stack([rng.uniform(-2.0, 2.0, n), rng.uniform(-1.4, 1.4, n), rng.uniform(3.0, 6.0, n)])
    world_pts = query_pose.inverse().transform(cam)
    centers = _unit_rows(rng.normal(size=(n, d_local)))
    sigma = _min_pairwise_distance(centers) / 20.0
    codes = _unit_rows(rng.normal(size=(n, d_global)))

    def render(pose: Pose, with_depth: np.ndarray, fid: int) -> FrameFeatures:
        xc = pose.transform(world_pts)
        uv = xc[:, :2] / xc[:, 2:3] * [INTRINSICS.fx, INTRINSICS.fy] + [INTRINSICS.cx, INTRINSICS.cy]
        uv = uv + rng.normal(size=uv.shape) * pixel_noise
        uv = np.clip(uv, 0.0, None)
        desc = _unit_rows(centers + rng.normal(size=centers.shape) * sigma / math.sqrt(d_local))
        kp = np.column_stack([uv, rng.uniform(0.4, 1.0, n)])
        g = codes.sum(0) + rng.normal(size=d_global) * 0.3
        g /= np.linalg.norm(g)
        idx = np.flatnonzero(with_depth).astype(np.uint32)
        return FrameFeatures(fid, kp, desc.astype(np.float32), g.astype(np.float32),
                             idx, xc[idx].astype(np.float32))

    first = int(rng.integers(20, 40))
    frames, poses = [], []
    split = (first, first + 1)
    halves = np.zeros(n, bool)
    halves[rng.permutation(n)[:points_per_half]] = True
    for kid in range(first + 2 + 15 * num_distractors):
        if kid in split:
            pose = _perturb(query_pose, rng, 0.15, math.radians(2.0))
            frames.append(render(pose, halves if kid == first else ~halves, kid))
        else:
            # unrelated place: fresh landmarks and appearance
            m = 30
            pose = Pose(BASE_ROTATION, rng.normal(size=3))
            pc = np.column_stack([rng.uniform(-2, 2, m), rng.uniform(-1.4, 1.4, m), rng.uniform(3, 6, m)])
            uv = pc[:, :2] / pc[:, 2:3] * [INTRINSICS.fx, INTRINSICS.fy] + [INTRINSICS.cx, INTRINSICS.cy]
            g = rng.normal(size=d_global)
            frames.append(FrameFeatures(kid, np.column_stack([np.clip(uv, 0, None), rng.uniform(0.4, 1, m)]),
                                        _unit_rows(rng.normal(size=(m, d_local))).astype(np.float32),
                                        (g / np.linalg.norm(g)).astype(np.float32),
                                        np.arange(m, dtype=np.uint32), pc.astype(np.float32)))
        poses.append(pose)
    query = render(query_pose, np.zeros(n, bool), 10 ** 6)
    query = FrameFeatures(query.frame_id, query.keypoints, query.local_descriptors, query.global_descriptor)
    return SplitScene(frames, poses, query, query_pose, split)
