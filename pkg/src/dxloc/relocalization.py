"""Re-localization against a keyframe map.

Candidates come from global-descriptor retrieval, are chained into groups of
nearby keyframe ids, and each group's pooled 2D-3D matches go through
RANSAC + PnP.  Groups are tried in order of their best member's global
distance and the first success wins.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .database import KeyframeDatabase
from .errors import EmptyDatabase, GeometryError, InvariantViolation, NoDepthPoints
from .features import CameraIntrinsics, FrameFeatures
from .geometry import Correspondence, Pose, RansacParams, ransac_pnp_full
from .vocabulary import match_descriptors


@dataclass(frozen=True)
class RelocConfig:
    num_candidates: int = 5
    group_gap: int = 10
    match_ratio: float = 0.8
    ransac: RansacParams = field(default_factory=RansacParams)
    min_group_matches: int = 20

    def __post_init__(self):
        if self.num_candidates < 1:
            raise InvariantViolation("num_candidates must be >= 1")
        if self.group_gap < 0:
            raise InvariantViolation("group_gap must be >= 0")


@dataclass
class CandidateGroup:
    keyframe_ids: list[int]
    correspondences: list[Correspondence] = field(default_factory=list)


@dataclass
class GroupReport:
    keyframe_ids: list[int]
    best_distance: float
    num_matches: int = 0
    num_inliers: int = 0
    status: str = "skipped"

    def line(self) -> str:
        ids = ",".join(map(str, self.keyframe_ids))
        return (f"ids={ids} matches={self.num_matches} inliers={self.num_inliers} "
                f"distance={self.best_distance:.6f} status={self.status}")


@dataclass
class RelocDiagnostics:
    candidates: list[tuple[int, float]] = field(default_factory=list)
    groups: list[GroupReport] = field(default_factory=list)
    seconds: float = 0.0

    def to_text(self) -> str:
        return "".join(g.line() + "\n" for g in self.groups)


def retrieve_candidates(db: KeyframeDatabase, g: np.ndarray, M: int) -> list[tuple[int, float]]:
    """The ``M`` keyframes closest in global distance, ascending, ties to lower id."""
    G = db.global_matrix()
    if G.shape[0] == 0:
        raise EmptyDatabase("database is empty")
    dist = 1.0 - G @ np.asarray(g, dtype=np.float64)
    order = np.lexsort((np.arange(dist.size), dist))[:M]
    return [(int(i), float(dist[i])) for i in order]


def form_groups(candidates, group_gap: int) -> list[CandidateGroup]:
    """Chain sorted candidate ids while consecutive gaps are ``<= group_gap``."""
    ids = sorted(set(int(c) for c in candidates))
    groups: list[CandidateGroup] = []
    for i in ids:
        if groups and i - groups[-1].keyframe_ids[-1] <= group_gap:
            groups[-1].keyframe_ids.append(i)
        else:
            groups.append(CandidateGroup([i]))
    return groups


def match_to_group(query: FrameFeatures, group: CandidateGroup, db: KeyframeDatabase,
                   cfg: RelocConfig = RelocConfig()) -> list[Correspondence]:
    """Pool mutual-NN + ratio matches between the query and every group member.

    Only keyframe keypoints with a 3D point take part.  When several keyframes
    claim the same query keypoint, the smallest descriptor distance wins (the
    earlier keyframe on exact ties).  Points are returned in world coordinates.
    """
    best: dict[int, tuple[float, Correspondence]] = {}
    any_depth = False
    for kid in group.keyframe_ids:
        kf = db.keyframes[kid]
        frame = kf.frame
        if frame.points3d is None or frame.points3d.shape[0] == 0:
            continue
        any_depth = True
        desc = frame.local_descriptors[frame.point_indices]
        qi, mi, dist = match_descriptors(query.local_descriptors, desc, cfg.match_ratio, True)
        if qi.size == 0:
            continue
        pose = kf.pose if kf.pose is not None else Pose()
        world = (frame.points3d[mi].astype(np.float64) - pose.translation) @ pose.rotation
        for q, d, X in zip(qi.tolist(), dist.tolist(), world):
            if q not in best or d < best[q][0]:
                px = query.keypoints[q, :2].astype(np.float64)
                best[q] = (d, Correspondence(tuple(X), tuple(px), kid))
    if not any_depth:
        raise NoDepthPoints(f"no keyframe in group {group.keyframe_ids} has 3D points")
    return [best[q][1] for q in sorted(best)]


def relocalize(db: KeyframeDatabase, query: FrameFeatures, K: CameraIntrinsics,
               cfg: RelocConfig = RelocConfig()) -> tuple[Pose | None, RelocDiagnostics]:
    """Estimate the query's world-to-camera pose, or ``None`` with diagnostics."""
    t0 = time.perf_counter()
    diag = RelocDiagnostics()
    if len(db) == 0:
        diag.seconds = time.perf_counter() - t0
        return None, diag
    cands = retrieve_candidates(db, query.global_descriptor, cfg.num_candidates)
    diag.candidates = cands
    dist = dict(cands)
    groups = form_groups(dist, cfg.group_gap)
    groups.sort(key=lambda g: (min(dist[i] for i in g.keyframe_ids), g.keyframe_ids[0]))
    result = None
    for group in groups:
        report = GroupReport(group.keyframe_ids, min(dist[i] for i in group.keyframe_ids))
        diag.groups.append(report)
        if result is not None:
            continue
        try:
            group.correspondences = match_to_group(query, group, db, cfg)
        except NoDepthPoints:
            report.status = "no-depth"
            continue
        report.num_matches = len(group.correspondences)
        if report.num_matches < cfg.min_group_matches:
            report.status = "too-few-matches"
            continue
        try:
            res = ransac_pnp_full(group.correspondences, K, cfg.ransac)
        except GeometryError as exc:
            report.status = type(exc).__name__
            continue
        report.num_inliers = int(res.inliers.size)
        report.status = "ok"
        result = res.pose
    diag.seconds = time.perf_counter() - t0
    return result, diag
