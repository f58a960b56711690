"""Absolute pose: pinhole projection, P3P, Gauss-Newton refinement and RANSAC.

Poses map world to camera coordinates, ``x_cam = R @ x_world + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (BehindCamera, DegenerateGeometry, InvariantViolation, NoConsensus,
                     SingularNormalEquations, TooFewCorrespondences)
from .features import CameraIntrinsics

ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-12:
        return np.eye(3) + k
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta ** 2
    return np.eye(3) + a * k + b * (k @ k)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvariantViolation("pose has non-finite entries")
        if (np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL
                or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL):
            raise InvariantViolation("rotation is not orthonormal with det +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(orthonormalize(self.rotation @ other.rotation),
                    self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotation_error(self, other: "Pose") -> float:
        """Angle in radians of the relative rotation."""
        c = (np.trace(self.rotation.T @ other.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))

    def translation_error(self, other: "Pose") -> float:
        """Distance in metres between the two camera centres."""
        return float(np.linalg.norm(self.center - other.center))


@dataclass(frozen=True)
class Correspondence:
    point3d: tuple
    pixel: tuple
    source_keyframe: int = -1


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 300
    inlier_threshold_px: float = 3.0
    confidence: float = 0.99
    min_inliers: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.inlier_threshold_px <= 0 or self.min_inliers < 1:
            raise InvariantViolation("RANSAC parameters must be positive")
        if not 0 < self.confidence < 1:
            raise InvariantViolation("confidence must be in (0, 1)")


def _as_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(corrs, tuple) and len(corrs) == 2 and isinstance(corrs[0], np.ndarray):
        return np.asarray(corrs[0], np.float64).reshape(-1, 3), np.asarray(corrs[1], np.float64).reshape(-1, 2)
    if len(corrs) == 0:
        return np.zeros((0, 3)), np.zeros((0, 2))
    pts = np.array([c.point3d for c in corrs], dtype=np.float64)
    px = np.array([c.pixel for c in corrs], dtype=np.float64)
    return pts, px


def project(point3d, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Pixel ``(u, v)`` of one point, or an ``(n, 2)`` array for ``(n, 3)`` input."""
    x = pose.transform(np.asarray(point3d, dtype=np.float64))
    z = x[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point is not in front of the camera")
    u = K.fx * x[..., 0] / z + K.cx
    v = K.fy * x[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def reprojection_errors(points: np.ndarray, pixels: np.ndarray, pose: Pose,
                        K: CameraIntrinsics) -> np.ndarray:
    """Per-point pixel error; ``inf`` for points at or behind the camera."""
    x = points @ pose.rotation.T + pose.translation
    z = x[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    du = K.fx * x[:, 0] / zs + K.cx - pixels[:, 0]
    dv = K.fy * x[:, 1] / zs + K.cy - pixels[:, 1]
    err = np.hypot(du, dv)
    err[~ok] = np.inf
    return err


def bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    f = np.stack([(px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(len(px))], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# P3P (Kneip, Scaramuzza & Siegwart direct parameterisation)

def _polish_root(coeffs: np.ndarray, x: float) -> float:
    d = np.polyder(coeffs)
    for _ in range(3):
        fd = np.polyval(d, x)
        if fd == 0:
            break
        step = np.polyval(coeffs, x) / fd
        x -= step
        if abs(step) < 1e-16:
            break
    return x


def p3p_bearings(world: np.ndarray, f: np.ndarray) -> list[Pose]:
    """All poses consistent with three world points and their unit bearing vectors."""
    P1, P2, P3 = (np.asarray(p, dtype=np.float64) for p in world)
    f1, f2, f3 = (np.asarray(v, dtype=np.float64) for v in f)

    span = np.cross(P2 - P1, P3 - P1)
    scale = max(np.linalg.norm(P2 - P1), np.linalg.norm(P3 - P1), 1e-300)
    if np.linalg.norm(span) < 1e-9 * scale ** 2:
        raise DegenerateGeometry("world points are collinear")
    for a, b in ((f1, f2), (f1, f3), (f2, f3)):
        if np.linalg.norm(np.cross(a, b)) < 1e-12:
            raise DegenerateGeometry("coincident bearing vectors")

    # camera-side frame T from f1, f2
    tx = f1
    tz = np.cross(f1, f2)
    tz /= np.linalg.norm(tz)
    ty = np.cross(tz, tx)
    T = np.stack([tx, ty, tz])
    f3t = T @ f3
    if f3t[2] > 0:
        P1, P2 = P2, P1
        f1, f2 = f2, f1
        tx = f1
        tz = np.cross(f1, f2)
        tz /= np.linalg.norm(tz)
        ty = np.cross(tz, tx)
        T = np.stack([tx, ty, tz])
        f3t = T @ f3
    if abs(f3t[2]) < 1e-12:
        raise DegenerateGeometry("bearing vectors are coplanar")

    # world-side frame N from P1, P2, P3
    nx = P2 - P1
    nx /= np.linalg.norm(nx)
    nz = np.cross(nx, P3 - P1)
    nz /= np.linalg.norm(nz)
    ny = np.cross(nz, nx)
    N = np.stack([nx, ny, nz])
    P3n = N @ (P3 - P1)

    d12 = float(np.linalg.norm(P2 - P1))
    phi1 = f3t[0] / f3t[2]
    phi2 = f3t[1] / f3t[2]
    p1, p2 = P3n[0], P3n[1]
    cos_beta = float(f1 @ f2)
    b = 1.0 / (1.0 - cos_beta ** 2) - 1.0
    b = -math.sqrt(b) if cos_beta < 0 else math.sqrt(b)

    phi1_2, phi2_2 = phi1 ** 2, phi2 ** 2
    p1_2, p1_3, p1_4 = p1 ** 2, p1 ** 3, p1 ** 4
    p2_2, p2_3, p2_4 = p2 ** 2, p2 ** 3, p2 ** 4
    d12_2, b_2 = d12 ** 2, b ** 2

    a4 = -phi2_2 * p2_4 - p2_4 * phi1_2 - p2_4
    a3 = (2 * p2_3 * d12 * b + 2 * phi2_2 * p2_3 * d12 * b
          - 2 * phi2 * p2_3 * phi1 * d12)
    a2 = (-phi2_2 * p2_2 * p1_2 - phi2_2 * p2_2 * d12_2 * b_2 - phi2_2 * p2_2 * d12_2
          + phi2_2 * p2_4 + p2_4 * phi1_2 + 2 * p1 * p2_2 * d12
          + 2 * phi1 * phi2 * p1 * p2_2 * d12 * b - p2_2 * p1_2 * phi1_2
          + 2 * p1 * p2_2 * phi2_2 * d12 - p2_2 * d12_2 * b_2 - 2 * p1_2 * p2_2)
    a1 = (2 * p1_2 * p2 * d12 * b + 2 * phi2 * p2_3 * phi1 * d12
          - 2 * phi2_2 * p2_3 * d12 * b - 2 * p1 * p2 * d12_2 * b)
    a0 = (-2 * phi2 * p2_2 * phi1 * p1 * d12 * b + phi2_2 * p2_2 * d12_2
          + 2 * p1_3 * d12 - p1_2 * d12_2 + phi2_2 * p2_2 * p1_2 - p1_4
          - 2 * phi2_2 * p2_2 * p1 * d12 + p2_2 * phi1_2 * p1_2
          + phi2_2 * p2_2 * d12_2 * b_2)
    coeffs = np.array([a4, a3, a2, a1, a0])
    if not np.all(np.isfinite(coeffs)) or a4 == 0:
        raise DegenerateGeometry("ill-conditioned P3P configuration")

    roots = np.roots(coeffs)
    mag = np.maximum(1.0, np.abs(roots))
    real = roots[np.abs(roots.imag) <= 1e-6 * mag].real

    poses = []
    for c in real:
        cos_theta = _polish_root(coeffs, float(c))
        if abs(cos_theta) > 1.0 + 1e-9:
            continue
        cos_theta = min(1.0, max(-1.0, cos_theta))
        denom = -phi1 * cos_theta * p2 / phi2 + p1 - d12
        if phi2 == 0 or denom == 0:
            continue
        cot_alpha = (-phi1 * p1 / phi2 - cos_theta * p2 + d12 * b) / denom
        sin_theta = math.sqrt(max(0.0, 1.0 - cos_theta ** 2))
        sin_alpha = math.sqrt(1.0 / (cot_alpha ** 2 + 1.0))
        cos_alpha = math.sqrt(max(0.0, 1.0 - sin_alpha ** 2))
        if cot_alpha < 0:
            cos_alpha = -cos_alpha
        k = d12 * sin_alpha * (sin_alpha * b + cos_alpha)
        C = np.array([d12 * cos_alpha * (sin_alpha * b + cos_alpha),
                      cos_theta * k, sin_theta * k])
        C = P1 + N.T @ C
        Q = np.array([[-cos_alpha, -sin_alpha * cos_theta, -sin_alpha * sin_theta],
                      [sin_alpha, -cos_alpha * cos_theta, -cos_alpha * sin_theta],
                      [0.0, -sin_theta, cos_theta]])
        R_cw = N.T @ Q.T @ T          # camera-to-world orientation
        R = orthonormalize(R_cw.T)
        poses.append(Pose(R, -R @ C))
    return poses


def p3p_solve(c1: Correspondence, c2: Correspondence, c3: Correspondence,
              K: CameraIntrinsics, tol_px: float = 1e-3) -> list[Pose]:
    """Up to four poses explaining three correspondences, sorted by translation.

    Candidates that put a point behind the camera or miss the pixels by more
    than ``tol_px`` (spurious quartic roots) are dropped.
    """
    world = np.array([c1.point3d, c2.point3d, c3.point3d], dtype=np.float64)
    px = np.array([c1.pixel, c2.pixel, c3.pixel], dtype=np.float64)
    return _p3p_arrays(world, px, K, tol_px)


def _polish_minimal(pose: Pose, world, px, K, steps: int = 2) -> Pose:
    # square 6x6 Newton system on the three points; keep only improving steps
    cost = _cost(pose, world, px, K)
    for _ in range(steps):
        r = _residuals(pose, world, px, K)
        if r is None or cost == 0.0:
            break
        J = reprojection_jacobian(pose, world, K)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        cand = Pose(orthonormalize(so3_exp(step[:3]) @ pose.rotation), pose.translation + step[3:])
        c = _cost(cand, world, px, K)
        if not c < cost:
            break
        pose, cost = cand, c
    return pose


def _p3p_arrays(world: np.ndarray, px: np.ndarray, K: CameraIntrinsics,
                tol_px: float = 1e-3) -> list[Pose]:
    f = bearings(px, K)
    out = [_polish_minimal(p, world, px, K) for p in p3p_bearings(world, f)]
    out = [p for p in out if np.all(reprojection_errors(world, px, p, K) < tol_px)]
    out.sort(key=lambda p: tuple(p.translation))
    return out


# --------------------------------------------------------------------------
# Gauss-Newton refinement

def reprojection_jacobian(pose: Pose, points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """``(2n, 6)`` Jacobian of the pixels w.r.t. ``(omega, delta_t)``.

    The perturbation is ``R <- exp([omega]x) R``, ``t <- t + delta_t``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rx = pts @ pose.rotation.T
    xc = rx + pose.translation
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    n = pts.shape[0]
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z ** 2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z ** 2
    dx = np.zeros((n, 3, 6))
    # d(exp(w) R X)/dw at 0 = -[R X]x
    dx[:, 0, 1], dx[:, 0, 2] = rx[:, 2], -rx[:, 1]
    dx[:, 1, 0], dx[:, 1, 2] = -rx[:, 2], rx[:, 0]
    dx[:, 2, 0], dx[:, 2, 1] = rx[:, 1], -rx[:, 0]
    dx[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dx).reshape(2 * n, 6)


def _residuals(pose, pts, px, K):
    xc = pts @ pose.rotation.T + pose.translation
    z = xc[:, 2]
    if np.any(z <= 0):
        return None
    u = K.fx * xc[:, 0] / z + K.cx
    v = K.fy * xc[:, 1] / z + K.cy
    return np.stack([u - px[:, 0], v - px[:, 1]], axis=1).reshape(-1)


def _cost(pose, pts, px, K) -> float:
    r = _residuals(pose, pts, px, K)
    return math.inf if r is None else float(r @ r)


def _solve_normal(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    for lam in (0.0, 1e-6):
        a = h + lam * np.eye(6)
        if np.linalg.cond(a) < 1e14:
            step = np.linalg.solve(a, -g)
            if np.all(np.isfinite(step)):
                return step
    raise SingularNormalEquations("normal equations are singular")


def refine_pose_trace(initial: Pose, correspondences, K: CameraIntrinsics,
                      iterations: int = 10) -> tuple[Pose, list[float]]:
    """Gauss-Newton on the summed squared reprojection error.

    Returns the refined pose and the cost after every accepted iteration
    (first entry is the initial cost).  A step that would raise the cost is
    rejected and iteration stops, so the trace never increases.
    """
    pts, px = _as_arrays(correspondences)
    if pts.shape[0] < 4:
        raise TooFewCorrespondences(f"need >= 4 correspondences, got {pts.shape[0]}")
    pose = initial
    cost = _cost(pose, pts, px, K)
    trace = [cost]
    for _ in range(iterations):
        r = _residuals(pose, pts, px, K)
        if r is None:
            break
        J = reprojection_jacobian(pose, pts, K)
        step = _solve_normal(J.T @ J, J.T @ r)
        R = orthonormalize(so3_exp(step[:3]) @ pose.rotation)
        cand = Pose(R, pose.translation + step[3:])
        new_cost = _cost(cand, pts, px, K)
        if not new_cost <= cost:
            break
        decrease = cost - new_cost
        pose, cost = cand, new_cost
        trace.append(cost)
        if decrease < 1e-10:
            break
    return pose, trace


def refine_pose(initial: Pose, correspondences, K: CameraIntrinsics,
                iterations: int = 10) -> Pose:
    return refine_pose_trace(initial, correspondences, K, iterations)[0]


# --------------------------------------------------------------------------
# RANSAC

@dataclass
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    iterations: int


def _required_iterations(w: float, p: float, cap: int) -> int:
    if w <= 0:
        return cap
    if w >= 1:
        return 1
    denom = math.log(1.0 - w ** 3)
    if denom == 0:
        return cap
    return min(cap, math.ceil(math.log(1.0 - p) / denom))


def ransac_pnp(correspondences, K: CameraIntrinsics,
               params: RansacParams = RansacParams()) -> tuple[Pose, np.ndarray]:
    """Robust absolute pose from 2D-3D correspondences.

    Hypotheses come from random 3-subsets solved with P3P; among the roots of one
    sample, the one with most inliers wins, then the one with the smaller error
    on a fourth held-out point.  Hypotheses are ranked by (inlier count desc,
    inlier cost asc, hypothesis index asc).  Returns ``(pose, inlier indices)``.
    """
    res = ransac_pnp_full(correspondences, K, params)
    return res.pose, res.inliers


def ransac_pnp_full(correspondences, K: CameraIntrinsics,
                    params: RansacParams = RansacParams()) -> RansacResult:
    pts, px = _as_arrays(correspondences)
    n = pts.shape[0]
    if n < 4:
        raise TooFewCorrespondences(f"need >= 4 correspondences, got {n}")
    rng = np.random.default_rng(params.seed)
    thr = params.inlier_threshold_px
    best_key, best_pose = None, None
    needed = params.max_iterations
    it = 0
    while it < needed:
        sample = rng.choice(n, 4, replace=False)
        it += 1
        try:
            cands = _p3p_arrays(pts[sample[:3]], px[sample[:3]], K)
        except DegenerateGeometry:
            continue
        hyp = None
        for pose in cands:
            err = reprojection_errors(pts, px, pose, K)
            inl = err < thr
            count = int(inl.sum())
            key = (-count, float(err[sample[3]]))
            if hyp is None or key < hyp[0]:
                hyp = (key, pose, float((err[inl] ** 2).sum()))
        if hyp is None:
            continue
        (neg_count, _), pose, cost = hyp
        key = (neg_count, cost, it)
        if best_key is None or key < best_key:
            best_key, best_pose = key, pose
            needed = _required_iterations(-neg_count / n, params.confidence, params.max_iterations)
    if best_pose is None or -best_key[0] < params.min_inliers:
        found = 0 if best_key is None else -best_key[0]
        raise NoConsensus(f"best hypothesis has {found} inliers < {params.min_inliers}")
    inliers = np.flatnonzero(reprojection_errors(pts, px, best_pose, K) < thr)
    pose = best_pose
    if inliers.size >= 4:
        try:
            pose = refine_pose(best_pose, (pts[inliers], px[inliers]), K)
        except SingularNormalEquations:
            pose = best_pose
    inliers = np.flatnonzero(reprojection_errors(pts, px, pose, K) < thr)
    if inliers.size < params.min_inliers:
        raise NoConsensus(f"refined pose keeps {inliers.size} inliers < {params.min_inliers}")
    return RansacResult(pose, inliers, it)
