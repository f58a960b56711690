import numpy as np
import pytest

from dxloc.features import CameraIntrinsics, FrameFeatures


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_frame(rng, n=20, d=16, dg=32, frame_id=0, with_points=False):
    kp = np.column_stack([rng.uniform(0, 639, n), rng.uniform(0, 479, n), rng.uniform(0, 1, n)])
    desc = rng.normal(size=(n, d))
    g = unit(rng.normal(size=dg))
    if with_points:
        idx = np.sort(rng.choice(n, n // 2, replace=False)).astype(np.uint32)
        pts = np.column_stack([rng.normal(size=(idx.size, 2)), rng.uniform(1, 5, idx.size)])
        return FrameFeatures(frame_id, kp, desc, g, idx, pts)
    return FrameFeatures(frame_id, kp, desc, g)


def frames_equal(a: FrameFeatures, b: FrameFeatures) -> bool:
    same = (a.frame_id == b.frame_id
            and np.array_equal(a.keypoints, b.keypoints)
            and np.array_equal(a.local_descriptors, b.local_descriptors)
            and np.array_equal(a.global_descriptor, b.global_descriptor)
            and a.has_points3d == b.has_points3d)
    if same and a.has_points3d:
        same = np.array_equal(a.point_indices, b.point_indices) and np.array_equal(a.points3d, b.points3d)
    return same


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def planted_leaves(rng, branches=(10, 10), d=32, spread=(1.0, 0.15)):
    """Hierarchically clustered leaf centroids: each level's children sit
    around their parent with a much smaller spread."""
    centers = np.zeros((1, d))
    for b, s in zip(branches, spread):
        centers = (centers[:, None, :] + rng.normal(size=(centers.shape[0], b, d)) * s).reshape(-1, d)
    return centers


def nearest_leaf(vocab, x):
    """Exhaustive nearest-leaf oracle (squared L2 in float64, ties to the lower word id)."""
    c = vocab.word_centroids().astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def random_sparse_vector(rng, n_words=50, max_support=12, support=None):
    from dxloc.vocabulary import VisualVector
    m = int(rng.integers(1, max_support + 1)) if support is None else support
    ids = np.sort(rng.choice(n_words, m, replace=False))
    w = rng.random(m) + 1e-3
    return VisualVector(ids, w / w.sum())


def dense_similarity(a, b):
    """Dense evaluation of the BoW score over every word of the union, written
    independently of the library (python floats, plain loop)."""
    da, db = a.to_dict(), b.to_dict()
    total = 0.0
    for w in sorted(set(da) | set(db)):
        x, y = da.get(w, 0.0), db.get(w, 0.0)
        total += (abs(x) + abs(y)) - abs(x - y)
    return total


def random_pose(rng, angle=np.pi, offset=2.0):
    from dxloc.geometry import Pose, so3_exp
    w = rng.normal(size=3)
    w *= rng.uniform(0, angle) / np.linalg.norm(w)
    return Pose(so3_exp(w), rng.normal(size=3) * offset)


def make_scene(rng, K, n=30, noise_px=0.0, n_outliers=0, pose=None):
    """World points seen by a random camera, their pixels, and the true pose.
    Outliers get uniform random pixels; returns (pts, px, pose, inlier_mask)."""
    pose = random_pose(rng) if pose is None else pose
    z = rng.uniform(2.0, 8.0, n)
    u = rng.uniform(20, 620, n)
    v = rng.uniform(20, 460, n)
    cam = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    pts = (cam - pose.translation) @ pose.rotation
    px = np.column_stack([u, v]) + rng.normal(size=(n, 2)) * noise_px
    inl = np.ones(n, bool)
    if n_outliers:
        bad = rng.choice(n, n_outliers, replace=False)
        px[bad] = np.column_stack([rng.uniform(0, 640, n_outliers), rng.uniform(0, 480, n_outliers)])
        inl[bad] = False
    return pts, px, pose, inl
