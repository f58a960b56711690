"""Per-frame feature data model and the binary ``.dxf`` / ``.dxd`` file formats.

Frames are produced by an external extractor (or :mod:`dxloc.synth`) and hold
keypoints, local descriptors, one global descriptor and optionally 3D points
lifted from a depth map.  All arrays are float32 so that a write/read round
trip is bit exact.
"""
from __future__ import annotations

import dataclasses
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (BadMagic, CorruptPayload, DimensionMismatch,
                     InvariantViolation, IoFailure, VersionMismatch)

FEATURE_MAGIC = b"DXFT"
FEATURE_VERSION = 1
DEPTH_MAGIC = b"DXDM"

# magic, version, frame_id, num_kp, D_local, D_global, has_points3d
_HEADER = struct.Struct("<4sIQIIIB")
_DEPTH_HEADER = struct.Struct("<4sIII")  # last u32 is reserved padding
_P3D_DTYPE = np.dtype([("index", "<u4"), ("xyz", "<f4", (3,))])

NORM_TOL = 1e-6
RENORM_TOL = 1e-4


class GlobalDescriptorRenormalized(UserWarning):
    """A loaded global descriptor was slightly off unit norm and was rescaled."""


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvariantViolation("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """One image's features.

    ``keypoints`` is an ``(n, 3)`` array of ``(x, y, score)`` rows,
    ``local_descriptors`` is ``(n, D_local)``.  When present, ``point_indices``
    and ``points3d`` give camera-frame 3D points (meters) for a subset of the
    keypoints.
    """

    frame_id: int
    keypoints: np.ndarray
    local_descriptors: np.ndarray
    global_descriptor: np.ndarray
    point_indices: np.ndarray | None = None
    points3d: np.ndarray | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float32)
        if kp.size == 0:
            kp = kp.reshape(0, 3)
        desc = np.asarray(self.local_descriptors, dtype=np.float32)
        if desc.ndim == 1 and desc.size == 0:
            desc = desc.reshape(0, 0)
        glob = np.asarray(self.global_descriptor, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "local_descriptors", desc)
        object.__setattr__(self, "global_descriptor", glob)
        if (self.point_indices is None) != (self.points3d is None):
            raise InvariantViolation("point_indices and points3d must be given together")
        if self.points3d is not None:
            idx = np.asarray(self.point_indices, dtype=np.uint32).reshape(-1)
            pts = np.asarray(self.points3d, dtype=np.float32).reshape(-1, 3)
            object.__setattr__(self, "point_indices", idx)
            object.__setattr__(self, "points3d", pts)

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def d_local(self) -> int:
        return self.local_descriptors.shape[1]

    @property
    def d_global(self) -> int:
        return self.global_descriptor.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def scores(self) -> np.ndarray:
        return self.keypoints[:, 2]

    @property
    def has_points3d(self) -> bool:
        return self.points3d is not None

    def keypoint(self, i: int) -> Keypoint:
        x, y, s = self.keypoints[i]
        return Keypoint(float(x), float(y), float(s))

    def validate(self) -> None:
        """Raise :class:`InvariantViolation` unless every invariant holds."""
        kp, desc, glob = self.keypoints, self.local_descriptors, self.global_descriptor
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise InvariantViolation(f"keypoints must be (n, 3), got {kp.shape}")
        if desc.ndim != 2 or desc.shape[0] != kp.shape[0]:
            raise InvariantViolation("descriptor rows must equal keypoint count")
        if not np.all(np.isfinite(kp)):
            raise InvariantViolation("non-finite keypoint")
        if np.any(kp[:, :2] < 0):
            raise InvariantViolation("keypoint coordinates must be >= 0")
        if np.any((kp[:, 2] < 0) | (kp[:, 2] > 1)):
            raise InvariantViolation("keypoint score outside [0, 1]")
        if not np.all(np.isfinite(desc)):
            raise InvariantViolation("non-finite local descriptor entry")
        if glob.size == 0 or not np.all(np.isfinite(glob)):
            raise InvariantViolation("global descriptor empty or non-finite")
        norm = float(np.linalg.norm(glob.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOL:
            raise InvariantViolation(f"global descriptor norm {norm!r} is not 1")
        if self.points3d is not None:
            idx, pts = self.point_indices, self.points3d
            if idx.shape[0] != pts.shape[0]:
                raise InvariantViolation("point_indices / points3d length mismatch")
            if np.any(idx >= kp.shape[0]):
                raise InvariantViolation("points3d index out of range")
            if not np.all(np.isfinite(pts)) or np.any(pts[:, 2] <= 0):
                raise InvariantViolation("3D points must be finite with z > 0")

    def point_map(self) -> dict[int, np.ndarray]:
        if self.points3d is None:
            return {}
        return {int(i): p for i, p in zip(self.point_indices, self.points3d)}


def encoded_size(num_kp: int, d_local: int, d_global: int, num_p3d: int | None) -> int:
    """Exact byte size of a ``.dxf`` file with the given dimensions."""
    size = _HEADER.size + num_kp * 12 + num_kp * d_local * 4 + d_global * 4
    if num_p3d is not None:
        size += 4 + num_p3d * _P3D_DTYPE.itemsize
    return size


def encode_frame(frame: FrameFeatures) -> bytes:
    frame.validate()
    n = frame.num_keypoints
    has_p3d = frame.points3d is not None
    parts = [
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frame.frame_id, n,
                     frame.d_local, frame.d_global, int(has_p3d)),
        frame.keypoints.astype("<f4").tobytes(),
        frame.local_descriptors.astype("<f4").tobytes(),
        frame.global_descriptor.astype("<f4").tobytes(),
    ]
    if has_p3d:
        rec = np.empty(frame.points3d.shape[0], dtype=_P3D_DTYPE)
        rec["index"] = frame.point_indices
        rec["xyz"] = frame.points3d
        parts.append(struct.pack("<I", rec.shape[0]))
        parts.append(rec.tobytes())
    return b"".join(parts)


def decode_frame(buf: bytes) -> FrameFeatures:
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagic("not a feature file")
    if len(buf) < _HEADER.size:
        raise CorruptPayload("truncated header")
    _, version, frame_id, n, d_local, d_global, has_p3d = _HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"feature file version {version}, expected {FEATURE_VERSION}")
    if has_p3d not in (0, 1):
        raise CorruptPayload("bad has_points3d flag")
    off = _HEADER.size
    fixed = encoded_size(n, d_local, d_global, 0 if has_p3d else None)
    if len(buf) < fixed:
        raise CorruptPayload("payload shorter than header counts imply")

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        return arr.astype(np.float32)

    keypoints = take(n * 3, (n, 3))
    desc = take(n * d_local, (n, d_local))
    glob = take(d_global, (d_global,))
    idx = pts = None
    if has_p3d:
        (m,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) != off + m * _P3D_DTYPE.itemsize:
            raise CorruptPayload("points3d count inconsistent with file size")
        rec = np.frombuffer(buf, dtype=_P3D_DTYPE, count=m, offset=off)
        idx = rec["index"].astype(np.uint32)
        pts = rec["xyz"].astype(np.float32)
    elif len(buf) != off:
        raise CorruptPayload("trailing bytes after payload")

    norm = float(np.linalg.norm(glob.astype(np.float64))) if d_global else 0.0
    if abs(norm - 1.0) > NORM_TOL and abs(norm - 1.0) <= RENORM_TOL:
        warnings.warn(f"frame {frame_id}: global descriptor norm {norm:.8f} renormalized",
                      GlobalDescriptorRenormalized, stacklevel=3)
        glob = (glob.astype(np.float64) / norm).astype(np.float32)
    frame = FrameFeatures(frame_id, keypoints, desc, glob, idx, pts)
    frame.validate()
    return frame


def write_frame_features(frame: FrameFeatures, path) -> None:
    data = encode_frame(frame)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_frame_features(path) -> FrameFeatures:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_frame(buf)


def write_depth_map(depth: np.ndarray, path) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise DimensionMismatch("depth map must be 2D")
    h, w = depth.shape
    try:
        Path(path).write_bytes(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0) + depth.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_depth_map(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if buf[:4] != DEPTH_MAGIC:
        raise BadMagic("not a depth raster")
    if len(buf) < _DEPTH_HEADER.size:
        raise CorruptPayload("truncated depth header")
    _, w, h, _ = _DEPTH_HEADER.unpack_from(buf)
    if len(buf) != _DEPTH_HEADER.size + w * h * 4:
        raise CorruptPayload("depth raster size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float32)


_INTRINSIC_RE = re.compile(r"\b(fx|fy|cx|cy)\s*=\s*([-+0-9.eE]+)")


def parse_intrinsics(text: str) -> CameraIntrinsics:
    found = {k: float(v) for k, v in _INTRINSIC_RE.findall(text)}
    missing = {"fx", "fy", "cx", "cy"} - found.keys()
    if missing:
        raise InvariantViolation(f"intrinsics missing {sorted(missing)}")
    return CameraIntrinsics(found["fx"], found["fy"], found["cx"], found["cy"])


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        return parse_intrinsics(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_intrinsics(k: CameraIntrinsics, path) -> None:
    Path(path).write_text(f"fx={k.fx!r}\nfy={k.fy!r}\ncx={k.cx!r}\ncy={k.cy!r}\n")


def lift_keypoints(frame: FrameFeatures, depth_map: np.ndarray,
                   intrinsics: CameraIntrinsics) -> FrameFeatures:
    """Back-project keypoints through a depth map (nearest pixel, no interpolation).

    Keypoints whose depth pixel is non-finite or ``<= 0`` get no 3D point.
    """
    depth = np.asarray(depth_map)
    if depth.ndim != 2:
        raise DimensionMismatch("depth map must be 2D")
    x = frame.keypoints[:, 0].astype(np.float64)
    y = frame.keypoints[:, 1].astype(np.float64)
    cols = np.floor(x + 0.5).astype(np.int64)
    rows = np.floor(y + 0.5).astype(np.int64)
    h, w = depth.shape
    if np.any(cols >= w) or np.any(rows >= h) or np.any(cols < 0) or np.any(rows < 0):
        raise DimensionMismatch(f"depth map {w}x{h} does not cover all keypoints")
    z = depth[rows, cols].astype(np.float64)
    ok = np.isfinite(z) & (z > 0)
    k = intrinsics
    pts = np.stack([z * (x - k.cx) / k.fx, z * (y - k.cy) / k.fy, z], axis=1)[ok]
    idx = np.nonzero(ok)[0].astype(np.uint32)
    return dataclasses.replace(frame, point_indices=idx, points3d=pts.astype(np.float32))
