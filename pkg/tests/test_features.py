import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import frames_equal, random_frame, unit
from dxloc.errors import (BadMagic, CorruptPayload, DimensionMismatch, InvariantViolation,
                          VersionMismatch)
from dxloc.features import (CameraIntrinsics, FrameFeatures, GlobalDescriptorRenormalized,
                            decode_frame, encode_frame, encoded_size, lift_keypoints,
                            parse_intrinsics, read_depth_map, read_frame_features,
                            read_intrinsics, write_depth_map, write_frame_features,
                            write_intrinsics)
from dxloc.geometry import Pose, project


def hand_encode(frame_id, kp, desc, g, p3d=None, version=1):
    """Byte layout written straight from the format table, independent of the encoder."""
    n, d = desc.shape
    out = b"DXFT" + struct.pack("<I", version) + struct.pack("<Q", frame_id)
    out += struct.pack("<III", n, d, len(g)) + struct.pack("<B", 0 if p3d is None else 1)
    for row in kp:
        out += struct.pack("<3f", *row)
    for row in desc:
        out += struct.pack(f"<{d}f", *row)
    out += struct.pack(f"<{len(g)}f", *g)
    if p3d is not None:
        out += struct.pack("<I", len(p3d))
        for i, xyz in p3d:
            out += struct.pack("<I3f", i, *xyz)
    return out


def test_round_trip_bit_exact(tmp_path, rng):
    for with_points in (False, True):
        f = random_frame(rng, with_points=with_points)
        p = tmp_path / "f.dxf"
        write_frame_features(f, p)
        assert frames_equal(read_frame_features(p), f)


def test_encoder_matches_hand_layout(rng):
    f = random_frame(rng, n=5, d=4, dg=6, frame_id=2 ** 40 + 7, with_points=True)
    p3d = list(zip(f.point_indices.tolist(), f.points3d.tolist()))
    assert encode_frame(f) == hand_encode(f.frame_id, f.keypoints, f.local_descriptors,
                                          f.global_descriptor, p3d)


def test_bad_magic(tmp_path, rng):
    buf = bytearray(encode_frame(random_frame(rng)))
    buf[:4] = b"XXXX"
    p = tmp_path / "bad.dxf"
    p.write_bytes(bytes(buf))
    with pytest.raises(BadMagic):
        read_frame_features(p)


def test_version_mismatch(rng):
    f = random_frame(rng, n=2, d=3, dg=4)
    buf = hand_encode(0, f.keypoints, f.local_descriptors, f.global_descriptor, version=2)
    with pytest.raises(VersionMismatch):
        decode_frame(buf)


def test_zero_keypoints_accepted(tmp_path):
    f = FrameFeatures(3, np.zeros((0, 3)), np.zeros((0, 8)), unit(np.ones(4)))
    p = tmp_path / "e.dxf"
    write_frame_features(f, p)
    g = read_frame_features(p)
    assert g.num_keypoints == 0 and g.d_local == 8
    assert frames_equal(f, g)


def test_writes_are_deterministic(tmp_path, rng):
    f = random_frame(rng, with_points=True)
    write_frame_features(f, tmp_path / "a.dxf")
    write_frame_features(f, tmp_path / "b.dxf")
    assert (tmp_path / "a.dxf").read_bytes() == (tmp_path / "b.dxf").read_bytes()


def test_nan_descriptor_rejected_and_nothing_written(tmp_path, rng):
    f = random_frame(rng)
    desc = f.local_descriptors.copy()
    desc[3, 2] = np.nan
    bad = FrameFeatures(0, f.keypoints, desc, f.global_descriptor)
    p = tmp_path / "nan.dxf"
    with pytest.raises(InvariantViolation):
        write_frame_features(bad, p)
    assert not p.exists()


def test_file_size_closed_form(tmp_path, rng):
    # 29-byte header + 300 * 12 keypoint bytes + 300 * 256 * 4 descriptor bytes + 4096 * 4
    expected = 327213
    assert encoded_size(300, 256, 4096, None) == expected
    f = random_frame(rng, n=300, d=256, dg=4096)
    p = tmp_path / "big.dxf"
    write_frame_features(f, p)
    assert p.stat().st_size == expected


def test_every_truncation_rejected(rng):
    for with_points in (False, True):
        buf = encode_frame(random_frame(rng, n=4, d=3, dg=5, with_points=with_points))
        for cut in range(len(buf)):
            with pytest.raises((CorruptPayload, BadMagic)):
                decode_frame(buf[:cut])


def test_trailing_bytes_rejected(rng):
    buf = encode_frame(random_frame(rng, n=4, d=3, dg=5))
    with pytest.raises(CorruptPayload):
        decode_frame(buf + b"\0")


def test_slightly_off_global_is_renormalized_with_warning(rng):
    f = random_frame(rng, n=3, d=4, dg=8)
    g = f.global_descriptor.astype(np.float64) * (1 + 5e-5)
    buf = hand_encode(0, f.keypoints, f.local_descriptors, g)
    with pytest.warns(GlobalDescriptorRenormalized):
        out = decode_frame(buf)
    assert abs(np.linalg.norm(out.global_descriptor.astype(np.float64)) - 1) <= 1e-6


def test_far_off_global_is_rejected(rng):
    f = random_frame(rng, n=3, d=4, dg=8)
    buf = hand_encode(0, f.keypoints, f.local_descriptors, f.global_descriptor.astype(np.float64) * 1.001)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(InvariantViolation):
            decode_frame(buf)


def test_invalid_point_index_rejected(rng):
    f = random_frame(rng, n=3, d=4, dg=8)
    bad = FrameFeatures(0, f.keypoints, f.local_descriptors, f.global_descriptor, [5], [[0, 0, 1]])
    with pytest.raises(InvariantViolation):
        encode_frame(bad)
    bad = FrameFeatures(0, f.keypoints, f.local_descriptors, f.global_descriptor, [0], [[0, 0, -1]])
    with pytest.raises(InvariantViolation):
        encode_frame(bad)


def test_score_out_of_range_rejected(rng):
    f = random_frame(rng, n=3, d=4, dg=8)
    kp = f.keypoints.copy()
    kp[0, 2] = 1.5
    with pytest.raises(InvariantViolation):
        FrameFeatures(0, kp, f.local_descriptors, f.global_descriptor).validate()


# -- depth lifting -----------------------------------------------------------

def _frame_at(pixels):
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    kp = np.column_stack([pixels, np.full(len(pixels), 0.5)])
    return FrameFeatures(0, kp, np.zeros((len(pixels), 2)), unit([1.0, 0.0]))


def test_lift_principal_point(K):
    depth = np.full((480, 640), 2.0, np.float32)
    out = lift_keypoints(_frame_at([[320, 240]]), depth, K)
    assert np.allclose(out.points3d, [[0, 0, 2.0]])


def test_lift_one_focal_length_off_axis(K):
    # (cx + fx, cy) at depth 1: x = 1 * (820 - 320) / 500 = 1
    depth = np.ones((480, 1000), np.float32)
    out = lift_keypoints(_frame_at([[820, 240]]), depth, K)
    assert np.allclose(out.points3d, [[1.0, 0.0, 1.0]])


def test_lift_skips_invalid_depth(K):
    depth = np.ones((480, 640), np.float32)
    depth[240, 320] = 0.0
    depth[100, 100] = np.nan
    out = lift_keypoints(_frame_at([[320, 240], [100, 100], [50, 60]]), depth, K)
    assert out.point_indices.tolist() == [2]


def test_lift_nearest_pixel_rounding(K):
    depth = np.ones((480, 640), np.float32)
    depth[240, 321] = 3.0
    out = lift_keypoints(_frame_at([[320.6, 239.7]]), depth, K)
    assert out.points3d[0, 2] == 3.0


def test_lift_out_of_range_is_dimension_mismatch(K):
    depth = np.ones((10, 10), np.float32)
    with pytest.raises(DimensionMismatch):
        lift_keypoints(_frame_at([[320, 240]]), depth, K)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 639.4), st.floats(0, 479.4)), min_size=1, max_size=20),
       st.floats(0.3, 20.0))
def test_lift_then_project_reproduces_pixels(pixels, z):
    K = CameraIntrinsics(500.0, 480.0, 320.0, 240.0)
    depth = np.full((480, 640), z, np.float32)
    frame = _frame_at(pixels)
    out = lift_keypoints(frame, depth, K)
    uv = project(out.points3d.astype(np.float64), Pose(), K)
    assert np.abs(uv - frame.keypoints[out.point_indices, :2]).max() <= 0.5


def test_depth_map_round_trip(tmp_path, rng):
    d = rng.uniform(0, 5, (7, 9)).astype(np.float32)
    write_depth_map(d, tmp_path / "d.dxd")
    raw = (tmp_path / "d.dxd").read_bytes()
    assert raw[:4] == b"DXDM" and struct.unpack_from("<II", raw, 4) == (9, 7) and len(raw) == 16 + 7 * 9 * 4
    assert np.array_equal(read_depth_map(tmp_path / "d.dxd"), d)
    (tmp_path / "x.dxd").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        read_depth_map(tmp_path / "x.dxd")
    (tmp_path / "t.dxd").write_bytes(raw[:-3])
    with pytest.raises(CorruptPayload):
        read_depth_map(tmp_path / "t.dxd")


def test_intrinsics_text(tmp_path):
    k = parse_intrinsics("fx= 525.0 fy= 520.5\ncx= 319.5 cy= 239.5")
    assert (k.fx, k.fy, k.cx, k.cy) == (525.0, 520.5, 319.5, 239.5)
    write_intrinsics(k, tmp_path / "k.txt")
    assert read_intrinsics(tmp_path / "k.txt") == k
    with pytest.raises(InvariantViolation):
        parse_intrinsics("fx=1 fy=1 cx=0")
    with pytest.raises(InvariantViolation):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
