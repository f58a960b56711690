# coding: utf-8

# # Feature files and depth lifting
#
# Every frame the toolkit consumes is a `.dxf` file: keypoints with scores,
# one local descriptor per keypoint, a unit-norm global descriptor, and
# optionally a 3D point for the keypoints that have depth.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from dxloc.features import (CameraIntrinsics, FrameFeatures, encoded_size, lift_keypoints,
                            read_frame_features, write_frame_features)
from dxloc.geometry import Pose, project

rng = np.random.default_rng(0)
out = Path(tempfile.mkdtemp())


# A frame with 50 keypoints, 64-D local descriptors and a 128-D global descriptor.

# In[2]:

n = 50
kp = np.column_stack([rng.uniform(0, 639, n), rng.uniform(0, 479, n), rng.uniform(0, 1, n)])
desc = rng.normal(size=(n, 64))
g = rng.normal(size=128)
frame = FrameFeatures(7, kp, desc, g / np.linalg.norm(g))
write_frame_features(frame, out / "frame_000007.dxf")
print("bytes on disk:", (out / "frame_000007.dxf").stat().st_size, "expected:", encoded_size(n, 64, 128, None))


# Reading it back gives the same float32 payload bit for bit.

# In[3]:

back = read_frame_features(out / "frame_000007.dxf")
print("identical keypoints:", np.array_equal(back.keypoints, frame.keypoints))
print("identical descriptors:", np.array_equal(back.local_descriptors, frame.local_descriptors))


# Given a depth map, keypoints are lifted into camera coordinates with the
# pinhole model. Pixels with zero or non-finite depth are skipped.

# In[4]:

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
depth = rng.uniform(1.0, 4.0, (480, 640)).astype(np.float32)
depth[:100] = 0.0
lifted = lift_keypoints(frame, depth, K)
print(lifted.point_indices.size, "of", n, "keypoints have depth")


# Projecting the lifted points lands back on the keypoints, up to the half
# pixel lost to nearest-pixel depth lookup.

# In[5]:

uv = project(lifted.points3d.astype(np.float64), Pose(), K)
print("max reprojection gap (px):", np.abs(uv - lifted.keypoints[lifted.point_indices, :2]).max())
