# coding: utf-8

# # Pose from 2D-3D correspondences
#
# The minimal solver (P3P) gives up to four poses from three points. RANSAC
# draws minimal samples, disambiguates with a fourth point, scores by
# reprojection inliers, and Gauss-Newton refines the winner on its inliers.

# In[1]:

import numpy as np

from dxloc.features import CameraIntrinsics
from dxloc.geometry import (Correspondence, Pose, RansacParams, p3p_solve, project, ransac_pnp_full,
                            refine_pose_trace, so3_exp)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
rng = np.random.default_rng(4)
truth = Pose(so3_exp(np.array([0.1, -0.3, 0.05])), np.array([0.2, -0.1, 0.5]))

cam = np.column_stack([rng.uniform(-2, 2, 100), rng.uniform(-1.5, 1.5, 100), rng.uniform(3, 8, 100)])
world = truth.inverse().transform(cam)
pixels = project(world, truth, K)


# Three exact correspondences: one of the P3P candidates is the true pose.

# In[2]:

corr = [Correspondence(tuple(world[i]), tuple(pixels[i])) for i in range(3)]
for pose in p3p_solve(*corr, K):
    print("candidate rotation error (rad):", pose.rotation_error(truth))


# Add one pixel of noise and replace 30 of the 100 observations with random
# pixels.

# In[3]:

noisy = pixels + rng.normal(size=pixels.shape) * 2 ** -0.5
bad = rng.choice(100, 30, replace=False)
noisy[bad] = np.column_stack([rng.uniform(0, 640, 30), rng.uniform(0, 480, 30)])
res = ransac_pnp_full((world, noisy), K, RansacParams(seed=0))
print(res.inliers.size, "inliers after", res.iterations, "iterations")
print("rotation error (deg):", np.rad2deg(res.pose.rotation_error(truth)))
print("position error (m):", res.pose.translation_error(truth))
print("outliers admitted:", len(set(res.inliers.tolist()) & set(bad.tolist())))


# Refinement from a perturbed start: the cost never goes up.

# In[4]:

start = Pose(so3_exp(np.array([0.02, 0.0, -0.03])) @ truth.rotation, truth.translation + 0.05)
keep = np.setdiff1d(np.arange(100), bad)
_, trace = refine_pose_trace(start, (world[keep], noisy[keep]), K)
print("cost per iteration:", [round(c, 2) for c in trace])
