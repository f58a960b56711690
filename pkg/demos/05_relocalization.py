# coding: utf-8

# # Re-localization with candidate groups
#
# Candidates are retrieved by global descriptor, chained into groups of
# nearby keyframe ids, and each group's pooled matches go through RANSAC.
# Here the query's landmarks are split across two adjacent keyframes: each
# alone has too few 3D matches, the pair together has plenty.

# In[1]:

from dxloc.database import KeyframeDatabase
from dxloc.relocalization import CandidateGroup, RelocConfig, match_to_group, relocalize
from dxloc.synth import INTRINSICS, planted_split_scene

scene = planted_split_scene(seed=0)
db = KeyframeDatabase()
for frame, pose in zip(scene.frames, scene.poses):
    db.add_keyframe(frame, pose)
a, b = scene.split_ids
print(len(db), "keyframes; landmarks split between", a, "and", b)


# In[2]:

for ids in ([a], [b], [a, b]):
    print(ids, len(match_to_group(scene.query, CandidateGroup(ids), db)), "matches")
print("minimum per group:", RelocConfig().min_group_matches)


# With grouping, the split keyframes form one group and the pose is found.

# In[3]:

pose, diag = relocalize(db, scene.query, INTRINSICS, RelocConfig())
print(diag.to_text())
print("position error (m):", pose.translation_error(scene.query_pose))


# Forcing singleton groups (gap 0) starves every group of matches.

# In[4]:

pose, diag = relocalize(db, scene.query, INTRINSICS, RelocConfig(group_gap=0))
print(diag.to_text())
print("pose:", pose)
