# coding: utf-8

# # Two-phase loop closure
#
# Phase one ranks stored keyframes by bag-of-words score, skipping recent
# ones. Phase two picks, among those candidates, the keyframe whose global
# descriptor is closest, and accepts it only under a distance threshold.
# The synthetic corridor has planted revisits and planted aliases: alias
# frames reuse another place's words but look different globally.

# In[1]:

from dxloc.database import KeyframeDatabase, LcdConfig
from dxloc.synth import SynthConfig, SynthWorld, make_sequence, make_training_sequence
from dxloc.vocabulary import train_incremental

world = SynthWorld(SynthConfig(seed=2))
seq = make_sequence(world)
vocab = train_incremental(make_training_sequence(world).frames, seed=0)
print("revisits:", seq.loops[:4], "...")
print("aliases:", seq.aliases)


# In[2]:

db = KeyframeDatabase(vocab)
cfg = LcdConfig(K=10, global_dist_threshold=0.3, min_temporal_gap=30)
detections = {}
for frame in seq.frames:
    q = db.make_keyframe(frame)
    hit = db.detect_loop(q, cfg)
    if hit is not None:
        detections[frame.frame_id] = hit
    db.add_keyframe(frame)
print(len(detections), "loop closures accepted")


# Every planted revisit should be closed against its source frame.

# In[3]:

for i, j in seq.loops[:5]:
    hit = detections.get(j)
    print(f"frame {j}: planted source {i}, detected", None if hit is None else db.keyframes[hit.matched_keyframe_id].frame_id)


# Alias frames top the bag-of-words ranking for their word source, but the
# global descriptor disagrees, so phase two rejects them.

# In[4]:

for i, j in seq.aliases:
    top = db.query_topk(db.keyframes[j].visual_vector, 3, db.temporal_exclusion(j, 30))
    print(f"alias {j}: bow top-3 {[k for k, _ in top]}, accepted: {j in detections}")
