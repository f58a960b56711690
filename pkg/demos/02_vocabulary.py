# coding: utf-8

# # Training a vocabulary incrementally
#
# Words come from descriptors that match across adjacent frames. Matched
# descriptors update a running-mean centroid; unmatched ones start new words.
# The resulting words are then organised into a k-ary tree by hierarchical
# k-means, and descriptors are quantized by greedy descent.

# In[1]:

import numpy as np

from dxloc.synth import SynthConfig, SynthWorld, make_sequence, make_training_sequence
from dxloc.vocabulary import (compute_visual_vector, incremental_words, match_adjacent,
                              similarity, train_incremental)

world = SynthWorld(SynthConfig(seed=1))
train = make_training_sequence(world).frames
print(len(train), "training frames,", train[0].num_keypoints, "keypoints in the first")


# Adjacent frames share most landmarks, so most keypoints pass the mutual
# nearest-neighbour and ratio tests. At most 300 pairs are kept per frame pair.

# In[2]:

pairs = match_adjacent(train[0], train[1])
print(len(pairs), "matches between frames 0 and 1")


# In[3]:

words = incremental_words(train)
print(words.centroids.shape[0], "words; most observed word seen", words.member_count.max(), "times")


# Building the tree (k = 10, up to 6 levels) and quantizing a frame.

# In[4]:

vocab = train_incremental(train, seed=0)
print(vocab.num_words, "leaves,", vocab.num_nodes, "nodes,", vocab.levels, "levels")
seq = make_sequence(world).frames
v = compute_visual_vector(seq[10], vocab)
print("frame 10 uses", len(v), "distinct words")


# The similarity score is 2 for identical vectors, high for neighbouring
# frames and for a planted revisit (frame 55 re-observes frame 11's place),
# and close to 0 for frames that see different landmarks.

# In[5]:

vec = [compute_visual_vector(f, vocab) for f in seq[:60]]
print("self:", similarity(vec[10], vec[10]))
print("neighbour:", round(similarity(vec[10], vec[11]), 3))
print("revisit 11 -> 55:", round(similarity(vec[11], vec[55]), 3))
print("far away:", round(similarity(vec[10], vec[45]), 3))
