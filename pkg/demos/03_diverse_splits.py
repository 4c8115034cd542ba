"""
Diversity-aware splits
======================

Farthest point sampling picks spread-out points; the multi-split variant
grows train/val/test together so each split stays spread out.
"""

import numpy as np

from blendforge import sampler

# points on a circle: FPS keeps jumping to the largest gap
angles = np.radians([0, 10, 20, 90, 100, 180, 185, 270])
pts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
order = sampler.fps_select(pts, 4)
print("fps order:", np.degrees(angles[order]))

# clustered data: 5 tight clusters of 40 points each
rng = np.random.default_rng(0)
centers = rng.normal(size=(5, 16)) * 3
x = np.vstack([c + 0.1 * rng.normal(size=(40, 16)) for c in centers])
emb = sampler.normalize_embeddings(x)
cluster = np.repeat(np.arange(5), 40)

plan = sampler.SplitPlan.parse("train:0.6,val:0.2,test:0.2", 20)
print("sizes:", dict(zip(plan.names, plan.sizes)))
assign = sampler.multi_split_assign(emb, plan)
for name, members in zip(assign.names, assign.splits):
    print("%-5s clusters covered: %s" % (name, sorted(set(cluster[members].tolist()))))

# compare with a random pick of the same size
pick = rng.choice(len(x), 12, replace=False)
print("random train clusters:", sorted(set(cluster[pick].tolist())))

# the weighted round robin for 0.6/0.2/0.2
sizes, counts, seq = [3, 1, 1], [0, 0, 0], []
while (s := sampler.round_robin_turn(sizes, counts)) >= 0:
    seq.append(plan.names[s])
    counts[s] += 1
print("turn pattern:", seq)
