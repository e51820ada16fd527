# # Channel masks and the distance between them
#
# A mask keeps the channels whose batch-norm scale |gamma| is largest across
# the whole network and drops the smallest fraction p.  Two masks are compared
# by the share of channels on which they disagree.

import numpy as np

from earlybird import compute_mask, distance_matrix, mask_distance

rng = np.random.default_rng(0)

# Three layers of scales.  Layer 1 is tiny everywhere, so a purely global
# ranking would empty it; the per-layer floor keeps its largest channel.

gammas = [rng.normal(0, 1, 4), rng.normal(0, 0.01, 3), rng.normal(0, 1, 5)]
mask = compute_mask(gammas, p=0.5)
print("kept bits:", mask.bits)
print("channels kept per layer:", np.add.reduceat(mask.bits, [0, 4, 7]).tolist())

# Nudging the scales a little moves only the channels near the threshold.

nudged = [g + rng.normal(0, 0.05, g.shape) for g in gammas]
other = compute_mask(nudged, p=0.5)
print("distance after a small nudge:", mask_distance(mask, other))

# A random walk of scales stands in for training: big steps early, small steps
# late.  The pairwise distance matrix shows the masks settling down.

g = rng.normal(0, 1, 64)
masks = []
for epoch in range(1, 13):
    g = g + rng.normal(0, 1.0 / epoch, g.shape)
    masks.append(compute_mask([g], p=0.3, source_epoch=epoch))

dm = distance_matrix(masks)
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(dm.values)
print("consecutive distances:", np.round(np.diag(dm.values, 1), 3))
