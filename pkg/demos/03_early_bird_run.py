# # A complete early-bird run on toy data
#
# Search trains the dense network and records one mask per epoch.  The first
# time a full window of consecutive mask distances stays below epsilon, the
# ticket is drawn, pruned and retrained.  The lottery-ticket baseline instead
# trains the dense network for the whole budget before pruning.

import numpy as np

from earlybird import NetworkSpec, TrainConfig, baseline_lt, eb_search, eb_train
from earlybird.data import DataSplits, Dataset
from earlybird.model import Conv, GlobalAvgPool, Linear, MaxPool

# Four classes of 8x8 images: a fixed template per class plus noise.

rng = np.random.default_rng(0)
templates = rng.normal(0, 1, (4, 1, 8, 8)).astype(np.float32)


def make(n):
    y = rng.integers(0, 4, n)
    x = templates[y] + 0.5 * rng.normal(0, 1, (n, 1, 8, 8)).astype(np.float32)
    return Dataset(x.astype(np.float32), y, 4)


splits = DataSplits(make(512), make(64), make(256))
spec = NetworkSpec((1, 8, 8), (Conv(8), MaxPool(), Conv(16), GlobalAvgPool(), Linear(4)), 4)
cfg = TrainConfig(search_epochs=12, retrain_epochs=4, batch_size=32, p=0.5, epsilon=0.1, window=3)

search = eb_search(splits, spec, cfg)
ticket, dense = search
print("mask distances per epoch:", [None if d is None else round(d, 3) for d in (r["mask_distance"] for r in dense.metrics)])
print("ticket drawn at epoch", ticket.epoch, "(triggered)" if ticket.triggered else "(fallback)")

eb = eb_train(splits, spec, cfg, search=search)
lt = baseline_lt(splits, spec, cfg)

for report in (eb, lt):
    print(f"{report.name:>12}: accuracy {report.final_accuracy:.3f}, total training FLOPs {report.cost.total:.3e}")
print(f"early-bird cost relative to the baseline: {eb.cost.total / lt.cost.total:.2f}")
