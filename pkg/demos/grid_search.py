"""
Choosing segmentation parameters by grid search
===============================================

Each grid point is scored by the F measure over the training frames.
Region growth does not depend on the minimum size or the minimum mean
intensity, so those two are swept on top of a single growth pass.
"""

import time

from nucleo import baseline, dataset, evaluation, synthetic

gt = synthetic.synthetic_set(n_train=6, n_test=3, seed=7)
train = list(gt.subset(dataset.Split.TRAIN))
test = list(gt.subset(dataset.Split.TEST))

grid = {
    "min_size": [50, 150, 300],
    "min_avg_intensity": [0, 10],
    "max_avg_intensity": [80, 120],
    "min_solidity": [0.80, 0.88, 0.94],
}
t = time.perf_counter()
result = baseline.grid_search(train, grid)
print(f"{len(result.rows)} grid points in {time.perf_counter() - t:.1f}s")

top = sorted(result.rows, key=lambda r: -r.f)[:5]
for row in top:
    p = row.params
    print(f"F {row.f:.3f}  P {row.precision:.3f}  R {row.recall:.3f}  "
          f"size {p.min_size:3d}  band [{p.min_avg_intensity:g}, {p.max_avg_intensity:g}]  "
          f"solidity {p.min_solidity}")
print("chosen:", result.best)

# score the chosen parameters on frames the search never saw
outcomes = []
for f in test:
    regions = baseline.segment(f.image, result.best)
    outcomes.append((f.frame_id, evaluation.match_masks([r.mask() for r in regions], f.points)))
print("test:", evaluation.aggregate(outcomes).summary_line())

with open("grid.csv", "w") as fh:
    fh.write(result.to_csv())
