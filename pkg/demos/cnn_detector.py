"""
Patch classifier and hit map
============================

A small convolutional network learns to tell 75x75 patches centred on a
nucleus from the rest.  Sliding it over a frame gives a probability map;
dilating and thresholding that map leaves one blob per nucleus.
"""

import time

import numpy as np
from PIL import Image

from nucleo import cnn, dataset, evaluation, synthetic

gt = synthetic.synthetic_set(n_train=8, n_test=2, seed=3)
train = list(gt.subset(dataset.Split.TRAIN))
test = list(gt.subset(dataset.Split.TEST))

# Patches on a 5 px grid; positives are within 15 px of a marked nucleus.
patches = cnn.extract_patches(train, stride=5)
print(f"{len(patches)} patches, {100 * patches.positive_fraction:.1f}% positive")

# a balanced sample keeps the demo short
sample = cnn.balanced_subset(patches, 1000, seed=0)
model = cnn.init_model(seed=0)
t = time.perf_counter()
model, log = cnn.train(model, sample, epochs=15, lr=0.01, batch=32, seed=0,
                       progress=lambda e: print(f"epoch {e.epoch:2d}  loss {e.loss:.4f}  acc {e.accuracy:.3f}"))
print(f"trained in {time.perf_counter() - t:.0f}s")

outcomes = []
for f in test:
    hit = cnn.infer_hitmap(model, f.image, stride=cnn.INFER_STRIDE)
    det = cnn.postprocess_hitmap(hit)
    outcomes.append((f.frame_id, evaluation.match_detections(det, f.points)))
    print(f.frame_id, len(det.data), "detections for", len(f.points), "nuclei")
    Image.fromarray(cnn.hitmap_to_uint16(hit)).save(f"hitmap_{f.frame_id}.png")
print(evaluation.aggregate(outcomes).summary_line())

cnn.save_model(model, "demo_model.npz")
