"""
Scoring detections against marked nuclei
========================================

Ground truth is one point per nucleus.  Detections come either as points
or as regions, and both are scored with a one-to-one matching so that a
single detection can never claim two nuclei.
"""

import numpy as np
from nucleo import evaluation as ev

# three marked nuclei
gt = [(40, 40), (60, 40), (120, 90)]

# Points match when they are strictly closer than 10 px.
# (52, 40) is within reach of both of the first two nuclei,
# (45, 41) only of the first one; the matching pairs them up anyway.
det = [(52, 40), (45, 41), (200, 200)]
o = ev.match_points(det, gt)
print("points:", o.tp, "tp", o.fp, "fp", o.fn, "fn", "pairs", o.pairs)

# A region matches a nucleus whose point lies inside it.  A region holding
# two points still counts once; the second nucleus is a miss.
shape = (150, 250)
big = np.zeros(shape, bool)
big[30:50, 30:70] = True
o = ev.match_masks([big], gt)
print("one region over two nuclei:", o.tp, o.fp, o.fn)

# Regions with no point inside are false positives.
empty = np.zeros(shape, bool)
empty[5:10, 200:210] = True
o = ev.match_masks([big, empty], gt)
print("plus an empty region:", o.tp, o.fp, o.fn)

# Per-frame precision and recall are averaged over frames; F is taken
# from the two averages.
rep = ev.aggregate([
    ("frame000", ev.MatchOutcome(tp=9, fp=1, fn=2)),
    ("frame001", ev.MatchOutcome(tp=5, fp=3, fn=0)),
])
print(rep.summary_line())
print(rep.to_csv())
