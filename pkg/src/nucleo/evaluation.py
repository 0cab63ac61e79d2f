"""Detection scoring against manually marked nucleus points.

Three detection encodings are accepted: a list of points, a single binary mask
(split into 8-connected regions) or a list of per-nucleus binary masks.  In all
cases detections and ground-truth points are paired by a maximum-cardinality
one-to-one matching, so scores do not depend on list order.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

MATCH_RADIUS = 10.0
EIGHT = np.ones((3, 3), dtype=bool)

REPORT_FIELDS = ["frame_id", "tp", "fp", "fn", "precision", "recall", "f",
                 "precision_std", "recall_std", "micro_precision", "micro_recall"]
SUMMARY_ID = "ALL"


class EmptyInput(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MatchOutcome:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int], ...] = ()

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn


@dataclass
class DetectionSet:
    """``kind`` is ``"points"``, ``"mask"`` or ``"masks"``."""

    kind: str
    data: object

    @classmethod
    def points(cls, pts):
        return cls("points", np.asarray(pts, dtype=np.float64).reshape(-1, 2))

    @classmethod
    def mask(cls, mask):
        return cls("mask", np.asarray(mask).astype(bool))

    @classmethod
    def masks(cls, masks: Iterable):
        masks = [np.asarray(m).astype(bool) for m in masks]
        for i, m in enumerate(masks):
            if not m.any():
                raise ValueError(f"mask #{i} is empty")
        return cls("masks", masks)


def maximum_matching(n_left: int, n_right: int, edges: Sequence[tuple[int, int]]):
    """Maximum-cardinality bipartite matching.

    ``edges`` must already be in preference order: a greedy pass takes them in
    that order, then augmenting paths (explored in the same order) grow the
    matching until no augmenting path is left.  Returns ``(left, right)`` pairs
    sorted by left index.
    """
    adj: list[list[int]] = [[] for _ in range(n_left)]
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    for u, v in edges:
        adj[u].append(v)
        if match_l[u] < 0 and match_r[v] < 0:
            match_l[u], match_r[v] = v, u

    def augment(u, seen):
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if match_r[v] < 0 or augment(match_r[v], seen):
                match_l[u], match_r[v] = v, u
                return True
        return False

    for u in range(n_left):
        if match_l[u] < 0 and adj[u]:
            augment(u, set())
    return tuple((u, v) for u, v in enumerate(match_l) if v >= 0)


def match_points(detections, gt, radius: float = MATCH_RADIUS) -> MatchOutcome:
    """Pair detected points with ground-truth points closer than ``radius`` (strict)."""
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(det) == 0 or len(ref) == 0:
        return MatchOutcome(0, len(det), len(ref))
    d = np.hypot(det[:, None, 0] - ref[None, :, 0], det[:, None, 1] - ref[None, :, 1])
    i, j = np.nonzero(d < radius)
    order = np.lexsort((j, i, d[i, j]))
    pairs = maximum_matching(len(det), len(ref), list(zip(i[order].tolist(), j[order].tolist())))
    tp = len(pairs)
    return MatchOutcome(tp, len(det) - tp, len(ref) - tp, pairs)


def match_membership(n_regions: int, n_gt: int, members: Iterable[tuple[int, int]]) -> MatchOutcome:
    """Score regions given the (region, point) pairs where the point lies inside the region.

    A region holding no point at all is a false positive.  A region whose
    points were all taken by other regions counts neither way.
    """
    edges = sorted(set(members))
    pairs = maximum_matching(n_regions, n_gt, edges)
    covering = {r for r, _ in edges}
    tp = len(pairs)
    return MatchOutcome(tp, n_regions - len(covering), n_gt - tp, pairs)


def _gt_pixels(gt, shape):
    pts = np.asarray(gt, dtype=np.int64).reshape(-1, 2)
    h, w = shape
    if len(pts) and ((pts[:, 0] < 0).any() or (pts[:, 0] >= w).any()
                     or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any()):
        raise ValueError("ground-truth point outside the mask")
    return pts


def match_masks(regions: Sequence[np.ndarray], gt, shape=None) -> MatchOutcome:
    """Pair binary region masks with the ground-truth points they contain."""
    regions = [np.asarray(r).astype(bool) for r in regions]
    shapes = {r.shape for r in regions}
    if shape is not None:
        shapes.add(tuple(shape))
    if len(shapes) > 1:
        raise DimensionMismatch(f"masks of differing shapes: {sorted(shapes)}")
    if not regions:
        return MatchOutcome(0, 0, len(np.asarray(gt).reshape(-1, 2)))
    pts = _gt_pixels(gt, regions[0].shape)
    members = [(r, k) for r, m in enumerate(regions)
               for k in np.flatnonzero(m[pts[:, 1], pts[:, 0]]).tolist()]
    return match_membership(len(regions), len(pts), members)


def match_label_image(labels: np.ndarray, gt) -> MatchOutcome:
    """Same as :func:`match_masks` for disjoint regions stored as a label image (0 = background)."""
    labels = np.asarray(labels)
    pts = _gt_pixels(gt, labels.shape)
    ids = np.unique(labels[labels > 0])
    index = {int(v): r for r, v in enumerate(ids)}
    hit = labels[pts[:, 1], pts[:, 0]] if len(pts) else np.zeros(0, dtype=labels.dtype)
    members = [(index[int(v)], k) for k, v in enumerate(hit) if v > 0]
    return match_membership(len(ids), len(pts), members)


def split_mask(mask: np.ndarray) -> np.ndarray:
    """Label the 8-connected components of a binary mask."""
    labels, _ = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT)
    return labels


def match_detections(det: DetectionSet, gt, shape=None, radius: float = MATCH_RADIUS) -> MatchOutcome:
    if det.kind == "points":
        return match_points(det.data, gt, radius)
    if det.kind == "mask":
        if shape is not None and det.data.shape != tuple(shape):
            raise DimensionMismatch(f"mask shape {det.data.shape} != frame shape {tuple(shape)}")
        return match_label_image(split_mask(det.data), gt)
    if det.kind == "masks":
        return match_masks(det.data, gt, shape)
    raise ValueError(f"unknown detection kind {det.kind!r}")


# ---------------------------------------------------------------------------
# metrics

def frame_metrics(outcome: MatchOutcome) -> tuple[float, float]:
    """Precision and recall of one frame.

    A zero denominator scores 1 only when the other side is empty too
    (no detections and no ground truth), otherwise 0.
    """
    tp, fp, fn = outcome.tp, outcome.fp, outcome.fn
    precision = tp / (tp + fp) if tp + fp else float(fn == 0)
    recall = tp / (tp + fn) if tp + fn else float(fp == 0)
    return precision, recall


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    per_frame: list[tuple[str, MatchOutcome, float, float]]
    precision: float
    precision_std: float
    recall: float
    recall_std: float
    micro_precision: float
    micro_recall: float
    f: float = field(init=False)

    def __post_init__(self):
        self.f = f_measure(self.precision, self.recall)

    @property
    def totals(self) -> MatchOutcome:
        return MatchOutcome(sum(o.tp for _, o, _, _ in self.per_frame),
                            sum(o.fp for _, o, _, _ in self.per_frame),
                            sum(o.fn for _, o, _, _ in self.per_frame))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for frame_id, o, p, r in self.per_frame:
            w.writerow([frame_id, o.tp, o.fp, o.fn, _fmt(p), _fmt(r), _fmt(f_measure(p, r)), "", "", "", ""])
        t = self.totals
        w.writerow([SUMMARY_ID, t.tp, t.fp, t.fn, _fmt(self.precision), _fmt(self.recall), _fmt(self.f),
                    _fmt(self.precision_std), _fmt(self.recall_std),
                    _fmt(self.micro_precision), _fmt(self.micro_recall)])
        return out.getvalue()

    def summary_line(self) -> str:
        return (f"P = {self.precision:.3f} +/- {self.precision_std:.3f}   "
                f"R = {self.recall:.3f} +/- {self.recall_std:.3f}   F = {self.f:.3f}")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def aggregate(per_frame: Iterable[tuple[str, MatchOutcome]]) -> MetricsReport:
    """Mean and population STD of per-frame precision/recall, plus pooled (micro) values.

    The headline F is computed from the mean precision and mean recall.
    """
    rows = sorted(per_frame, key=lambda x: x[0])
    if not rows:
        raise EmptyInput("no frames to aggregate")
    scored = [(fid, o, *frame_metrics(o)) for fid, o in rows]
    p = np.array([s[2] for s in scored])
    r = np.array([s[3] for s in scored])
    total = MatchOutcome(sum(o.tp for _, o in rows), sum(o.fp for _, o in rows), sum(o.fn for _, o in rows))
    micro_p, micro_r = frame_metrics(total)
    return MetricsReport(scored, float(p.mean()), float(p.std()), float(r.mean()), float(r.std()),
                         micro_p, micro_r)


def read_report_csv(text: str) -> dict[str, str]:
    """Return the summary row of a report written by :meth:`MetricsReport.to_csv`."""
    for row in csv.DictReader(io.StringIO(text)):
        if row["frame_id"] == SUMMARY_ID:
            return row
    raise ValueError("report has no summary row")
