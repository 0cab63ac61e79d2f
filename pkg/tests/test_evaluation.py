import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nucleo import evaluation as ev
from oracles import masks_oracle, points_oracle


def test_identical_points():
    pts = [(10, 10), (50, 60), (100, 5)]
    o = ev.match_points(pts, pts)
    assert (o.tp, o.fp, o.fn) == (3, 0, 0)
    assert sorted(o.pairs) == [(0, 0), (1, 1), (2, 2)]


def test_radius_is_strict():
    o = ev.match_points([(50, 50)], [(50, 60)])
    assert (o.tp, o.fp, o.fn) == (0, 1, 1)
    o = ev.match_points([(50, 50)], [(50, 59.999)])
    assert o.tp == 1


def test_greedy_would_lose():
    # d0 is nearest to g0, but g0 is the only point d1 can reach
    det = [(0, 0), (-8, 0)]
    gt = [(-1, 0), (8, 0)]
    o = ev.match_points(det, gt)
    assert o.tp == 2 == points_oracle(det, gt)[0]


def test_crossing_three_by_three():
    det = [(0, 0), (9, 0), (18, 0)]
    gt = [(4, 0), (13, 0), (-5, 0)]
    assert ev.match_points(det, gt).tp == points_oracle(det, gt)[0] == 3


def test_empty_inputs():
    assert ev.match_points([], []).tp == 0
    o = ev.match_points([(1, 1)], [])
    assert (o.tp, o.fp, o.fn) == (0, 1, 0)
    o = ev.match_masks([], [(1, 1), (2, 2)])
    assert (o.tp, o.fp, o.fn) == (0, 0, 2)


def _square(shape, x0, y0, x1, y1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_region_with_two_points():
    shape = (40, 40)
    o = ev.match_masks([_square(shape, 5, 5, 20, 20)], [(8, 8), (15, 15)])
    assert (o.tp, o.fp, o.fn) == (1, 0, 1)


def test_two_overlapping_regions_cover_both():
    shape = (40, 40)
    regions = [_square(shape, 5, 5, 20, 20), _square(shape, 6, 6, 21, 21)]
    o = ev.match_masks(regions, [(8, 8), (15, 15)])
    assert (o.tp, o.fp, o.fn) == (2, 0, 0)


def test_region_without_point_is_fp_but_shadowed_region_is_not():
    shape = (40, 40)
    regions = [_square(shape, 0, 0, 10, 10), _square(shape, 2, 2, 8, 8), _square(shape, 30, 30, 35, 35)]
    o = ev.match_masks(regions, [(5, 5)])
    # region 1 only holds the point matched to region 0: neither tp nor fp
    assert (o.tp, o.fp, o.fn) == (1, 1, 0)


def test_dimension_mismatch():
    with pytest.raises(ev.DimensionMismatch):
        ev.match_masks([np.ones((4, 4), bool), np.ones((5, 4), bool)], [])
    with pytest.raises(ev.DimensionMismatch):
        ev.match_detections(ev.DetectionSet.mask(np.ones((4, 4))), [], shape=(5, 5))


def test_single_mask_uses_8_connectivity():
    m = np.zeros((10, 10), bool)
    m[2, 2] = m[3, 3] = True  # diagonal neighbours: one region
    m[7, 7] = True
    o = ev.match_detections(ev.DetectionSet.mask(m), [(2, 2), (3, 3)])
    assert (o.tp, o.fp, o.fn) == (1, 1, 1)


def test_label_image_matches_masklist(rng):
    labels = np.zeros((30, 30), np.uint16)
    labels[2:8, 2:8] = 1
    labels[10:20, 10:20] = 2
    labels[22:28, 22:28] = 5
    gt = [(3, 3), (12, 12), (15, 15), (0, 29)]
    a = ev.match_label_image(labels, gt)
    b = ev.match_masks([labels == v for v in (1, 2, 5)], gt)
    assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn) == (2, 1, 2)


# ---------------------------------------------------------------------------
# metrics

def test_frame_metrics():
    assert ev.frame_metrics(ev.MatchOutcome(4, 1, 1)) == (0.8, 0.8)
    assert ev.frame_metrics(ev.MatchOutcome(0, 0, 0)) == (1.0, 1.0)
    assert ev.frame_metrics(ev.MatchOutcome(0, 0, 3)) == (0.0, 0.0)
    assert ev.frame_metrics(ev.MatchOutcome(0, 2, 0)) == (0.0, 0.0)


def test_f_measure_published_rows():
    assert ev.f_measure(0.803, 0.838) == pytest.approx(0.820, abs=5e-4)
    assert ev.f_measure(0.790, 0.792) == pytest.approx(0.791, abs=5e-4)
    assert ev.f_measure(0, 0) == 0


@given(st.floats(0, 1), st.floats(0, 1))
def test_f_measure_symmetric(p, r):
    assert ev.f_measure(p, r) == pytest.approx(ev.f_measure(r, p))
    if p > 0:
        assert ev.f_measure(p, p) == pytest.approx(p)


def test_aggregate_singleton():
    rep = ev.aggregate([("frame000", ev.MatchOutcome(1, 1, 1))])
    assert (rep.precision, rep.precision_std, rep.recall, rep.recall_std) == (0.5, 0, 0.5, 0)
    assert (rep.micro_precision, rep.micro_recall) == (0.5, 0.5)


def test_aggregate_macro_vs_micro():
    rep = ev.aggregate([("frame001", ev.MatchOutcome(0, 4, 4)), ("frame000", ev.MatchOutcome(4, 0, 0))])
    assert rep.precision == 0.5 and rep.precision_std == 0.5
    assert rep.recall == 0.5 and rep.recall_std == 0.5
    # pooled: tp 4, fp 4, fn 4
    assert rep.micro_precision == 0.5 and rep.micro_recall == 0.5
    assert [r[0] for r in rep.per_frame] == ["frame000", "frame001"]
    rep = ev.aggregate([("a", ev.MatchOutcome(1, 0, 0)), ("b", ev.MatchOutcome(0, 3, 9))])
    assert rep.precision == 0.5
    assert rep.micro_precision == pytest.approx(1 / 4)
    assert rep.micro_recall == pytest.approx(1 / 10)


def test_aggregate_empty():
    with pytest.raises(ev.EmptyInput):
        ev.aggregate([])


def test_report_csv_round_trip():
    rep = ev.aggregate([("frame000", ev.MatchOutcome(3, 1, 0)), ("frame001", ev.MatchOutcome(2, 0, 2))])
    text = rep.to_csv()
    assert text.splitlines()[0] == ",".join(ev.REPORT_FIELDS)
    row = ev.read_report_csv(text)
    assert float(row["precision"]) == pytest.approx(rep.precision, abs=1e-6)
    assert int(row["tp"]) == 5


# ---------------------------------------------------------------------------
# properties

coord = st.integers(0, 40)
point_lists = st.lists(st.tuples(coord, coord), max_size=6)


@settings(max_examples=300, deadline=None)
@given(point_lists, point_lists)
def test_points_match_oracle(det, gt):
    o = ev.match_points(det, gt)
    assert (o.tp, o.fp, o.fn) == points_oracle(det, gt)
    assert o.tp + o.fn == len(gt) and o.tp + o.fp == len(det)
    assert len({d for d, _ in o.pairs}) == len({g for _, g in o.pairs}) == o.tp
    for d, g in o.pairs:
        assert np.hypot(det[d][0] - gt[g][0], det[d][1] - gt[g][1]) < 10


@st.composite
def mask_instances(draw):
    n = draw(st.integers(0, 6))
    shape = (24, 24)
    masks = []
    for _ in range(n):
        x0, y0 = draw(st.integers(0, 20)), draw(st.integers(0, 20))
        w, h = draw(st.integers(1, 10)), draw(st.integers(1, 10))
        masks.append(_square(shape, x0, y0, min(x0 + w, 24), min(y0 + h, 24)))
    gt = draw(st.lists(st.tuples(st.integers(0, 23), st.integers(0, 23)), max_size=6))
    return masks, gt


@settings(max_examples=300, deadline=None)
@given(mask_instances())
def test_masks_match_oracle(inst):
    masks, gt = inst
    o = ev.match_masks(masks, gt)
    assert (o.tp, o.fp, o.fn) == masks_oracle(masks, gt)
    assert o.tp + o.fn == len(gt)


@settings(max_examples=100, deadline=None)
@given(point_lists, point_lists, st.randoms())
def test_points_permutation_invariant(det, gt, random):
    o = ev.match_points(det, gt)
    det2, gt2 = list(det), list(gt)
    random.shuffle(det2)
    random.shuffle(gt2)
    o2 = ev.match_points(det2, gt2)
    assert (o.tp, o.fp, o.fn) == (o2.tp, o2.fp, o2.fn)


@settings(max_examples=100, deadline=None)
@given(point_lists, point_lists, st.tuples(coord, coord))
def test_monotone_in_detections_and_gt(det, gt, extra):
    base = ev.match_points(det, gt)
    assert ev.match_points(det + [extra], gt).tp >= base.tp
    more = ev.match_points(det, gt + [extra])
    assert more.tp + more.fn >= base.tp + base.fn


def test_points_vs_masklist_same_nuclei():
    shape = (60, 60)
    gt = [(10, 10), (30, 30), (50, 12)]
    masks = [_square(shape, x - 3, y - 3, x + 4, y + 4) for x, y in gt[:2]]
    a = ev.match_points(gt[:2], gt)
    b = ev.match_masks(masks, gt)
    assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn) == (2, 0, 1)
