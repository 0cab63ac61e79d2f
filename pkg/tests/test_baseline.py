import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nucleo import baseline as bl
from nucleo import evaluation as ev
from oracles import random_blob, scalar_denoise, solidity_oracle


def _disk(shape, cx, cy, r):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


# ---------------------------------------------------------------------------
# denoise

def test_denoise_constant_image():
    img = np.full((12, 9), 77, np.uint8)
    assert np.array_equal(bl.denoise(img, 5), img)
    assert np.array_equal(bl.denoise(bl.denoise(img, 5), 5), img)


def test_denoise_single_spike():
    img = np.zeros((5, 5), np.uint8)
    img[2, 2] = 255
    out = bl.denoise(img, 3)
    expected = np.zeros((5, 5), int)
    expected[1:4, 1:4] = 10
    expected[2, 2] = 173
    assert out.tolist() == expected.tolist()


def test_denoise_matches_loop_reference(rng):
    img = rng.integers(0, 256, size=(9, 11)).astype(np.uint8)
    for w in (3, 5):
        assert np.array_equal(bl.denoise(img, w), scalar_denoise(img, w))


def test_denoise_window_validation():
    with pytest.raises(bl.InvalidWindow):
        bl.denoise(np.zeros((4, 4)), 4)
    with pytest.raises(bl.InvalidWindow):
        bl.SegParams(noise_window=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_denoise_stays_in_input_range(seed):
    r = np.random.default_rng(seed)
    lo, hi = sorted(r.integers(0, 256, size=2))
    img = r.integers(lo, hi + 1, size=(10, 13)).astype(np.uint8)
    out = bl.denoise(img, 5)
    assert out.min() >= img.min() and out.max() <= img.max()


# ---------------------------------------------------------------------------
# binarize and components

def test_binarize_edges(rng):
    img = rng.integers(0, 256, size=(20, 20)).astype(np.uint8)
    assert not bl.binarize_below(img, 0).any()
    assert bl.binarize_below(img, 256).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 255), st.integers(0, 255))
def test_binarize_monotone(seed, a, b):
    img = np.random.default_rng(seed).integers(0, 256, size=(16, 16))
    lo, hi = min(a, b), max(a, b)
    assert not (bl.binarize_below(img, lo) & ~bl.binarize_below(img, hi)).any()


def test_components_diagonal_and_checkerboard():
    m = np.zeros((3, 3), bool)
    m[0, 0] = m[1, 1] = True
    assert len(bl.label_components(m)) == 1
    board = (np.indices((4, 4)).sum(axis=0) % 2 == 0)
    regs = bl.label_components(board)
    assert len(regs) == 1 and regs[0].area == 8
    assert bl.label_components(np.zeros((5, 5), bool)) == []


def test_components_order():
    m = np.zeros((6, 6), bool)
    m[4, 0] = True
    m[0, 5] = True
    m[0, 2] = True
    regs = bl.label_components(m)
    assert [(int(r.rows[0]), int(r.cols[0])) for r in regs] == [(0, 2), (0, 5), (4, 0)]


# ---------------------------------------------------------------------------
# solidity

def test_solidity_rectangle():
    assert bl.solidity(np.ones((10, 15), bool)) == 1.0


def test_solidity_plus_and_triomino_match_oracle():
    plus = [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)]
    tri = [(0, 0), (1, 0), (1, 1)]
    for shape in (plus, tri):
        assert bl.solidity(np.array(shape)) == pytest.approx(solidity_oracle(shape), abs=1e-12)
    # the hulls of these pixel centers contain no extra pixel centers
    assert bl.solidity(np.array(tri)) == 1.0


def test_solidity_concave_shapes():
    u = np.ones((5, 5), bool)
    u[0:4, 2] = False
    assert bl.solidity(u) == pytest.approx(21 / 25)
    line = np.array([(0, 0), (1, 1), (2, 2), (3, 3)])
    assert bl.solidity(line) == 1.0
    assert bl.solidity(np.array([(0, 0), (2, 2)])) == pytest.approx(2 / 3)


def test_solidity_empty():
    with pytest.raises(bl.EmptyRegion):
        bl.solidity(np.zeros((3, 3), bool))


def test_solidity_random_blobs_sample(rng):
    for _ in range(100):
        blob = random_blob(rng)
        assert abs(bl.solidity(blob) - solidity_oracle(blob)) < 1e-9


# ---------------------------------------------------------------------------
# segmentation

def test_blank_image():
    assert bl.iterative_segment(np.full((60, 60), 255, np.uint8)) == []


def test_single_disk():
    img = np.full((80, 80), 255, np.uint8)
    img[_disk(img.shape, 40, 40, 12)] = 40
    regs = bl.iterative_segment(img)
    assert len(regs) == 1
    r = regs[0]
    assert r.mask()[40, 40] and r.solidity > 0.9
    assert abs(r.centroid[0] - 40) < 0.5 and abs(r.centroid[1] - 40) < 0.5


def test_bridge_does_not_merge_disks():
    img = np.full((60, 100), 255, np.uint8)
    img[_disk(img.shape, 30, 30, 10)] = 40
    img[_disk(img.shape, 70, 30, 10)] = 40
    img[29:32, 38:63] = 100  # faint bridge, below the top threshold after smoothing
    params = bl.SegParams()
    smooth = bl.denoise(img, params.noise_window)
    top = bl.label_components(bl.binarize_below(smooth, params.threshold_schedule[-1]))
    assert len(top) == 1  # the bridge does connect the disks at the last level
    regs = bl.iterative_segment(img, params)
    assert len(regs) == 2
    centers = sorted(round(r.centroid[0]) for r in regs)
    assert centers == [30, 70]
    merged = top[0].solidity
    assert all(merged < r.solidity for r in regs)


def test_merge_accepted_when_more_solid():
    # two halves of a disk separated by a lighter seam: the union is more solid than either half
    img = np.full((60, 60), 255, np.uint8)
    d = _disk(img.shape, 30, 30, 12)
    img[d] = 30
    img[d & (np.abs(np.arange(60) - 30) <= 0)[None, :]] = 100
    regs = bl.iterative_segment(img)
    assert len(regs) == 1 and regs[0].mask()[30, 30]


def test_final_filter_and_disjointness(synthetic_gt):
    params = bl.SegParams()
    for frame in synthetic_gt:
        regs = bl.iterative_segment(frame.image, params)
        cover = np.zeros(frame.image.shape, int)
        for r in regs:
            assert r.area >= params.min_size and r.solidity >= params.min_solidity
            assert params.min_avg_intensity <= r.mean_intensity <= params.max_avg_intensity
            cover.flat[r.index] += 1
        assert cover.max() <= 1


def test_remove_boundary_regions():
    shape = (20, 30)
    left = bl.label_components(_disk(shape, 0, 10, 3))[0]
    inner = bl.label_components(_disk(shape, 15, 10, 3))[0]
    bottom = bl.label_components(_disk(shape, 25, 19, 2))[0]
    assert bl.remove_boundary_regions([left, inner, bottom], 30, 20) == [inner]
    assert bl.remove_boundary_regions([inner], 30, 20) == [inner]
    assert bl.touches_boundary(left) and not bl.touches_boundary(inner)


def test_label_image_and_rows():
    shape = (20, 20)
    regs = bl.label_components(_disk(shape, 5, 5, 2) | _disk(shape, 14, 14, 3))
    lab = bl.label_image(regs, shape)
    assert lab.dtype == np.uint16 and set(np.unique(lab)) == {0, 1, 2}
    rows = list(bl.regions_csv_rows("frame000", regs))
    assert [r[1] for r in rows] == [1, 2] and rows[0][4] == regs[0].area


# ---------------------------------------------------------------------------
# grid search

def test_params_validation():
    with pytest.raises(ValueError):
        bl.SegParams(min_avg_intensity=130, max_avg_intensity=120)
    with pytest.raises(ValueError):
        bl.SegParams(threshold_schedule=(10, 10, 20))
    with pytest.raises(ValueError):
        bl.SegParams(min_solidity=0)


def test_expand_grid():
    pts = bl.expand_grid({"min_avg_intensity": [0, 200], "max_avg_intensity": [100, 120]})
    assert [(p.min_avg_intensity, p.max_avg_intensity) for p in pts] == [(0, 100), (0, 120)]
    with pytest.raises(bl.EmptyGrid):
        bl.expand_grid({"min_size": []})
    with pytest.raises(bl.EmptyGrid):
        bl.expand_grid({"min_avg_intensity": [200], "max_avg_intensity": [100]})
    with pytest.raises(ValueError):
        bl.expand_grid({"bogus": [1]})


def _row(f, **kw):
    return bl.GridRow(bl.SegParams(**kw), f, f, f)


def test_select_best_toy():
    rows = [_row(0.70, min_size=100), _row(0.82, min_size=200), _row(0.82, min_size=150)]
    assert bl.select_best(rows).params.min_size == 150
    for perm in ([2, 1, 0], [1, 0, 2], [0, 2, 1]):
        assert bl.select_best([rows[i] for i in perm]).params.min_size == 150
    with pytest.raises(bl.EmptyGrid):
        bl.select_best([])


def _direct_f(frames, params):
    per = []
    for f in frames:
        regs = bl.segment(f.image, params)
        per.append((f.frame_id, ev.match_masks([r.mask() for r in regs], f.points)))
    return ev.aggregate(per).f


def test_singleton_grid(synthetic_gt):
    frames = synthetic_gt.frames[:2]
    res = bl.grid_search(frames, {"min_size": [150]})
    assert res.best == bl.SegParams()
    assert res.best_f == pytest.approx(_direct_f(frames, res.best))


def test_grid_exhaustive_rescore(synthetic_gt):
    frames = synthetic_gt.frames[:3]
    grid = {"min_size": [100, 400], "min_avg_intensity": [0, 60],
            "max_avg_intensity": [60, 120], "min_solidity": [0.8, 0.95]}
    res = bl.grid_search(frames, grid)
    assert len(res.rows) == 12  # (60, 60) is not a valid band
    for row in res.rows:
        assert row.f == pytest.approx(_direct_f(frames, row.params), abs=1e-12)
    assert res.best_f == max(r.f for r in res.rows)
    assert res.best == bl.select_best(res.rows).params


def test_grid_dominant_point(synthetic_gt):
    frames = synthetic_gt.frames[:2]
    res = bl.grid_search(frames, {"min_size": [150, 50000]})
    assert res.best.min_size == 150
    fs = {r.params.min_size: r.f for r in res.rows}
    assert fs[150] > fs[50000] == 0


def test_grid_parallel_matches_serial(synthetic_gt):
    frames = synthetic_gt.frames[:2]
    grid = {"min_size": [100, 200], "min_solidity": [0.85, 0.9]}
    a = bl.grid_search(frames, grid, workers=1)
    b = bl.grid_search(frames, grid, workers=2)
    assert a.to_csv() == b.to_csv()


def test_grid_csv_header(synthetic_gt):
    res = bl.grid_search(synthetic_gt.frames[:1], {"min_size": [150]})
    lines = res.to_csv().splitlines()
    assert lines[0].split(",") == [*bl.PARAM_FIELDS, "precision", "recall", "f"]
    assert len(lines) == 2


def test_growth_independent_of_final_only_fields(synthetic_gt):
    img = synthetic_gt.frames[0].image
    base = bl.SegParams()
    for name in bl.FINAL_ONLY:
        other = dataclasses.replace(base, **{name: 1 if name == "min_size" else 0})
        smooth = bl.denoise(img, base.noise_window)
        a = [tuple(r.index) for r in bl._grow(smooth, img, base)]
        b = [tuple(r.index) for r in bl._grow(smooth, img, other)]
        assert a == b
