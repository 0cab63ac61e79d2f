"""Iterative-thresholding nucleus segmentation and its grid-search trainer.

Nuclei are dark on a light background.  The image is smoothed with an adaptive
local-statistics filter, then binarized at a ladder of increasing thresholds.
Small dark seeds appear at the first levels and grow with every level for as
long as the grown region stays solid and dark enough; touching regions merge
only if the union is more solid than each part.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import evaluation

EIGHT = np.ones((3, 3), dtype=bool)


class InvalidWindow(ValueError):
    pass


class EmptyRegion(ValueError):
    pass


class EmptyGrid(ValueError):
    pass


@dataclass(frozen=True)
class SegParams:
    min_size: int = 150
    min_avg_intensity: float = 10
    max_avg_intensity: float = 120
    min_solidity: float = 0.88
    threshold_schedule: tuple[int, ...] = tuple(range(10, 141, 10))
    seed_min_size: int = 15
    noise_window: int = 5

    def __post_init__(self):
        object.__setattr__(self, "threshold_schedule", tuple(int(t) for t in self.threshold_schedule))
        if not self.min_avg_intensity < self.max_avg_intensity:
            raise ValueError("min_avg_intensity must be below max_avg_intensity")
        if not 0 < self.min_solidity <= 1:
            raise ValueError("min_solidity must lie in (0, 1]")
        ts = self.threshold_schedule
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 0 or ts[-1] > 255:
            raise ValueError("threshold_schedule must be strictly increasing within [0, 255]")
        if self.min_size < 1 or self.seed_min_size < 1:
            raise ValueError("sizes must be positive")
        if self.noise_window < 3 or self.noise_window % 2 == 0:
            raise InvalidWindow(f"noise window must be odd and >= 3, got {self.noise_window}")

    def as_tuple(self) -> tuple:
        return dataclasses.astuple(self)


PARAM_FIELDS = [f.name for f in dataclasses.fields(SegParams)]
# Parameters that act only in the final filter and never steer region growth.
FINAL_ONLY = ("min_size", "min_avg_intensity")

DEFAULT_GRID = {
    "min_size": [50, 100, 150, 200, 250, 300],
    "min_avg_intensity": [0, 10, 20, 30],
    "max_avg_intensity": [100, 120, 140, 160],
    "min_solidity": [0.80, 0.82, 0.84, 0.86, 0.88, 0.90, 0.92, 0.94],
}


@dataclass
class Region:
    """8-connected pixel set; ``index`` holds sorted flat (row-major) pixel indices."""

    index: np.ndarray
    shape: tuple[int, int]
    area: int
    mean_intensity: float
    solidity: float

    @property
    def rows(self) -> np.ndarray:
        return self.index // self.shape[1]

    @property
    def cols(self) -> np.ndarray:
        return self.index % self.shape[1]

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) of the pixel mean."""
        return float(self.cols.mean()), float(self.rows.mean())

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m.flat[self.index] = True
        return m


# ---------------------------------------------------------------------------
# pixel kernels

def denoise(img: np.ndarray, window: int = 5) -> np.ndarray:
    """Adaptive local-statistics (Wiener-type) smoothing.

    Each pixel is pulled toward its window mean by the fraction of local
    variance not explained by the noise variance, which is estimated as the
    average local variance over the image.  Borders replicate edge pixels.
    """
    if window < 3 or window % 2 == 0:
        raise InvalidWindow(f"window must be odd and >= 3, got {window}")
    x = np.asarray(img, dtype=np.float64)
    mu = ndimage.uniform_filter(x, window, mode="nearest")
    var = np.maximum(ndimage.uniform_filter(x * x, window, mode="nearest") - mu * mu, 0.0)
    noise = var.mean()
    gain = np.maximum(var - noise, 0.0) / np.maximum(var, max(noise, np.finfo(float).tiny))
    out = np.floor(mu + gain * (x - mu) + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def binarize_below(img: np.ndarray, t: int) -> np.ndarray:
    return np.asarray(img) < t


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull of integer (x, y) points, collinear points dropped (monotone chain)."""
    pts = np.unique(np.asarray(points, dtype=np.int64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def half(seq):
        chain: list = []
        for p in seq:
            while len(chain) >= 2:
                (ax, ay), (bx, by) = chain[-2], chain[-1]
                if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) > 0:
                    break
                chain.pop()
            chain.append((int(p[0]), int(p[1])))
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=np.int64)


def hull_lattice_count(hull: np.ndarray) -> int:
    """Number of integer points inside or on a convex polygon with integer vertices."""
    n = len(hull)
    if n == 0:
        return 0
    if n == 1:
        return 1
    if n == 2:
        dx, dy = np.abs(hull[1] - hull[0])
        return int(math.gcd(int(dx), int(dy)) + 1)
    a = hull
    b = np.roll(hull, -1, axis=0)
    dx = (b[:, 0] - a[:, 0])[None, :]
    dy = (b[:, 1] - a[:, 1])[None, :]
    ys = np.arange(hull[:, 1].min(), hull[:, 1].max() + 1, dtype=np.int64)[:, None]
    # inside-or-on for a CCW polygon: dx*(y - ay) - dy*(x - ax) >= 0, i.e. dy*x <= c
    c = dx * (ys - a[None, :, 1]) + dy * a[None, :, 0]
    big = np.iinfo(np.int64).max // 4
    safe_dy = np.where(dy == 0, 1, dy)
    upper = np.where(dy > 0, c // safe_dy, big)
    lower = np.where(dy < 0, -(-c // safe_dy), -big)
    flat_ok = np.where(dy == 0, dx * (ys - a[None, :, 1]) >= 0, True).all(axis=1)
    hi = upper.min(axis=1)
    lo = lower.max(axis=1)
    return int(np.where(flat_ok, np.maximum(hi - lo + 1, 0), 0).sum())


def _row_extremes(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Leftmost and rightmost pixel of every row: enough to span the hull."""
    order = np.lexsort((cols, rows))
    r, c = rows[order], cols[order]
    first = np.r_[True, r[1:] != r[:-1]]
    last = np.r_[r[1:] != r[:-1], True]
    keep = first | last
    return np.stack([c[keep], r[keep]], axis=1)


def solidity(pixels) -> float:
    """Area over the number of pixels whose centers fall inside or on the convex hull.

    ``pixels`` is a boolean mask, a :class:`Region`, or an ``(N, 2)`` array of
    ``(row, col)`` coordinates.
    """
    if isinstance(pixels, Region):
        rows, cols = pixels.rows, pixels.cols
    else:
        arr = np.asarray(pixels)
        if arr.dtype == bool:
            rows, cols = np.nonzero(arr)
        else:
            arr = arr.astype(np.int64).reshape(-1, 2)
            arr = np.unique(arr, axis=0)
            rows, cols = arr[:, 0], arr[:, 1]
    if len(rows) == 0:
        raise EmptyRegion("solidity of an empty region")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    hull = convex_hull(_row_extremes(rows, cols))
    return len(rows) / hull_lattice_count(hull)


def _make_region(index: np.ndarray, shape, image) -> Region:
    mean = float(image.flat[index].mean()) if image is not None else float("nan")
    rows, cols = index // shape[1], index % shape[1]
    sol = len(index) / hull_lattice_count(convex_hull(_row_extremes(rows, cols)))
    return Region(index, tuple(shape), len(index), mean, sol)


def _component_index(labels: np.ndarray, k: int, sl) -> np.ndarray:
    rr, cc = np.nonzero(labels[sl] == k)
    return (rr + sl[0].start) * labels.shape[1] + (cc + sl[1].start)


def label_components(mask: np.ndarray, image: np.ndarray | None = None) -> list[Region]:
    """8-connected components ordered by their top-most, then left-most pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT)
    objects = ndimage.find_objects(labels)
    regions = [_make_region(_component_index(labels, k, sl), mask.shape, image)
               for k, sl in enumerate(objects, start=1)]
    # scipy numbers components in raster order of their first pixel already
    regions.sort(key=lambda r: r.index[0])
    return regions


# ---------------------------------------------------------------------------
# segmentation

class _Track:
    __slots__ = ("region", "frozen")

    def __init__(self, region: Region):
        self.region = region
        self.frozen = False


def _grow(smooth: np.ndarray, image: np.ndarray, params: SegParams) -> list[Region]:
    """Run the threshold ladder and return every carried region, unfiltered."""
    shape = smooth.shape
    tracks: list[_Track] = []
    for t in params.threshold_schedule:
        labels, n = ndimage.label(smooth < t, structure=EIGHT)
        if n == 0:
            continue
        flat = labels.ravel()
        areas = np.bincount(flat, minlength=n + 1)
        objects = ndimage.find_objects(labels)
        groups: dict[int, list[_Track]] = {}
        for tr in tracks:
            groups.setdefault(int(flat[tr.region.index[0]]), []).append(tr)

        next_tracks: list[_Track] = []
        for k, members in groups.items():
            active = [tr for tr in members if not tr.frozen]
            if not active or (len(members) == 1 and areas[k] == members[0].region.area):
                next_tracks.extend(members)
                continue
            cand = _make_region(_component_index(labels, k, objects[k - 1]), shape, image)
            fits = cand.solidity >= params.min_solidity and cand.mean_intensity <= params.max_avg_intensity
            if len(members) > 1:
                fits = fits and cand.solidity > max(tr.region.solidity for tr in members)
            if fits:
                next_tracks.append(_Track(cand))
            else:
                for tr in members:
                    tr.frozen = True
                next_tracks.extend(members)

        seeds = np.flatnonzero(areas >= params.seed_min_size)
        for k in seeds:
            if k == 0 or int(k) in groups:
                continue
            next_tracks.append(_Track(_make_region(_component_index(labels, k, objects[k - 1]), shape, image)))
        tracks = next_tracks
    regions = [tr.region for tr in tracks]
    regions.sort(key=lambda r: r.index[0])
    return regions


def _passes(r: Region, params: SegParams) -> bool:
    return (r.area >= params.min_size and r.solidity >= params.min_solidity
            and params.min_avg_intensity <= r.mean_intensity <= params.max_avg_intensity)


def iterative_segment(img: np.ndarray, params: SegParams = SegParams()) -> list[Region]:
    """Segment dark nuclei; returns pairwise-disjoint regions meeting all constraints."""
    img = np.asarray(img, dtype=np.uint8)
    smooth = denoise(img, params.noise_window)
    return [r for r in _grow(smooth, img, params) if _passes(r, params)]


def touches_boundary(r: Region) -> bool:
    h, w = r.shape
    rows, cols = r.rows, r.cols
    return bool((rows == 0).any() or (rows == h - 1).any() or (cols == 0).any() or (cols == w - 1).any())


def remove_boundary_regions(regions: Iterable[Region], width: int, height: int) -> list[Region]:
    out = []
    for r in regions:
        rows, cols = r.rows, r.cols
        if (rows == 0).any() or (rows == height - 1).any() or (cols == 0).any() or (cols == width - 1).any():
            continue
        out.append(r)
    return out


def segment(img: np.ndarray, params: SegParams = SegParams()) -> list[Region]:
    """Full baseline pipeline: iterative segmentation, then boundary removal."""
    img = np.asarray(img)
    return remove_boundary_regions(iterative_segment(img, params), img.shape[1], img.shape[0])


def label_image(regions: Sequence[Region], shape) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.uint16)
    for i, r in enumerate(regions, start=1):
        labels.flat[r.index] = i
    return labels


def regions_csv_rows(frame_id: str, regions: Sequence[Region]):
    for i, r in enumerate(regions, start=1):
        cx, cy = r.centroid
        yield [frame_id, i, f"{cx:.3f}", f"{cy:.3f}", r.area, f"{r.solidity:.6f}", f"{r.mean_intensity:.3f}"]


REGION_FIELDS = ["frame_id", "region_id", "centroid_x", "centroid_y", "area", "solidity", "mean_intensity"]


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridRow:
    params: SegParams
    precision: float
    recall: float
    f: float


@dataclass
class GridResult:
    best: SegParams
    best_f: float
    rows: list[GridRow]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow([*PARAM_FIELDS, "precision", "recall", "f"])
        for row in self.rows:
            values = [(" ".join(map(str, v)) if isinstance(v, tuple) else v) for v in row.params.as_tuple()]
            w.writerow([*values, f"{row.precision:.6f}", f"{row.recall:.6f}", f"{row.f:.6f}"])
        return out.getvalue()


def expand_grid(grid: Mapping[str, Sequence], base: SegParams = SegParams()) -> list[SegParams]:
    unknown = set(grid) - set(PARAM_FIELDS)
    if unknown:
        raise ValueError(f"unknown grid parameters: {sorted(unknown)}")
    names = [n for n in PARAM_FIELDS if n in grid]
    if not names or any(len(grid[n]) == 0 for n in names):
        raise EmptyGrid("grid has no points")
    points = []
    for values in itertools.product(*(grid[n] for n in names)):
        try:
            points.append(dataclasses.replace(base, **dict(zip(names, values))))
        except ValueError:
            continue  # e.g. min_avg >= max_avg
    if not points:
        raise EmptyGrid("no valid parameter combination in grid")
    return points


def select_best(rows: Sequence[GridRow]) -> GridRow:
    """Highest F; ties go to the lexicographically smallest parameter tuple."""
    if not rows:
        raise EmptyGrid("nothing to select from")
    return min(rows, key=lambda r: (-r.f, r.params.as_tuple()))


def _growth_key(p: SegParams) -> SegParams:
    return dataclasses.replace(p, min_size=1, min_avg_intensity=-1.0)


def _frame_candidates(args):
    """Grown candidates for one frame under several growth settings, with their gt membership."""
    image, points, growth_params = args
    h, w = image.shape
    smooth_cache: dict[int, np.ndarray] = {}
    out = []
    for gp in growth_params:
        if gp.noise_window not in smooth_cache:
            smooth_cache[gp.noise_window] = denoise(image, gp.noise_window)
        regions = _grow(smooth_cache[gp.noise_window], image, gp)
        labels = label_image(regions, (h, w)) if regions else np.zeros((h, w), dtype=np.uint16)
        hit = labels[points[:, 1], points[:, 0]] if len(points) else np.zeros(0, dtype=np.uint16)
        members = [(int(v) - 1, k) for k, v in enumerate(hit) if v > 0]
        summary = [(r.area, r.solidity, r.mean_intensity, touches_boundary(r)) for r in regions]
        out.append((summary, members))
    return out


def grid_search(frames, grid: Mapping[str, Sequence] = DEFAULT_GRID, base: SegParams = SegParams(),
                workers: int = 1) -> GridResult:
    """Score every grid point on ``frames`` by macro F and return the best one.

    Region growth depends neither on ``min_size`` nor on ``min_avg_intensity``,
    so frames are grown once per remaining setting and the final filter is
    replayed for every value of those two.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no training frames")
    points = expand_grid(grid, base)
    growth = sorted({_growth_key(p) for p in points}, key=SegParams.as_tuple)
    gindex = {g: i for i, g in enumerate(growth)}
    jobs = [(np.asarray(f.image), np.asarray(f.points), growth) for f in frames]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cands = list(ex.map(_frame_candidates, jobs))
    else:
        cands = [_frame_candidates(j) for j in jobs]

    rows = []
    for p in points:
        gi = gindex[_growth_key(p)]
        per_frame = []
        for f, fc in zip(frames, cands):
            summary, members = fc[gi]
            keep = [i for i, (area, sol, mean, edge) in enumerate(summary)
                    if not edge and area >= p.min_size and sol >= p.min_solidity
                    and p.min_avg_intensity <= mean <= p.max_avg_intensity]
            remap = {old: new for new, old in enumerate(keep)}
            kept_members = [(remap[r], k) for r, k in members if r in remap]
            per_frame.append((f.frame_id, evaluation.match_membership(len(keep), len(f.points), kept_members)))
        rep = evaluation.aggregate(per_frame)
        rows.append(GridRow(p, rep.precision, rep.recall, rep.f))
    rows.sort(key=lambda r: r.params.as_tuple())
    best = select_best(rows)
    return GridResult(best.params, best.f, rows)
