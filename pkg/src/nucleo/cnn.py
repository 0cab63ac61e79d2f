"""Patch-classifier nucleus detector written directly in numpy.

Network: conv 5x5 (6) -> max-pool 2x2 -> conv 5x5 (12) -> max-pool 2x2 ->
dense 2700->128 + ReLU -> dense 128->2 -> softmax.  On 75x75 patches the
spatial sizes run 75 -> 71 -> 35 -> 31 -> 15.

Training is plain mini-batch gradient descent on the mean cross-entropy, in
double precision.  Inference slides the network over a frame at a small
stride, writes the nucleus probability at each patch center (the hit map),
then dilates, thresholds and labels the hit map to get detected points.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .evaluation import DetectionSet

PATCH = 75
TRAIN_STRIDE = 15
INFER_STRIDE = 3
POS_RADIUS = 15.0
LAYERS = ("conv1", "conv2", "fc1", "out")
FORMAT_VERSION = 1
EIGHT = np.ones((3, 3), dtype=bool)


class ShapeMismatch(ValueError):
    pass


class FrameTooSmall(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class CnnModel:
    """Weights keyed ``<layer>_w`` / ``<layer>_b``; ``input_mean`` is subtracted from [0, 1] pixels."""

    params: dict[str, np.ndarray]
    input_size: int = PATCH
    input_mean: float = 0.0

    def __post_init__(self):
        c1, c2 = self.params["conv1_w"], self.params["conv2_w"]
        if c1.shape[1] != 1 or c2.shape[1] != c1.shape[0]:
            raise ShapeMismatch("conv channel counts do not chain")
        s = self.input_size
        s = (s - c1.shape[2] + 1) // 2
        s = (s - c2.shape[2] + 1) // 2
        if s < 1:
            raise ShapeMismatch("input too small for this stack")
        flat = c2.shape[0] * s * s
        if self.params["fc1_w"].shape[0] != flat:
            raise ShapeMismatch(f"fc1 expects {self.params['fc1_w'].shape[0]} inputs, stack yields {flat}")
        if self.params["out_w"].shape != (self.params["fc1_w"].shape[1], 2):
            raise ShapeMismatch("output layer must map the hidden layer to 2 classes")
        if self.input_size == PATCH and (c1.shape[2], c2.shape[2]) == (5, 5):
            assert self.feature_sizes() == [75, 71, 35, 31, 15]

    def feature_sizes(self) -> list[int]:
        s = [self.input_size]
        s.append(s[-1] - self.params["conv1_w"].shape[2] + 1)
        s.append(s[-1] // 2)
        s.append(s[-1] - self.params["conv2_w"].shape[2] + 1)
        s.append(s[-1] // 2)
        return s

    def copy(self) -> "CnnModel":
        return CnnModel({k: v.copy() for k, v in self.params.items()}, self.input_size, self.input_mean)

    def astype(self, dtype) -> "CnnModel":
        return CnnModel({k: v.astype(dtype) for k, v in self.params.items()}, self.input_size, self.input_mean)


def init_model(seed: int = 0, input_size: int = PATCH, conv1: int = 6, conv2: int = 12,
               kernel: int = 5, hidden: int = 128, input_mean: float = 0.0) -> CnnModel:
    """Fan-in scaled uniform weights in +/- sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    s = ((input_size - kernel + 1) // 2 - kernel + 1) // 2
    shapes = {
        "conv1_w": (conv1, 1, kernel, kernel),
        "conv2_w": (conv2, conv1, kernel, kernel),
        "fc1_w": (conv2 * s * s, hidden),
        "out_w": (hidden, 2),
    }
    params = {}
    for layer in LAYERS:
        shape = shapes[f"{layer}_w"]
        fan_in = int(np.prod(shape[1:])) if layer.startswith("conv") else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[f"{layer}_w"] = rng.uniform(-bound, bound, size=shape)
        params[f"{layer}_b"] = np.zeros(shape[0] if layer.startswith("conv") else shape[1])
    return CnnModel(params, input_size, input_mean)


def zero_model(**kw) -> CnnModel:
    m = init_model(**kw)
    return CnnModel({k: np.zeros_like(v) for k, v in m.params.items()}, m.input_size, m.input_mean)


# ---------------------------------------------------------------------------
# layers (activations are channels-last: B, H, W, C)

def _wmat(w):
    """(F, C, k, k) kernel as a (C*k*k, F) matrix matching the im2col column order."""
    return w.reshape(w.shape[0], -1).T


def _conv(x, w, b):
    bsz, h, wd, c = x.shape
    k = w.shape[2]
    ho, wo = h - k + 1, wd - k + 1
    cols = sliding_window_view(x, (k, k), axis=(1, 2)).reshape(bsz * ho * wo, c * k * k)
    out = cols @ _wmat(w) + b
    return out.reshape(bsz, ho, wo, -1), cols


def _conv_back(dout, cols, w, x_shape, need_dx):
    f = w.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).T.reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    bsz, ho, wo, _ = dout.shape
    c, k = w.shape[1], w.shape[2]
    dcols = (d2 @ _wmat(w).T).reshape(bsz, ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
    return dx, dw, db


def _pool_parts(x):
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    return [x[:, dy:2 * h2:2, dx:2 * w2:2] for dy in (0, 1) for dx in (0, 1)]


def _pool(x):
    """2x2 max-pool, stride 2; a trailing odd row/column is dropped."""
    parts = _pool_parts(x)
    return np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))


def _pool_back(dout, x, out):
    """Route each pooled gradient to the first maximal element of its window."""
    dx = np.zeros(x.shape, dtype=dout.dtype)
    h2, w2 = out.shape[1], out.shape[2]
    taken = np.zeros(out.shape, dtype=bool)
    for dy, dxo in ((0, 0), (0, 1), (1, 0), (1, 1)):
        win = x[:, dy:2 * h2:2, dxo:2 * w2:2] == out
        win &= ~taken
        taken |= win
        dx[:, dy:2 * h2:2, dxo:2 * w2:2] = np.where(win, dout, 0.0)
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _head(model, p2):
    """Flatten (channel, row, col) and apply the two dense layers."""
    p = model.params
    flat = p2.transpose(0, 3, 1, 2).reshape(len(p2), -1)
    h_pre = flat @ p["fc1_w"] + p["fc1_b"]
    h = np.maximum(h_pre, 0)
    return flat, h_pre, h, h @ p["out_w"] + p["out_b"]


def _forward(model: CnnModel, x, keep=False):
    p = model.params
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (model.input_size, model.input_size):
        raise ShapeMismatch(f"expected {model.input_size}x{model.input_size} patches, got {x.shape[1:]}")
    x = x[..., None]
    c1, cols1 = _conv(x, p["conv1_w"], p["conv1_b"])
    p1 = _pool(c1)
    c2, cols2 = _conv(p1, p["conv2_w"], p["conv2_b"])
    p2 = _pool(c2)
    flat, h_pre, h, logits = _head(model, p2)
    probs = _softmax(logits)
    if not keep:
        return probs
    cache = dict(x=x, cols1=cols1, c1=c1, p1=p1, cols2=cols2, c2=c2, p2=p2,
                 flat=flat, h_pre=h_pre, h=h)
    return probs, cache


def predict_proba(model: CnnModel, patches: np.ndarray) -> np.ndarray:
    """Class probabilities ``(B, 2)`` (negative, positive) for normalized patches ``(B, S, S)``."""
    return _forward(model, np.asarray(patches, dtype=next(iter(model.params.values())).dtype))


def forward(model: CnnModel, patch: np.ndarray) -> tuple[float, float]:
    probs = predict_proba(model, np.asarray(patch)[None])[0]
    return float(probs[0]), float(probs[1])


def loss_and_grads(model: CnnModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    loss, g, _ = _loss_grads_probs(model, x, y)
    return loss, g


def _loss_grads_probs(model, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    p = model.params
    probs, c = _forward(model, x, keep=True)
    n = len(x)
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), y], np.finfo(float).tiny)))
    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    g = {"out_w": c["h"].T @ dz, "out_b": dz.sum(axis=0)}
    dh = (dz @ p["out_w"].T) * (c["h_pre"] > 0)
    g["fc1_w"] = c["flat"].T @ dh
    g["fc1_b"] = dh.sum(axis=0)
    dp2 = (dh @ p["fc1_w"].T).reshape(c["p2"].shape[0], c["p2"].shape[3], *c["p2"].shape[1:3])
    dp2 = dp2.transpose(0, 2, 3, 1)
    dc2 = _pool_back(dp2, c["c2"], c["p2"])
    dp1, g["conv2_w"], g["conv2_b"] = _conv_back(dc2, c["cols2"], p["conv2_w"], c["p1"].shape, True)
    dc1 = _pool_back(dp1, c["c1"], c["p1"])
    _, g["conv1_w"], g["conv1_b"] = _conv_back(dc1, c["cols1"], p["conv1_w"], c["x"].shape, False)
    return float(loss), g, probs


def train_step(model: CnnModel, x: np.ndarray, y: np.ndarray, lr: float = 0.001):
    """One gradient-descent step; returns the updated model and the batch loss before the step."""
    model, loss, _ = _step(model, x, y, lr)
    return model, loss


def _step(model, x, y, lr):
    loss, g, probs = _loss_grads_probs(model, x, y)
    if not np.isfinite(loss) or not all(np.isfinite(v).all() for v in g.values()):
        raise NonFiniteLoss(f"loss became {loss}")
    params = {k: v - lr * g[k] for k, v in model.params.items()}
    return CnnModel(params, model.input_size, model.input_mean), loss, probs


# ---------------------------------------------------------------------------
# patches

@dataclass
class PatchSet:
    """Patch centers over one or more frames; pixels are cut out on demand."""

    images: list[np.ndarray]
    frame_ids: list[str]
    source: np.ndarray  # index into images, per patch
    centers: np.ndarray  # (N, 2) x, y
    labels: np.ndarray  # 1 = nucleus
    patch_size: int = PATCH
    mean: float = field(default=0.0)

    def __len__(self):
        return len(self.labels)

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def batch(self, idx) -> np.ndarray:
        """Patches ``idx`` scaled to [0, 1] with the set mean removed."""
        idx = np.asarray(idx)
        half = self.patch_size // 2
        out = np.empty((len(idx), self.patch_size, self.patch_size))
        for n, i in enumerate(idx):
            x, y = self.centers[i]
            img = self.images[self.source[i]]
            out[n] = img[y - half:y + half + 1, x - half:x + half + 1]
        return out / 255.0 - self.mean

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(self.images, self.frame_ids, self.source[idx], self.centers[idx],
                        self.labels[idx], self.patch_size, self.mean)


def grid_centers(width: int, height: int, stride: int, patch: int = PATCH) -> np.ndarray:
    """Centers (x, y) on the stride grid whose full window fits inside the frame, row-major."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if width < patch or height < patch:
        raise FrameTooSmall(f"frame {width}x{height} smaller than patch {patch}")
    half = patch // 2
    xs = np.arange(half, width - (patch - half) + 1, stride)
    ys = np.arange(half, height - (patch - half) + 1, stride)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def patch_labels(centers: np.ndarray, points: np.ndarray, radius: float = POS_RADIUS) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(len(centers), dtype=np.int8)
    d2 = ((centers[:, None, :].astype(np.float64) - pts[None]) ** 2).sum(axis=2)
    return (d2.min(axis=1) <= radius * radius).astype(np.int8)


def _patch_pixel_sum(img: np.ndarray, centers: np.ndarray, patch: int) -> float:
    integral = np.pad(img.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    half = patch // 2
    x0, y0 = centers[:, 0] - half, centers[:, 1] - half
    x1, y1 = x0 + patch, y0 + patch
    return float((integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]).sum())


def extract_patches(frames, stride: int = TRAIN_STRIDE, patch: int = PATCH,
                    pos_radius: float = POS_RADIUS, with_pixels: bool = True) -> PatchSet:
    """Sample patches on a regular grid and label them by distance to the nearest marked point.

    ``frames`` is one frame record or an iterable of them.  The set mean is
    the average [0, 1] intensity over every sampled patch pixel.  With
    ``with_pixels=False`` frame images are not loaded (counts and labels only).
    """
    if hasattr(frames, "frame_id"):
        frames = [frames]
    images, ids, source, centers, labels = [], [], [], [], []
    total = 0.0
    for i, f in enumerate(frames):
        c = grid_centers(f.width, f.height, stride, patch)
        ids.append(f.frame_id)
        source.append(np.full(len(c), i))
        centers.append(c)
        labels.append(patch_labels(c, f.points, pos_radius))
        if with_pixels:
            img = np.asarray(f.image)
            images.append(img)
            total += _patch_pixel_sum(img, c, patch)
        else:
            images.append(None)
    if not centers:
        return PatchSet([], [], np.zeros(0, int), np.zeros((0, 2), int), np.zeros(0, np.int8), patch)
    centers = np.concatenate(centers)
    mean = total / (255.0 * len(centers) * patch * patch) if with_pixels else 0.0
    return PatchSet(images, ids, np.concatenate(source), centers, np.concatenate(labels), patch, mean)


def balanced_subset(ps: PatchSet, n: int, seed: int = 0) -> PatchSet:
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(ps.labels == 1)
    neg = np.flatnonzero(ps.labels == 0)
    k = n // 2
    if len(pos) < k or len(neg) < n - k:
        raise ValueError("not enough patches of each class")
    idx = np.concatenate([rng.choice(pos, k, replace=False), rng.choice(neg, n - k, replace=False)])
    return ps.subset(np.sort(idx))


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


def _epoch_order(rng, labels, oversample):
    if not oversample:
        return rng.permutation(len(labels))
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    reps = max(1, len(neg) // max(len(pos), 1))
    return rng.permutation(np.concatenate([neg, np.tile(pos, reps)]))


def train(model: CnnModel, patches: PatchSet, epochs: int = 100, lr: float = 0.001, batch: int = 64,
          seed: int = 0, oversample: bool = False, progress=None):
    """Seeded mini-batch training; returns ``(model, [EpochLog, ...])``.

    Accuracy in the log is measured on each batch before its update.
    """
    if len(patches) == 0:
        raise ValueError("empty patch set")
    model = CnnModel(model.params, model.input_size, patches.mean)
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(1, epochs + 1):
        order = _epoch_order(rng, patches.labels, oversample)
        loss_sum = correct = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            x, y = patches.batch(idx), patches.labels[idx].astype(np.int64)
            model, loss, probs = _step(model, x, y, lr)
            correct += (probs.argmax(axis=1) == y).sum()
            loss_sum += loss * len(idx)
        log.append(EpochLog(epoch, loss_sum / len(order), correct / len(order)))
        if progress is not None:
            progress(log[-1])
    return model, log


def accuracy(model: CnnModel, patches: PatchSet, batch: int = 256) -> float:
    hits = 0
    for start in range(0, len(patches), batch):
        idx = np.arange(start, min(start + batch, len(patches)))
        hits += (predict_proba(model, patches.batch(idx)).argmax(axis=1) == patches.labels[idx]).sum()
    return hits / len(patches)


def training_log_csv(log: Sequence[EpochLog]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "train_accuracy"])
    for e in log:
        w.writerow([e.epoch, f"{e.loss:.8f}", f"{e.accuracy:.6f}"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# inference

def _conv_full(x, w, b):
    """Valid convolution of one (H, W, C) map, accumulated one kernel tap at a time."""
    k = w.shape[2]
    ho, wo = x.shape[0] - k + 1, x.shape[1] - k + 1
    out = np.broadcast_to(b, (ho, wo, len(b))).astype(x.dtype)
    for i in range(k):
        for j in range(k):
            out += x[i:i + ho, j:j + wo, :] @ w[:, :, i, j].T
    return out


def _pool_full(x):
    return _pool(x[None])[0]


def infer_hitmap(model: CnnModel, image: np.ndarray, stride: int = INFER_STRIDE, chunk: int = 2048,
                 dtype=np.float32) -> np.ndarray:
    """Nucleus probability at each stride-grid patch center; 0 at pixels never scored.

    Convolution features are computed once over the whole frame.  Because each
    pooling halves the grid, a patch's pooled maps are read from the copy of
    the frame-wide map whose pooling phase matches the patch offset.
    """
    img = np.asarray(image)
    h, w = img.shape
    s = model.input_size
    half = s // 2
    centers = grid_centers(w, h, stride, s)
    net = model.astype(dtype)
    p = net.params
    norm = (img.astype(dtype) / dtype(255.0)) - dtype(model.input_mean)
    c1 = _conv_full(norm[..., None], p["conv1_w"], p["conv1_b"])
    sizes = model.feature_sizes()
    fsize = sizes[-1]

    y0, x0 = centers[:, 1] - half, centers[:, 0] - half
    y1, x1 = y0 // 2, x0 // 2
    phase = (y0 % 2) * 8 + (x0 % 2) * 4 + (y1 % 2) * 2 + (x1 % 2)
    hit = np.zeros((h, w), dtype=np.float64)
    pooled1 = {}
    for ph in np.unique(phase):
        py, px, qy, qx = (ph >> 3) & 1, (ph >> 2) & 1, (ph >> 1) & 1, ph & 1
        if (py, px) not in pooled1:
            pooled1[py, px] = _conv_full(_pool_full(c1[py:, px:]), p["conv2_w"], p["conv2_b"])
        p2 = _pool_full(pooled1[py, px][qy:, qx:])
        windows = sliding_window_view(p2, (fsize, fsize), axis=(0, 1))  # U, V, C, f, f
        sel = np.flatnonzero(phase == ph)
        for start in range(0, len(sel), chunk):
            idx = sel[start:start + chunk]
            feats = windows[y1[idx] // 2, x1[idx] // 2].transpose(0, 2, 3, 1)  # n, f, f, C
            _, _, _, logits = _head(net, feats)
            hit[centers[idx, 1], centers[idx, 0]] = _softmax(logits)[:, 1]
    return np.clip(hit, 0.0, 1.0)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def postprocess_hitmap(hitmap: np.ndarray, dilation_radius: int = 2, cutoff: float = 0.5,
                       min_area: int = 100, return_labels: bool = False):
    """Dilate, threshold and label a hit map; emit rounded centroids of the large components."""
    hm = np.asarray(hitmap, dtype=np.float64)
    if dilation_radius > 0:
        hm = ndimage.grey_dilation(hm, footprint=disk(dilation_radius), mode="constant", cval=0.0)
    labels, n = ndimage.label(hm > cutoff, structure=EIGHT)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = np.flatnonzero(areas >= min_area)
    keep = keep[keep > 0]
    pts = []
    if len(keep):
        cy, cx = np.array(ndimage.center_of_mass(np.ones_like(hm), labels, keep)).reshape(-1, 2).T
        pts = np.stack([np.floor(cx + 0.5), np.floor(cy + 0.5)], axis=1)
    det = DetectionSet.points(np.asarray(pts, dtype=np.float64).reshape(-1, 2))
    if return_labels:
        relabel = np.zeros(n + 1, dtype=np.int32)
        relabel[keep] = np.arange(1, len(keep) + 1)
        return det, relabel[labels]
    return det


def hitmap_to_uint16(hitmap: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(hitmap, 0, 1) * 65535 + 0.5).astype(np.uint16)


# ---------------------------------------------------------------------------
# model files

def save_model(model: CnnModel, path) -> None:
    """Write (to a path or binary file object) an ``.npz`` archive: little-endian float64 arrays plus version/shape header fields."""
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in model.params.items()}
    header = np.array([FORMAT_VERSION, model.input_size], dtype="<i8")
    extra = {"header": header, "input_mean": np.array([model.input_mean], dtype="<f8")}
    if hasattr(path, "write"):
        np.savez(path, **extra, **arrays)
        return
    with open(path, "wb") as fh:
        np.savez(fh, **extra, **arrays)


def load_model(path) -> CnnModel:
    with np.load(Path(path)) as z:
        version, size = (int(v) for v in z["header"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        params = {f"{l}_{s}": z[f"{l}_{s}"].astype(np.float64) for l in LAYERS for s in "wb"}
        return CnnModel(params, size, float(z["input_mean"][0]))
