"""Synthetic Pap-smear-like frames for smoke tests and demos.

Light background, pale cytoplasm blobs, dark elliptical nuclei, sensor noise.
Every nucleus whose center is at least 10 px from the border is marked.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import FrameRecord, Grade, GroundTruthSet, LabelRecord, Split, serialize_labels, serialize_points


def _ellipse(shape, cx, cy, a, b, theta):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synthetic_frame(rng: np.random.Generator, width: int = 320, height: int = 240, n_nuclei: int = 8,
                    noise: float = 4.0):
    """Return ``(image, points)`` with one marked point per nucleus away from the border."""
    img = np.full((height, width), 215.0)
    img += rng.normal(0, 3, size=(height // 8 + 1, width // 8 + 1)).repeat(8, 0).repeat(8, 1)[:height, :width]
    points = []
    centers = []
    tries = 0
    while len(centers) < n_nuclei and tries < 50 * n_nuclei:
        tries += 1
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        if any((cx - x) ** 2 + (cy - y) ** 2 < 30 ** 2 for x, y in centers):
            continue
        centers.append((cx, cy))
        cyto = _ellipse(img.shape, cx + rng.normal(0, 4), cy + rng.normal(0, 4),
                        rng.uniform(22, 34), rng.uniform(18, 28), rng.uniform(0, np.pi))
        img[cyto] = np.minimum(img[cyto], rng.uniform(165, 185))
        a, b = rng.uniform(7, 10), rng.uniform(6, 9)
        nuc = _ellipse(img.shape, cx, cy, a, b, rng.uniform(0, np.pi))
        img[nuc] = rng.uniform(45, 85)
        if 10 <= cx < width - 10 and 10 <= cy < height - 10:
            points.append((int(round(cx)), int(round(cy))))
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), np.array(points, dtype=np.int64).reshape(-1, 2)


def synthetic_set(n_train: int = 4, n_test: int = 2, width: int = 320, height: int = 240,
                  n_nuclei: int = 8, seed: int = 0) -> GroundTruthSet:
    rng = np.random.default_rng(seed)
    grades = list(Grade)
    frames = []
    for i in range(n_train + n_test):
        img, pts = synthetic_frame(rng, width, height, n_nuclei)
        split = Split.TRAIN if i < n_train else Split.TEST
        frames.append(FrameRecord.from_image(f"frame{i:03d}", img, pts, grades[i % 3], split))
    return GroundTruthSet(frames)


def write_dataset(gt: GroundTruthSet, root) -> Path:
    """Write ``label.csv``, ``EDF/<id>.png`` and ``points/<id>.csv`` under ``root``."""
    root = Path(root)
    (root / "EDF").mkdir(parents=True, exist_ok=True)
    (root / "points").mkdir(exist_ok=True)
    labels = [LabelRecord(f.frame_id, f.grade, f.split) for f in gt]
    (root / "label.csv").write_text(serialize_labels(labels), encoding="utf-8")
    for f in gt:
        Image.fromarray(np.asarray(f.image)).save(root / "EDF" / f"{f.frame_id}.png")
        (root / "points" / f"{f.frame_id}.csv").write_text(serialize_points(f.points), encoding="utf-8")
    return root
