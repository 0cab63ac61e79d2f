"""Loading cytology frames, grade labels, split flags and annotated nucleus points.

Images are plain ``numpy.uint8`` arrays of shape ``(height, width)``.  Points are
``(x, y)`` integer pairs with ``x`` the column and ``y`` the row, origin at the
top-left pixel center.
"""
from __future__ import annotations

import csv
import enum
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

FRAME_ID_RE = re.compile(r"^frame(\d{3})$")
MAX_FRAME_NUMBER = 92
SUPPORTED_FORMATS = {"PNG", "BMP", "PPM"}  # PIL reports PGM files as PPM
IMAGE_SUFFIXES = (".png", ".bmp", ".pgm")
LABEL_FILENAMES = ("label.csv", "labels.csv")
DEFAULT_FRAME_SIZE = (1280, 960)  # width, height of every published frame


class DatasetError(Exception):
    """Base class for ingestion failures."""


class UnreadableFile(DatasetError):
    pass


class UnsupportedFormat(DatasetError):
    pass


class MalformedRow(DatasetError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicateFrameId(DatasetError):
    def __init__(self, frame_id: str):
        super().__init__(f"duplicate frame id {frame_id!r}")
        self.frame_id = frame_id


class MissingPointFile(DatasetError):
    def __init__(self, frame_id: str):
        super().__init__(f"no point file for {frame_id}")
        self.frame_id = frame_id


class PointOutOfBounds(DatasetError):
    def __init__(self, frame_id: str, index: int):
        super().__init__(f"{frame_id}: point #{index} lies outside the image")
        self.frame_id = frame_id
        self.index = index


class Grade(enum.Enum):
    NEGATIVE = "N"
    LSIL = "L"
    HSIL = "H"

    @property
    def title(self) -> str:
        return {"N": "Negative", "L": "LSIL", "H": "HSIL"}[self.value]


class Split(enum.Enum):
    TRAIN = 0
    TEST = 1


def normalize_frame_id(raw: str) -> str:
    """Accept ``frame007``, ``007`` or ``7`` and return ``frame007``."""
    raw = raw.strip()
    m = FRAME_ID_RE.match(raw)
    if m:
        number = int(m.group(1))
    elif raw.isdigit():
        number = int(raw)
    else:
        raise ValueError(f"not a frame id: {raw!r}")
    if number > MAX_FRAME_NUMBER:
        raise ValueError(f"frame number out of range: {raw!r}")
    return f"frame{number:03d}"


# ---------------------------------------------------------------------------
# rasters

def as_gray(pixels) -> np.ndarray:
    img = np.asarray(pixels)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"gray image must be a non-empty 2-D array, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("gray image values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Integer luminance, rounded half up: (299 R + 587 G + 114 B + 500) // 1000."""
    rgb = rgb.astype(np.int64)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def load_frame(path) -> np.ndarray:
    """Read a PNG, BMP or PGM raster as an 8-bit gray image."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path}: format {fmt} not supported")
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "1":
                arr = np.asarray(im, dtype=np.uint8) * 255
            elif mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = (np.asarray(im).astype(np.int64) >> 8).clip(0, 255).astype(np.uint8)
            elif mode == "LA":
                arr = np.asarray(im)[..., 0].astype(np.uint8)
            else:
                arr = rgb_to_gray(np.asarray(im.convert("RGB")))
    except UnsupportedFormat:
        raise
    except FileNotFoundError as exc:
        raise UnreadableFile(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    return as_gray(arr)


def read_image_size(path) -> tuple[int, int]:
    """(width, height) from the raster header without decoding pixels."""
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path}: format {im.format} not supported")
            return im.size
    except FileNotFoundError as exc:
        raise UnreadableFile(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class LabelRecord:
    frame_id: str
    grade: Grade
    split: Split


def _parse_label_row(row: Sequence[str], line: int) -> LabelRecord:
    cells = [c.strip() for c in row]
    if len(cells) < 3:
        raise MalformedRow(line, f"expected 3 fields, got {len(cells)}")
    try:
        frame_id = normalize_frame_id(cells[0])
    except ValueError as exc:
        raise MalformedRow(line, str(exc)) from None
    try:
        grade = Grade(cells[1].upper())
    except ValueError:
        raise MalformedRow(line, f"unknown grade {cells[1]!r}") from None
    if cells[2] not in ("0", "1"):
        raise MalformedRow(line, f"unknown split value {cells[2]!r}")
    return LabelRecord(frame_id, grade, Split(int(cells[2])))


def parse_labels_text(text: str) -> list[LabelRecord]:
    rows = [(i, r) for i, r in enumerate(csv.reader(io.StringIO(text)), start=1)
            if any(c.strip() for c in r)]
    records: list[LabelRecord] = []
    seen: set[str] = set()
    for k, (line, row) in enumerate(rows):
        try:
            rec = _parse_label_row(row, line)
        except MalformedRow:
            if k == 0:  # header
                continue
            raise
        if rec.frame_id in seen:
            raise DuplicateFrameId(rec.frame_id)
        seen.add(rec.frame_id)
        records.append(rec)
    return records


def parse_labels(path) -> list[LabelRecord]:
    """Parse a label file of ``frame_id,grade,split`` rows (header optional)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    return parse_labels_text(text)


def serialize_labels(records: Iterable[LabelRecord], header: bool = True) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if header:
        w.writerow(["frame_id", "grade", "split"])
    for r in records:
        w.writerow([r.frame_id, r.grade.value, r.split.value])
    return out.getvalue()


# ---------------------------------------------------------------------------
# points

def parse_points_text(text: str) -> np.ndarray:
    """Parse ``x,y`` rows; tolerates whitespace separators and one header line."""
    pts = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for k, ln in enumerate(lines):
        cells = [c for c in re.split(r"[,\s;]+", ln.strip()) if c]
        try:
            if len(cells) < 2:
                raise ValueError
            x, y = float(cells[0]), float(cells[1])
        except ValueError:
            if k == 0:
                continue
            raise MalformedRow(k + 1, f"bad point row {ln!r}") from None
        pts.append((int(round(x)), int(round(y))))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def serialize_points(points) -> str:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    return "x,y\n" + "".join(f"{x},{y}\n" for x, y in pts)


def _find_point_file(points_dir: Path, frame_id: str) -> Path | None:
    for name in (f"{frame_id}.csv", f"{frame_id}_points.csv", f"{frame_id}.txt"):
        p = points_dir / name
        if p.is_file():
            return p
    return None


def _find_image(edf_dir: Path, frame_id: str) -> Path | None:
    for stem in (frame_id, f"{frame_id}_EDF", f"{frame_id}_edf"):
        for suffix in IMAGE_SUFFIXES:
            p = edf_dir / f"{stem}{suffix}"
            if p.is_file():
                return p
    return None


# ---------------------------------------------------------------------------
# records

@dataclass
class FrameRecord:
    frame_id: str
    grade: Grade
    split: Split
    points: np.ndarray
    width: int
    height: int
    image_path: Path | None = None
    _image: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not FRAME_ID_RE.match(self.frame_id):
            raise ValueError(f"bad frame id {self.frame_id!r}")
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        self.points.setflags(write=False)
        if self._image is not None:
            img = as_gray(self._image)
            if img.shape != (self.height, self.width):
                raise ValueError(f"{self.frame_id}: image shape {img.shape} != {(self.height, self.width)}")
            img.setflags(write=False)
            self._image = img
        for i, (x, y) in enumerate(self.points):
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise PointOutOfBounds(self.frame_id, i)

    @classmethod
    def from_image(cls, frame_id, image, points=(), grade=Grade.NEGATIVE, split=Split.TRAIN):
        image = as_gray(image)
        return cls(frame_id, grade, split, np.asarray(points), image.shape[1], image.shape[0], _image=image)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            if self.image_path is None:
                raise UnreadableFile(f"{self.frame_id}: no image attached")
            img = load_frame(self.image_path)
            if img.shape != (self.height, self.width):
                raise UnreadableFile(f"{self.image_path}: size changed since indexing")
            img.setflags(write=False)
            self._image = img
        return self._image


@dataclass
class GroundTruthSet:
    frames: list[FrameRecord]

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DuplicateFrameId(sorted(dup)[0])
        self.frames = sorted(self.frames, key=lambda f: f.frame_id)

    def __iter__(self) -> Iterator[FrameRecord]:
        return iter(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, frame_id: str) -> FrameRecord:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def subset(self, split: Split) -> "GroundTruthSet":
        return GroundTruthSet([f for f in self.frames if f.split is split])

    @property
    def point_count(self) -> int:
        return sum(len(f.points) for f in self.frames)


def load_ground_truth(points_dir, labels: Sequence[LabelRecord], edf_dir=None,
                      image_size: tuple[int, int] = DEFAULT_FRAME_SIZE) -> GroundTruthSet:
    """Attach point annotations (and, if ``edf_dir`` is given, images) to each label.

    Without ``edf_dir`` the frame size is assumed to be ``image_size`` for the
    bounds check and no image is attached.
    """
    points_dir = Path(points_dir)
    frames = []
    for rec in labels:
        pfile = _find_point_file(points_dir, rec.frame_id)
        if pfile is None:
            raise MissingPointFile(rec.frame_id)
        try:
            text = pfile.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise UnreadableFile(f"{pfile}: {exc}") from exc
        pts = parse_points_text(text)
        image_path = None
        width, height = image_size
        if edf_dir is not None:
            image_path = _find_image(Path(edf_dir), rec.frame_id)
            if image_path is None:
                raise UnreadableFile(f"no EDF image for {rec.frame_id} in {edf_dir}")
            width, height = read_image_size(image_path)
        frames.append(FrameRecord(rec.frame_id, rec.grade, rec.split, pts, width, height, image_path))
    return GroundTruthSet(frames)


def find_labels_file(root) -> Path:
    root = Path(root)
    for name in LABEL_FILENAMES:
        if (root / name).is_file():
            return root / name
    raise UnreadableFile(f"no label.csv / labels.csv under {root}")


def load_dataset(root) -> GroundTruthSet:
    """Load a dataset laid out as ``root/{label.csv, EDF/, points/}``.

    Point files are looked up in ``points/`` first, then next to the EDF images.
    """
    root = Path(root)
    if not root.is_dir():
        raise UnreadableFile(f"{root}: not a directory")
    labels = parse_labels(find_labels_file(root))
    edf_dir = root / "EDF"
    if not edf_dir.is_dir():
        raise UnreadableFile(f"{edf_dir}: missing EDF directory")
    points_dir = root / "points"
    if not points_dir.is_dir():
        points_dir = edf_dir
    return load_ground_truth(points_dir, labels, edf_dir=edf_dir)


# ---------------------------------------------------------------------------
# summary

@dataclass
class DatasetSummary:
    """Frame and point counts indexed ``[split, grade]`` (rows Train/Test, columns N/L/H)."""

    frames: np.ndarray
    points: np.ndarray

    @property
    def totals(self) -> dict[str, int]:
        return {"frames": int(self.frames.sum()), "points": int(self.points.sum())}

    def rows(self):
        grades = list(Grade)
        for what, table in (("frames", self.frames), ("points", self.points)):
            for split in Split:
                row = table[split.value]
                yield [what, split.name.lower(), *map(int, row), int(row.sum())]
            col = table.sum(axis=0)
            yield [what, "total", *map(int, col), int(col.sum())]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["count", "split", *[g.title for g in Grade], "Total"])
        w.writerows(self.rows())
        return out.getvalue()


def dataset_summary(gt: GroundTruthSet) -> DatasetSummary:
    grades = list(Grade)
    frames = np.zeros((2, 3), dtype=np.int64)
    points = np.zeros((2, 3), dtype=np.int64)
    for f in gt:
        j = grades.index(f.grade)
        frames[f.split.value, j] += 1
        points[f.split.value, j] += len(f.points)
    return DatasetSummary(frames, points)


# Published counts (rows Train/Test, columns Negative/LSIL/HSIL).
PUBLISHED_FRAMES = np.array([[12, 34, 23], [4, 12, 8]])
PUBLISHED_POINTS = np.array([[179, 1125, 679], [59, 411, 252]])


def matches_published(summary: DatasetSummary) -> bool:
    return (np.array_equal(summary.frames, PUBLISHED_FRAMES)
            and np.array_equal(summary.points, PUBLISHED_POINTS))
