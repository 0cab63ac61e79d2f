"""Command-line front end: ``nucleo <command> [--config FILE] [--key value ...]``.

Every configuration key can be given in a config file or as a flag of the same
name (``--seg.min_size 150``); flags win.  Exit codes: 0 success, 1 invalid
configuration, 2 input/output or data failure.  A failing command leaves a
``<command>.failed`` marker in the output directory; files are written to a
temporary name and renamed, so no half-written artifact is left behind.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import baseline, cnn, dataset, evaluation
from .config import SCHEMA, ConfigError, RunConfig, build_config, format_seg_params, parse_config_text

COMMANDS = ("check", "segment", "tune", "evaluate", "cnn-train", "cnn-detect", "overlay", "report")


class DataFailure(Exception):
    """Anything that should map to exit code 2."""


# ---------------------------------------------------------------------------
# artifact writing

def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_text(path: Path, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def read_raster(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataFailure(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def _csv(rows, header) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


# ---------------------------------------------------------------------------
# helpers

def _ground_truth(cfg: RunConfig) -> dataset.GroundTruthSet:
    root = cfg.get("dataset_root")
    if root is None:
        raise ConfigError("dataset_root not set (use --dataset_root or $NUCLEO_DATASET)")
    return dataset.load_dataset(root)


def _frames(cfg: RunConfig, gt, split=None):
    split = split or cfg["split"]
    if split == "all":
        return list(gt)
    return list(gt.subset(dataset.Split.TRAIN if split == "train" else dataset.Split.TEST))


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _segment_job(args):
    image, params = args
    return baseline.segment(image, params)


def _points_of(regions):
    return np.array([[int(np.floor(c + 0.5)) for c in r.centroid] for r in regions], dtype=np.int64).reshape(-1, 2)


def load_detections(path: Path, encoding: str, frame_id: str) -> evaluation.DetectionSet:
    if encoding == "points":
        f = path / f"{frame_id}.csv"
        if not f.is_file():
            raise DataFailure(f"missing detections {f}")
        return evaluation.DetectionSet.points(dataset.parse_points_text(f.read_text(encoding="utf-8")))
    if encoding in ("mask", "labels"):
        f = path / f"{frame_id}.png"
        if not f.is_file():
            raise DataFailure(f"missing detections {f}")
        arr = read_raster(f)
        if encoding == "mask":
            return evaluation.DetectionSet.mask(arr > 0)
        return evaluation.DetectionSet("labels", arr)
    d = path / frame_id
    if not d.is_dir():
        raise DataFailure(f"missing mask directory {d}")
    return evaluation.DetectionSet.masks([read_raster(f) > 0 for f in sorted(d.glob("*.png"))])


def score(det: evaluation.DetectionSet, frame, radius: float) -> evaluation.MatchOutcome:
    shape = (frame.height, frame.width)
    if det.kind == "labels":
        if det.data.shape != shape:
            raise evaluation.DimensionMismatch(f"{frame.frame_id}: label image shape {det.data.shape}")
        return evaluation.match_label_image(det.data, frame.points)
    return evaluation.match_detections(det, frame.points, shape, radius)


# ---------------------------------------------------------------------------
# commands

def cmd_check(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    summary = dataset.dataset_summary(gt)
    sys.stdout.write(summary.to_csv())
    t = summary.totals
    print(f"# {t['frames']} frames, {t['points']} points")
    if not dataset.matches_published(summary):
        print("# counts differ from the published dataset tables", file=sys.stderr)
        return 2
    return 0


def cmd_segment(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    params = cfg.seg_params()
    frames = _frames(cfg, gt)
    out = cfg["output_dir"] / "segment"
    results = _map(_segment_job, [(f.image, params) for f in frames], cfg["workers"])
    rows = []
    for f, regions in zip(frames, results):
        labels = baseline.label_image(regions, (f.height, f.width))
        write_atomic(out / "labels" / f"{f.frame_id}.png", png_bytes(labels))
        write_text(out / "points" / f"{f.frame_id}.csv", dataset.serialize_points(_points_of(regions)))
        rows.extend(baseline.regions_csv_rows(f.frame_id, regions))
    write_text(out / "regions.csv", _csv(rows, baseline.REGION_FIELDS))
    write_text(out / "params.cfg", format_seg_params(params))
    print(f"segmented {len(frames)} frames, {len(rows)} regions -> {out}")
    return 0


def cmd_tune(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    frames = _frames(cfg, gt, "train")
    grid = cfg.grid() or baseline.DEFAULT_GRID
    result = baseline.grid_search(frames, grid, cfg.seg_params(), workers=cfg["workers"])
    out = cfg["output_dir"] / "tune"
    write_text(out / "grid.csv", result.to_csv())
    write_text(out / "best.cfg", format_seg_params(result.best))
    b = result.best
    print(f"best F = {result.best_f:.4f} at min_size={b.min_size} min_avg={b.min_avg_intensity} "
          f"max_avg={b.max_avg_intensity} min_solidity={b.min_solidity}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    det_dir = cfg.get("eval.detections")
    if det_dir is None:
        raise ConfigError("eval.detections not set")
    if not Path(det_dir).is_dir():
        raise DataFailure(f"{det_dir}: not a directory")
    outcomes = []
    for f in _frames(cfg, gt):
        det = load_detections(Path(det_dir), cfg["eval.encoding"], f.frame_id)
        outcomes.append((f.frame_id, score(det, f, cfg["eval.radius"])))
    report = evaluation.aggregate(outcomes)
    path = cfg["output_dir"] / f"eval_{cfg['eval.name']}.csv"
    write_text(path, report.to_csv())
    print(f"{cfg['eval.name']}: {report.summary_line()} -> {path}")
    return 0


def cmd_cnn_train(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    frames = _frames(cfg, gt, "train")
    patches = cnn.extract_patches(frames, stride=cfg["cnn.train_stride"])
    if cfg["cnn.max_patches"] and cfg["cnn.max_patches"] < len(patches):
        rng = np.random.default_rng(cfg["seed"])
        patches = patches.subset(np.sort(rng.choice(len(patches), cfg["cnn.max_patches"], replace=False)))
    print(f"{len(patches)} patches, {100 * patches.positive_fraction:.2f}% positive", file=sys.stderr)
    model = cnn.init_model(cfg["seed"], input_mean=patches.mean)

    def progress(e):
        print(f"epoch {e.epoch}: loss {e.loss:.5f} acc {e.accuracy:.4f}", file=sys.stderr)

    model, log = cnn.train(model, patches, epochs=cfg["cnn.epochs"], lr=cfg["cnn.lr"], batch=cfg["cnn.batch"],
                           seed=cfg["seed"], oversample=cfg["cnn.oversample"], progress=progress)
    out = cfg["output_dir"] / "cnn"
    buf = io.BytesIO()
    cnn.save_model(model, buf)
    write_atomic(out / "model.npz", buf.getvalue())
    write_text(out / "training_log.csv", cnn.training_log_csv(log))
    return 0


def _detect_job(args):
    model, image, c = args
    hit = cnn.infer_hitmap(model, image, stride=c["stride"])
    det = cnn.postprocess_hitmap(hit, c["radius"], c["cutoff"], c["min_area"])
    return hit, det


def cmd_cnn_detect(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    out = cfg["output_dir"] / "cnn"
    model_path = cfg.get("cnn.model") or out / "model.npz"
    try:
        model = cnn.load_model(model_path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataFailure(f"cannot load model {model_path}: {exc}") from exc
    c = {"stride": cfg["cnn.infer_stride"], "radius": cfg["cnn.dilation_radius"],
         "cutoff": cfg["cnn.cutoff"], "min_area": cfg["cnn.min_area"]}
    frames = _frames(cfg, gt)
    for f, (hit, det) in zip(frames, _map(_detect_job, [(model, f.image, c) for f in frames], cfg["workers"])):
        write_atomic(out / "hitmaps" / f"{f.frame_id}.png", png_bytes(cnn.hitmap_to_uint16(hit)))
        write_text(out / "points" / f"{f.frame_id}.csv", dataset.serialize_points(det.data))
    print(f"detected on {len(frames)} frames -> {out / 'points'}")
    return 0


CROSS_ARM = 5


def draw_overlay(image: np.ndarray, gt_points, det_points=(), det_mask=None) -> np.ndarray:
    """Gray frame as RGB with ground truth as green crosses and detections in red."""
    img = np.asarray(image)
    rgb = np.repeat(img[..., None], 3, axis=2).astype(np.uint8)
    h, w = img.shape
    if det_mask is not None:
        m = np.asarray(det_mask)
        inner = np.zeros_like(m, dtype=bool)
        inner[1:-1, 1:-1] = ((m[1:-1, 1:-1] == m[:-2, 1:-1]) & (m[1:-1, 1:-1] == m[2:, 1:-1])
                             & (m[1:-1, 1:-1] == m[1:-1, :-2]) & (m[1:-1, 1:-1] == m[1:-1, 2:]))
        rgb[(m > 0) & ~inner] = (255, 0, 0)
    for x, y in np.asarray(det_points, dtype=np.int64).reshape(-1, 2):
        for d in range(-CROSS_ARM + 2, CROSS_ARM - 1):
            for px, py in ((x + d, y + d), (x + d, y - d)):
                if 0 <= px < w and 0 <= py < h:
                    rgb[py, px] = (255, 0, 0)
    for x, y in np.asarray(gt_points, dtype=np.int64).reshape(-1, 2):
        for d in range(-CROSS_ARM, CROSS_ARM + 1):
            for px, py in ((x + d, y), (x, y + d)):
                if 0 <= px < w and 0 <= py < h:
                    rgb[py, px] = (0, 255, 0)
    return rgb


def cmd_overlay(cfg: RunConfig) -> int:
    gt = _ground_truth(cfg)
    fid = cfg.get("overlay.frame")
    if fid is None:
        raise ConfigError("overlay.frame not set")
    try:
        frame = gt[dataset.normalize_frame_id(fid)]
    except (KeyError, ValueError):
        raise DataFailure(f"no frame {fid!r} in dataset") from None
    det_points, det_mask = (), None
    src = cfg.get("overlay.detections")
    if src is not None:
        src = Path(src)
        if not src.is_file():
            raise DataFailure(f"missing detections {src}")
        if src.suffix.lower() == ".csv":
            det_points = dataset.parse_points_text(src.read_text(encoding="utf-8"))
        else:
            det_mask = read_raster(src)
    rgb = draw_overlay(frame.image, frame.points, det_points, det_mask)
    path = cfg.get("overlay.output") or cfg["output_dir"] / f"overlay_{frame.frame_id}.png"
    write_atomic(Path(path), png_bytes(rgb))
    print(f"wrote {path}")
    return 0


REPORT_FIELDS = ["method", "precision", "precision_std", "recall", "recall_std", "f"]


def cmd_report(cfg: RunConfig) -> int:
    inputs = cfg["report.inputs"]
    if not inputs:
        raise ConfigError("report.inputs not set")
    names = cfg["report.names"] or [Path(p).stem.removeprefix("eval_") for p in inputs]
    if len(names) != len(inputs):
        raise ConfigError("report.names must match report.inputs")
    rows = []
    for name, path in zip(names, inputs):
        try:
            s = evaluation.read_report_csv(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            raise DataFailure(f"cannot read report {path}: {exc}") from exc
        p, r = float(s["precision"]), float(s["recall"])
        rows.append([name, f"{p:.6f}", s["precision_std"], f"{r:.6f}", s["recall_std"],
                     f"{evaluation.f_measure(p, r):.6f}"])
    write_text(cfg["output_dir"] / "report.csv", _csv(rows, REPORT_FIELDS))
    width = max(len(n) for n in names)
    print(f"{'':{width}}  {'Precision +/- STD':>17}  {'Recall +/- STD':>15}  {'F':>5}")
    for name, p, ps, r, rs, f in rows:
        print(f"{name:{width}}  {float(p):.3f} +/- {float(ps):.3f}  {float(r):.3f} +/- {float(rs):.3f}  {float(f):.3f}")
    return 0


HANDLERS = {
    "check": cmd_check, "segment": cmd_segment, "tune": cmd_tune, "evaluate": cmd_evaluate,
    "cnn-train": cmd_cnn_train, "cnn-detect": cmd_cnn_detect, "overlay": cmd_overlay, "report": cmd_report,
}


HELP = {
    "check": "print grade x split counts; exit 0 iff they match the published tables",
    "segment": "run the baseline segmenter on the selected split",
    "tune": "grid-search baseline parameters on the training split",
    "evaluate": "score a detections directory against the ground truth",
    "cnn-train": "train the patch classifier on the training split",
    "cnn-detect": "hit-map inference and post-processing on the selected split",
    "overlay": "draw ground truth and detections over one frame",
    "report": "merge evaluation CSVs into one comparison table",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    for key, (_, default, help_) in SCHEMA.items():
        common.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None,
                            help=f"{help_} (default: {default})" if default not in (None, []) else help_)
    parser = _Parser(prog="nucleo", description="Cervical nucleus detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error
        return int(exc.code or 0)
    flags = {k: getattr(args, k) for k in SCHEMA}
    try:
        file_values = parse_config_text(args.config.read_text(encoding="utf-8")) if args.config else {}
        cfg = build_config(file_values, flags)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    message = None
    try:
        code = HANDLERS[args.command](cfg)
    except (ConfigError, baseline.EmptyGrid) as exc:
        code, message = 1, str(exc)
    except (evaluation.EmptyInput, dataset.DatasetError, DataFailure, evaluation.DimensionMismatch, cnn.FrameTooSmall,
            cnn.NonFiniteLoss, OSError) as exc:
        code, message = 2, str(exc)
    if message:
        print(f"error: {message}", file=sys.stderr)
    if code != 0 and args.command != "check":
        try:
            write_text(cfg["output_dir"] / f"{args.command}.failed", (message or "failed") + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
