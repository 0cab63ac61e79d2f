"""Flat ``key = value`` run configuration with section prefixes (``seg.min_size = 150``)."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .baseline import PARAM_FIELDS, SegParams

ENV_DATASET = "NUCLEO_DATASET"


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list(conv: Callable) -> Callable:
    def parse(v: str):
        items = [x for x in v.replace(",", " ").split() if x]
        return [conv(x) for x in items]
    return parse


def _schedule(v: str):
    return tuple(_list(int)(v))


def _schedules(v: str):
    """Several schedules separated by ``;``: ``10 20 30; 20 40 60``."""
    return [_schedule(part) for part in v.split(";") if part.strip()]


_SEG_TYPES: dict[str, Callable] = {
    "min_size": int,
    "min_avg_intensity": float,
    "max_avg_intensity": float,
    "min_solidity": float,
    "threshold_schedule": _schedule,
    "seed_min_size": int,
    "noise_window": int,
}

# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable, Any, str]] = {
    "dataset_root": (Path, None, "dataset directory (label.csv, EDF/, points/)"),
    "output_dir": (Path, Path("nucleo-out"), "where artifacts are written"),
    "seed": (int, 0, "random seed"),
    "split": (str, "test", "frames to process: train, test or all"),
    "workers": (int, 1, "worker processes for per-frame work"),
    "eval.detections": (Path, None, "detections directory"),
    "eval.encoding": (str, "points", "points, mask, masks or labels"),
    "eval.radius": (float, 10.0, "point match radius in pixels (strict)"),
    "eval.name": (str, "method", "method name used in the report file name"),
    "report.inputs": (_list(Path), [], "evaluation CSV files to compare"),
    "report.names": (_list(str), [], "row names, one per input"),
    "cnn.epochs": (int, 100, "training epochs"),
    "cnn.lr": (float, 0.001, "learning rate"),
    "cnn.batch": (int, 64, "mini-batch size"),
    "cnn.train_stride": (int, 15, "patch sampling stride for training"),
    "cnn.infer_stride": (int, 3, "patch stride for the hit map"),
    "cnn.max_patches": (int, 0, "random training subset size, 0 = all"),
    "cnn.oversample": (_bool, False, "replicate positive patches to balance classes"),
    "cnn.model": (Path, None, "model file for cnn-detect (default output_dir/model.npz)"),
    "cnn.dilation_radius": (int, 2, "hit-map dilation disk radius"),
    "cnn.cutoff": (float, 0.5, "hit-map threshold"),
    "cnn.min_area": (int, 100, "smallest kept hit-map region"),
    "overlay.frame": (str, None, "frame id to draw"),
    "overlay.detections": (Path, None, "points CSV, mask PNG or label PNG"),
    "overlay.output": (Path, None, "output PNG (default output_dir/overlay_<frame>.png)"),
}
for _name, _conv in _SEG_TYPES.items():
    SCHEMA[f"seg.{_name}"] = (_conv, None, f"baseline {_name}")
    SCHEMA[f"grid.{_name}"] = (_schedules if _name == "threshold_schedule" else _list(_conv), None,
                               f"grid values for {_name}")
assert set(_SEG_TYPES) == set(PARAM_FIELDS)


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        raw[key] = value
    return raw


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def seg_params(self, base: SegParams = SegParams()) -> SegParams:
        over = {n: self.values[f"seg.{n}"] for n in PARAM_FIELDS if self.values.get(f"seg.{n}") is not None}
        try:
            return dataclasses.replace(base, **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def grid(self) -> dict[str, list] | None:
        g = {n: self.values[f"grid.{n}"] for n in PARAM_FIELDS if self.values.get(f"grid.{n}") is not None}
        return g or None


def build_config(file_values: dict[str, str], flag_values: dict[str, str], env=None) -> RunConfig:
    """Merge defaults < environment < config file < command-line flags and parse every value."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if env.get(ENV_DATASET):
        raw["dataset_root"] = env[ENV_DATASET]
    raw.update(file_values)
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    for k, v in raw.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        try:
            values[k] = SCHEMA[k][0](v)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{k}: {exc}") from None
    if values["split"] not in ("train", "test", "all"):
        raise ConfigError("split must be train, test or all")
    if values["eval.encoding"] not in ("points", "mask", "masks", "labels"):
        raise ConfigError("eval.encoding must be points, mask, masks or labels")
    return RunConfig(values)


def format_seg_params(p: SegParams) -> str:
    lines = []
    for name in PARAM_FIELDS:
        v = getattr(p, name)
        lines.append(f"seg.{name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
