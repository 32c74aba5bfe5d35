"""Plain-text ``key = value`` run configuration.

Precedence is command-line override > config file > built-in default. Every
key must be known; unknown keys are an error. ``#`` starts a comment.

Recognized keys::

    scenes, test_scenes      comma-separated scene files
    out_dir                  training output directory
    frame_stride, yx         scene file parsing
    epochs, batch_size, learning_rate, momentum, optimizer, grad_clip,
    seed, input_form, obstacle_method, window_stride
    grid.N, grid.resolution, grid.half_extent, grid.k, grid.patch
    model.d_traj, model.d_obs, model.L_traj, model.L_obs, model.heads,
    model.d_ff, model.T_obs, model.T_pred, model.fuse_hidden
    ablate.methods, ablate.forms   comma-separated lists
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .obstacle import ConfigError, GridConfig, ObstacleMethod
from .preprocess import InputForm
from .training import TrainConfig, model_config_for


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list(v: str) -> list[str]:
    return [item.strip() for item in v.split(",") if item.strip()]


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none") else int(v)


SCHEMA: dict[str, Callable[[str], object]] = {
    "scenes": _list,
    "test_scenes": _list,
    "out_dir": str,
    "frame_stride": int,
    "yx": _bool,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "momentum": float,
    "optimizer": str,
    "grad_clip": _opt_float,
    "seed": int,
    "input_form": InputForm.parse,
    "obstacle_method": ObstacleMethod.parse,
    "window_stride": int,
    "grid.N": int,
    "grid.resolution": float,
    "grid.half_extent": int,
    "grid.k": int,
    "grid.patch": int,
    "model.d_traj": int,
    "model.d_obs": int,
    "model.L_traj": int,
    "model.L_obs": int,
    "model.heads": int,
    "model.d_ff": _opt_int,
    "model.T_obs": int,
    "model.T_pred": int,
    "model.fuse_hidden": int,
    "ablate.methods": lambda v: [ObstacleMethod.parse(x) for x in _list(v)],
    "ablate.forms": lambda v: [InputForm.parse(x) for x in _list(v)],
}


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


@dataclass
class RunConfig:
    train: TrainConfig
    scenes: list[Path] = field(default_factory=list)
    test_scenes: list[Path] = field(default_factory=list)
    out_dir: Path = Path("run")
    frame_stride: int = 10
    yx: bool = False
    ablate_methods: list[ObstacleMethod] = field(default_factory=lambda: list(ObstacleMethod))
    ablate_forms: list[InputForm] = field(default_factory=lambda: [InputForm.ADJACENT_DIFF])


PATH_KEYS = ("scenes", "test_scenes", "out_dir")


def build_run_config(values: dict[str, object]) -> RunConfig:
    grid = GridConfig(**{k[5:]: v for k, v in values.items() if k.startswith("grid.")})
    model = model_config_for(grid, **{k[6:]: v for k, v in values.items() if k.startswith("model.")})
    train_keys = {
        "epochs", "batch_size", "learning_rate", "momentum", "optimizer",
        "grad_clip", "seed", "input_form", "obstacle_method", "window_stride",
    }
    train = TrainConfig(grid=grid, model=model, **{k: v for k, v in values.items() if k in train_keys})
    run = RunConfig(
        train=train,
        scenes=[Path(p) for p in values.get("scenes", [])],
        test_scenes=[Path(p) for p in values.get("test_scenes", [])],
        out_dir=Path(values.get("out_dir", "run")),
        frame_stride=values.get("frame_stride", 10),
        yx=values.get("yx", False),
    )
    if "ablate.methods" in values:
        run.ablate_methods = values["ablate.methods"]
    if "ablate.forms" in values:
        run.ablate_forms = values["ablate.forms"]
    return run


def load_run_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    """File paths inside a config file are relative to that file; overrides to the cwd."""
    values: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        values.update(parse_pairs(path.read_text().splitlines(), str(path)))
        for key in PATH_KEYS:
            if key in values:
                v = values[key]
                values[key] = [str(path.parent / p) for p in v] if isinstance(v, list) else str(path.parent / v)
    values.update(parse_pairs(overrides, "<command line>"))
    return build_run_config(values)
