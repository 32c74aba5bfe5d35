"""Displacement metrics, baselines, and the experiment drivers.

``ade`` averages the Euclidean error over every predicted step of every
window; ``fde`` looks only at the last step.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import SceneTable, Window, extract_all
from .model import (
    ModelParams,
    PredictedTrajectory,
    encode_obstacle,
    encode_trajectory,
    forward,
    head_forward,
    resize_head,
)
from .obstacle import ConfigError, GridConfig, ObstacleMethod
from .preprocess import InputForm, decode_adjacent_diffs, future_diffs
from .training import TrainConfig, WindowArrays, fit, prepare

CSV_HEADER = ("dataset", "config", "ade", "fde", "n_windows", "latency_ms")


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError(f"expected matching (W, T, 2) arrays, got {pred.shape} and {truth.shape}")
    if pred.shape[0] == 0 or pred.shape[1] == 0:
        raise ValueError("need at least one window and one step")
    return pred, truth


def ade(predictions, truths) -> float:
    pred, truth = _check(predictions, truths)
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


def fde(predictions, truths) -> float:
    pred, truth = _check(predictions, truths)
    return float(np.linalg.norm(pred[:, -1] - truth[:, -1], axis=-1).mean())


def linear_baseline(window: Window | np.ndarray, T_pred: int = 12) -> PredictedTrajectory:
    """Per-axis least-squares line over the observed steps, extrapolated forward."""
    obs = np.asarray(window.obs if isinstance(window, Window) else window, dtype=np.float64)
    if isinstance(window, Window):
        T_pred = len(window.future)
    n = len(obs)
    if n < 2:
        raise ValueError("linear baseline needs at least two observations")
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    slope = tc @ (obs - obs.mean(axis=0)) / (tc @ tc)
    intercept = obs.mean(axis=0) - slope * t.mean()
    tf = np.arange(n, n + T_pred, dtype=np.float64)
    positions = intercept + tf[:, None] * slope
    return PredictedTrajectory(future_diffs(obs[-1], positions), positions)


@dataclass
class MetricRow:
    dataset: str
    config: str
    ade: float
    fde: float
    n_windows: int
    mean_latency: float = 0.0  # seconds per window
    latency_by_length: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.dataset, r.config, f"{r.ade:.6f}", f"{r.fde:.6f}", r.n_windows, f"{r.mean_latency * 1e3:.3f}"])
        return buf.getvalue()


def predict_arrays(params: ModelParams, data: WindowArrays, batch_size: int = 256):
    """Positions (W, T_pred, 2) for prepared windows, batched."""
    out = []
    for s in range(0, len(data), batch_size):
        diffs, _ = forward(params, data.traj_in[s : s + batch_size], data.patches[s : s + batch_size])
        out.append(decode_adjacent_diffs(data.last_obs[s : s + batch_size], diffs.astype(np.float64)))
    return np.concatenate(out)


def check_checkpoint_matches(params: ModelParams, extra: dict, cfg: TrainConfig) -> None:
    """Raise when a checkpoint was trained under a different input/grid setup."""
    mc = params.config
    problems = []
    if extra:
        if extra.get("input_form") != cfg.input_form.value:
            problems.append(f"input form {extra.get('input_form')} != {cfg.input_form.value}")
        if extra.get("obstacle_method") != cfg.obstacle_method.value:
            problems.append(f"obstacle method {extra.get('obstacle_method')} != {cfg.obstacle_method.value}")
        g = extra.get("grid")
        if g is not None and GridConfig(**g) != cfg.grid:
            problems.append("grid configuration differs")
    if mc.patch_dim != cfg.grid.patch_dim or mc.n_patches != cfg.grid.n_patches:
        problems.append("model patch layout does not match the grid")
    if problems:
        raise ConfigError("checkpoint/evaluation mismatch: " + "; ".join(problems))


def config_from_checkpoint(params: ModelParams, extra: dict) -> TrainConfig:
    grid = GridConfig(**extra["grid"]) if "grid" in extra else GridConfig()
    return TrainConfig(
        input_form=extra.get("input_form", InputForm.ADJACENT_DIFF),
        obstacle_method=extra.get("obstacle_method", ObstacleMethod.M3),
        grid=grid,
        model=params.config,
    )


def evaluate_windows(
    params: ModelParams, windows: Sequence[Window], cfg: TrainConfig, dataset: str = "", label: str | None = None
) -> MetricRow:
    data = prepare(windows, cfg.input_form, cfg.obstacle_method, cfg.grid)
    t0 = time.perf_counter()
    pred = predict_arrays(params, data)
    elapsed = time.perf_counter() - t0
    return MetricRow(
        dataset=dataset,
        config=label or cfg.describe(),
        ade=ade(pred, data.future),
        fde=fde(pred, data.future),
        n_windows=len(data),
        mean_latency=elapsed / len(data),
    )


def evaluate(
    params: ModelParams,
    scenes: dict[str, Sequence[SceneTable]] | Sequence[SceneTable],
    cfg: TrainConfig,
    extra: dict | None = None,
) -> MetricReport:
    """One report row per dataset; ``scenes`` may be a list (one dataset) or name -> scenes."""
    check_checkpoint_matches(params, extra or {}, cfg)
    if not isinstance(scenes, dict):
        scenes = {"all": list(scenes)}
    report = MetricReport()
    for name, group in scenes.items():
        windows = extract_all(group, params.config.T_obs, params.config.T_pred, cfg.window_stride, cfg.grid.k)
        if not windows:
            raise ConfigError(f"dataset {name!r} has no complete windows")
        report.rows.append(evaluate_windows(params, windows, cfg, dataset=name))
    return report


def evaluate_linear(windows: Sequence[Window], dataset: str = "") -> MetricRow:
    pred = np.stack([linear_baseline(w).positions for w in windows])
    truth = np.stack([w.future for w in windows])
    return MetricRow(dataset, "Linear", ade(pred, truth), fde(pred, truth), len(windows))


def autoregressive_predict(params: ModelParams, traj_in: np.ndarray, patches: np.ndarray, T_pred: int) -> np.ndarray:
    """Stepwise decoding baseline on adjacent-deviation inputs.

    Each step re-runs the trajectory encoder on the most recent deviations
    (its own earlier outputs included), keeps only the first predicted
    deviation and appends it. The obstacle feature is computed once.
    """
    of, _ = encode_obstacle(params, np.asarray(patches))
    seq = np.asarray(traj_in)
    Lt = seq.shape[1]
    out = []
    for _ in range(T_pred):
        tf, _ = encode_trajectory(params, seq[:, -Lt:])
        diffs, _ = head_forward(params, np.concatenate([tf, of], axis=1))
        step = diffs[:, :1]
        out.append(step)
        seq = np.concatenate([seq, step], axis=1)
    return np.concatenate(out, axis=1)


def _pin_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


@dataclass
class LatencyRow:
    T_pred: int
    one_shot: float  # median seconds per forward
    autoregressive: float


def latency_bench(
    params: ModelParams,
    lengths: Iterable[int] = (12, 16, 20, 24, 28, 32),
    repeats: int = 30,
    warmup: int = 5,
    seed: int = 0,
) -> list[LatencyRow]:
    """Median single-window latency of one-shot vs stepwise decoding per horizon.

    Lengths are interleaved within every repeat so drift hits all of them alike.
    """
    if repeats < 30:
        raise ValueError("repeats must be >= 30 for stable medians")
    lengths = list(lengths)
    cfg = params.config
    rng = np.random.default_rng(seed)
    traj_in = rng.normal(scale=0.4, size=(1, cfg.T_obs - 1, 2))
    patches = (rng.random((1, cfg.n_patches, cfg.patch_dim)) < 0.1).astype(np.float64)
    models = {T: resize_head(params, T, seed) for T in lengths}
    runs = {
        (T, kind): fn
        for T in lengths
        for kind, fn in (
            ("one_shot", lambda m=models[T]: forward(m, traj_in, patches)),
            ("autoregressive", lambda m=models[T], T=T: autoregressive_predict(m, traj_in, patches, T)),
        )
    }
    times = {key: [] for key in runs}
    with _pin_threads():
        for fn in runs.values():
            for _ in range(warmup):
                fn()
        for _ in range(repeats):
            for key, fn in runs.items():
                t0 = time.perf_counter()
                fn()
                times[key].append(time.perf_counter() - t0)
    return [
        LatencyRow(T, statistics.median(times[(T, "one_shot")]), statistics.median(times[(T, "autoregressive")]))
        for T in lengths
    ]


def format_latency(rows: Sequence[LatencyRow]) -> str:
    lines = ["length,one_shot_ms,autoregressive_ms"]
    lines += [f"{r.T_pred},{r.one_shot * 1e3:.3f},{r.autoregressive * 1e3:.3f}" for r in rows]
    return "\n".join(lines) + "\n"


def ablate(
    cells: Sequence[tuple[ObstacleMethod | str, InputForm | str]],
    train_scenes: Sequence[SceneTable],
    test_scenes: Sequence[SceneTable],
    base: TrainConfig,
    dataset: str = "",
) -> MetricReport:
    """Train and evaluate every (obstacle method, input form) cell under one seed and budget."""
    if not cells:
        raise ConfigError("empty ablation matrix")
    m = base.model
    train_w = extract_all(train_scenes, m.T_obs, m.T_pred, base.window_stride, base.grid.k)
    test_w = extract_all(test_scenes, m.T_obs, m.T_pred, base.window_stride, base.grid.k)
    if not train_w or not test_w:
        raise ConfigError("ablation needs windows in both train and test scenes")
    report = MetricReport()
    for method, form in cells:
        cfg = replace(base, obstacle_method=ObstacleMethod.parse(method), input_form=InputForm.parse(form))
        result = fit(cfg, prepare(train_w, cfg.input_form, cfg.obstacle_method, cfg.grid))
        report.rows.append(evaluate_windows(result.params, test_w, cfg, dataset=dataset))
    return report


def leave_one_out(scenes: dict[str, Sequence[SceneTable]]):
    """Yield (held_out, train_scenes, test_scenes) for each named dataset."""
    for name in scenes:
        train = [s for other, group in scenes.items() if other != name for s in group]
        yield name, train, list(scenes[name])
