"""Mean-squared-error training on adjacent-frame deviations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SceneTable, Window, extract_all
from .model import ModelConfig, ModelParams, backward, forward, init_params, save_checkpoint
from .obstacle import ConfigError, GridConfig, ObstacleMethod, grid_to_patches, rasterize
from .preprocess import InputForm, encode_batch, future_diffs

log = logging.getLogger(__name__)


ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    grad_clip: float | None = None  # global gradient-norm cap
    seed: int = 0
    input_form: InputForm = InputForm.ADJACENT_DIFF
    obstacle_method: ObstacleMethod = ObstacleMethod.M3
    window_stride: int = 1
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "input_form", InputForm.parse(self.input_form))
        object.__setattr__(self, "obstacle_method", ObstacleMethod.parse(self.obstacle_method))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        check_compatible(self.model, self.grid)

    def describe(self) -> str:
        return f"{self.obstacle_method.value}/{self.input_form.value}"


def check_compatible(model: ModelConfig, grid: GridConfig) -> None:
    if model.patch_dim != grid.patch_dim or model.n_patches != grid.n_patches:
        raise ConfigError(
            f"model expects {model.n_patches} patches of {model.patch_dim} values, "
            f"grid yields {grid.n_patches} of {grid.patch_dim}"
        )


def model_config_for(grid: GridConfig, **overrides) -> ModelConfig:
    return ModelConfig(patch_dim=grid.patch_dim, n_patches=grid.n_patches, **overrides)


@dataclass
class WindowArrays:
    """Stacked model inputs and targets for a list of windows."""

    traj_in: np.ndarray  # (B, Lt, 2)
    patches: np.ndarray  # (B, P, patch_dim)
    target: np.ndarray  # (B, T_pred, 2) adjacent deviations
    last_obs: np.ndarray  # (B, 2)
    future: np.ndarray  # (B, T_pred, 2)
    ids: list[str]

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "WindowArrays":
        idx = np.asarray(idx, dtype=np.intp)
        return WindowArrays(
            self.traj_in[idx], self.patches[idx], self.target[idx],
            self.last_obs[idx], self.future[idx], [self.ids[i] for i in idx],
        )


def window_id(w: Window) -> str:
    return f"{w.scene or '?'}:ped{w.target_ped}@{w.t_index}"


def prepare(
    windows: Sequence[Window],
    form: InputForm | str,
    method: ObstacleMethod | str,
    grid: GridConfig,
) -> WindowArrays:
    """Encode observations and precompute obstacle patches (inputs read only observed frames)."""
    if not windows:
        raise ConfigError("no windows to prepare")
    obs = np.stack([w.obs for w in windows])
    future = np.stack([w.future for w in windows])
    patches = np.stack([grid_to_patches(rasterize(w, method, grid)) for w in windows])
    return WindowArrays(
        traj_in=encode_batch(obs, form),
        patches=patches,
        target=future_diffs(obs[:, -1], future),
        last_obs=obs[:, -1].copy(),
        future=future,
        ids=[window_id(w) for w in windows],
    )


def loss(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


@dataclass
class OptimizerState:
    kind: str = "sgd"
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def loss_and_grads(params: ModelParams, batch: WindowArrays):
    pred, cache = forward(params, batch.traj_in, batch.patches)
    err = pred - batch.target
    per_window = (err**2).mean(axis=(1, 2))
    bad = ~np.isfinite(per_window)
    if bad.any():
        raise TrainingDiverged(f"non-finite loss on window {batch.ids[int(np.argmax(bad))]}")
    grads = backward(params, cache, 2.0 * err / err.size)
    return float(per_window.mean()), grads


def train_step(
    batch: WindowArrays,
    params: ModelParams,
    state: OptimizerState,
    learning_rate: float,
    momentum: float = 0.9,
    grad_clip: float | None = None,
) -> tuple[ModelParams, OptimizerState, float]:
    """One optimizer step on the batch mean loss; updates ``params`` and ``state`` in place."""
    if len(batch) == 0:
        raise ConfigError("empty batch")
    value, grads = loss_and_grads(params, batch)
    if grad_clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    state.step += 1
    for name, g in grads.items():
        p = params.tensors[name]
        if state.kind == "adam":
            b1, b2, eps = momentum, ADAM_BETA2, ADAM_EPS
            m = state.velocity.setdefault(name, np.zeros_like(p))
            v = state.second.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**state.step)
            vhat = v / (1 - b2**state.step)
            p -= learning_rate * mhat / (np.sqrt(vhat) + eps)
        else:
            v = state.velocity.setdefault(name, np.zeros_like(p))
            v *= momentum
            v += g
            p -= learning_rate * v
    return params, state, value


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    checkpoint: Path | None = None
    loss_log: Path | None = None


def checkpoint_extra(cfg: TrainConfig) -> dict:
    g = cfg.grid
    return {
        "input_form": cfg.input_form.value,
        "obstacle_method": cfg.obstacle_method.value,
        "grid": {"N": g.N, "resolution": g.resolution, "half_extent": g.half_extent, "k": g.k, "patch": g.patch},
    }


def fit(cfg: TrainConfig, data: WindowArrays, params: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Optimize on prepared arrays; shuffling uses a generator seeded by ``cfg.seed``."""
    if len(data) == 0:
        raise ConfigError("no training windows")
    if params is None:
        params = init_params(cfg.model, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(kind=cfg.optimizer)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            _, _, value = train_step(
                data.take(idx), params, state, cfg.learning_rate, cfg.momentum, cfg.grad_clip
            )
            total += value * len(idx)
        losses.append(total / len(data))
        log.debug("epoch %d loss %.6g", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], params)
    return TrainResult(params, losses)


def train(cfg: TrainConfig, scenes: Sequence[SceneTable], out_dir: str | Path | None = None) -> TrainResult:
    """Window the scenes, train, and (with ``out_dir``) write checkpoint + loss log every epoch."""
    windows = extract_all(scenes, cfg.model.T_obs, cfg.model.T_pred, cfg.window_stride, cfg.grid.k)
    if not windows:
        raise ConfigError("no complete windows in the training scenes")
    data = prepare(windows, cfg.input_form, cfg.obstacle_method, cfg.grid)
    ckpt = log_path = None
    on_epoch = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = out_dir / "model.ckpt", out_dir / "loss.log"
        log_path.write_text("")
        extra = checkpoint_extra(cfg)

        def on_epoch(epoch, value, params):
            with open(log_path, "a") as fh:
                fh.write(f"epoch {epoch} loss {value!r}\n")
            save_checkpoint(params, ckpt, extra)

    result = fit(cfg, data, on_epoch=on_epoch)
    result.checkpoint, result.loss_log = ckpt, log_path
    return result


def with_model(cfg: TrainConfig, **model_overrides) -> TrainConfig:
    return replace(cfg, model=replace(cfg.model, **model_overrides))
