"""Trajectory input forms and the x/y decoupling statistic."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class InputForm(str, enum.Enum):
    RAW = "Raw"
    ADJACENT_DIFF = "AdjacentDiff"
    FIRST_FRAME_DIFF = "FirstFrameDiff"

    @classmethod
    def parse(cls, value: "str | InputForm") -> "InputForm":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value.lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ValueError(f"unknown input form {value!r}")

    def encoded_length(self, n: int) -> int:
        return n if self is InputForm.RAW else n - 1


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class EncodedSequence:
    values: np.ndarray  # (L, 2)
    form: InputForm
    anchor: np.ndarray  # first raw position


def encode(traj, form: InputForm | str) -> EncodedSequence:
    form = InputForm.parse(form)
    traj = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
    need = 1 if form is InputForm.RAW else 2
    if len(traj) < need:
        raise ValueError(f"{form.value} needs at least {need} positions, got {len(traj)}")
    if form is InputForm.RAW:
        values = traj.copy()
    elif form is InputForm.ADJACENT_DIFF:
        values = traj[1:] - traj[:-1]
    else:
        values = traj[1:] - traj[0]
    return EncodedSequence(values, form, traj[0].copy())


def encode_batch(obs: np.ndarray, form: InputForm | str) -> np.ndarray:
    """Vectorized :func:`encode` over a (B, T, 2) stack of observations."""
    form = InputForm.parse(form)
    obs = np.asarray(obs, dtype=np.float64)
    if form is InputForm.RAW:
        return obs.copy()
    if form is InputForm.ADJACENT_DIFF:
        return obs[:, 1:] - obs[:, :-1]
    return obs[:, 1:] - obs[:, :1]


def decode_adjacent_diffs(last_obs, diffs) -> np.ndarray:
    """Positions following ``last_obs`` by cumulative summation of ``diffs``.

    Works on (T, 2) diffs with a (2,) anchor or batched (B, T, 2) / (B, 2).
    """
    last_obs = np.asarray(last_obs, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size == 0:
        return diffs.reshape(*last_obs.shape[:-1], 0, 2)
    return last_obs[..., None, :] + np.cumsum(diffs, axis=-2)


def future_diffs(obs_last, future) -> np.ndarray:
    """Adjacent deviations of the future track starting from the last observation."""
    obs_last = np.asarray(obs_last, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    prev = np.concatenate([obs_last[..., None, :], future[..., :-1, :]], axis=-2)
    return future - prev


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if len(xs) != len(ys):
        raise ValueError("pearson needs equal-length inputs")
    if len(xs) < 2:
        raise ValueError("pearson needs at least two samples")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance in one component")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def scene_pearson(scene) -> float:
    """x/y correlation over every recorded position of a scene."""
    return pearson(scene.xy[:, 0], scene.xy[:, 1])
