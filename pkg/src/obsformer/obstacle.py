"""Egocentric "obstacle" grids built from neighbors' recent positions.

Three rasterizers:

* method 1 stamps each neighbor's last position with 1,
* method 2 stamps every retained past position with 1,
* method 3 stamps a position seen at frame ``j`` with ``(j - t + k + 2) / (k + 1)``,
  so the freshest position (``j = t-1``) gets 1 and older ones fade linearly.

The grid is centered on the target's last observed position. ``row`` follows
world ``y`` and ``col`` follows world ``x``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    pass


class ObstacleMethod(str, enum.Enum):
    NONE = "None"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"

    @classmethod
    def parse(cls, value: "str | ObstacleMethod") -> "ObstacleMethod":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown obstacle method {value!r}")


@dataclass(frozen=True)
class GridConfig:
    N: int = 64
    resolution: float = 0.25
    half_extent: int = 5
    k: int = 4
    patch: int = 16

    def __post_init__(self):
        if self.N <= 0 or self.patch <= 0:
            raise ConfigError("N and patch must be positive")
        if self.N % self.patch:
            raise ConfigError(f"N={self.N} is not divisible by patch={self.patch}")
        if not self.resolution > 0:
            raise ConfigError("resolution must be positive")
        if self.half_extent < 0 or self.k < 1:
            raise ConfigError("need half_extent >= 0 and k >= 1")

    @property
    def n_patches(self) -> int:
        return (self.N // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch


@dataclass(frozen=True, eq=False)
class ObstacleGrid:
    cells: np.ndarray
    origin: np.ndarray  # world position of the center of cell (0, 0)
    config: GridConfig = field(default_factory=GridConfig)


def world_to_cell(pos, target_last, cfg: GridConfig) -> tuple[int, int] | None:
    col = int(np.floor((pos[0] - target_last[0]) / cfg.resolution)) + cfg.N // 2
    row = int(np.floor((pos[1] - target_last[1]) / cfg.resolution)) + cfg.N // 2
    if 0 <= row < cfg.N and 0 <= col < cfg.N:
        return row, col
    return None


def _empty(target_last, cfg: GridConfig) -> ObstacleGrid:
    target_last = np.asarray(target_last, dtype=np.float64)
    origin = target_last + (0.5 - cfg.N // 2) * cfg.resolution
    return ObstacleGrid(np.zeros((cfg.N, cfg.N)), origin, cfg)


def _stamp(cells: np.ndarray, rc: tuple[int, int], value: float, h: int) -> None:
    r, c = rc
    n = cells.shape[0]
    sl = (slice(max(r - h, 0), min(r + h + 1, n)), slice(max(c - h, 0), min(c + h + 1, n)))
    np.maximum(cells[sl], value, out=cells[sl])


def rasterize_method1(neighbors_last: Sequence, target_last, cfg: GridConfig) -> ObstacleGrid:
    grid = _empty(target_last, cfg)
    for pos in neighbors_last:
        rc = world_to_cell(pos, target_last, cfg)
        if rc is not None:
            _stamp(grid.cells, rc, 1.0, cfg.half_extent)
    return grid


def rasterize_method2(histories: Mapping[int, np.ndarray], target_last, cfg: GridConfig) -> ObstacleGrid:
    grid = _empty(target_last, cfg)
    for hist in histories.values():
        for pos in np.asarray(hist).reshape(-1, 2)[-cfg.k :]:
            rc = world_to_cell(pos, target_last, cfg)
            if rc is not None:
                _stamp(grid.cells, rc, 1.0, cfg.half_extent)
    return grid


def recency_value(j: int, t: int, k: int) -> float:
    return (j - t + k + 2) / (k + 1)


def rasterize_method3(
    histories: Mapping[int, np.ndarray],
    target_last,
    cfg: GridConfig,
    frames: Mapping[int, np.ndarray],
    t: int,
) -> ObstacleGrid:
    """``frames[ped][i]`` is the frame of ``histories[ped][i]``; ``t-1`` is the last observed frame.

    Overlapping stamps keep the maximum, i.e. the most recent contribution.
    """
    grid = _empty(target_last, cfg)
    for ped, hist in histories.items():
        hist = np.asarray(hist).reshape(-1, 2)
        for pos, j in zip(hist, np.asarray(frames[ped])):
            j = int(j)
            if not t - cfg.k <= j <= t - 1:
                continue
            rc = world_to_cell(pos, target_last, cfg)
            if rc is not None:
                _stamp(grid.cells, rc, recency_value(j, t, cfg.k), cfg.half_extent)
    return grid


def rasterize(window, method: ObstacleMethod | str, cfg: GridConfig) -> ObstacleGrid:
    """Grid for one window; ``None`` gives the all-zero grid used by the no-obstacle ablation."""
    method = ObstacleMethod.parse(method)
    target_last = window.obs[-1]
    t = window.t_index + 1
    hist, frames = {}, {}
    for ped, pos in window.neighbors.items():
        fr = np.asarray(window.neighbor_frames[ped])
        keep = (fr >= t - cfg.k) & (fr <= t - 1)
        hist[ped], frames[ped] = pos[keep], fr[keep]
    if method is ObstacleMethod.NONE:
        return _empty(target_last, cfg)
    if method is ObstacleMethod.M1:
        last = [h[-1] for h in hist.values() if len(h)]
        return rasterize_method1(last, target_last, cfg)
    if method is ObstacleMethod.M2:
        return rasterize_method2(hist, target_last, cfg)
    return rasterize_method3(hist, target_last, cfg, frames, t)


def grid_to_patches(grid: ObstacleGrid | np.ndarray, patch: int | None = None) -> np.ndarray:
    """Row-major patches, each flattened row-major: (N/patch)**2 x patch**2."""
    if isinstance(grid, ObstacleGrid):
        cells, patch = grid.cells, grid.config.patch if patch is None else patch
    else:
        cells = np.asarray(grid)
    n = cells.shape[-1]
    if patch is None or patch <= 0 or n % patch or cells.shape[-2] != n:
        raise ConfigError(f"grid of side {n} cannot be cut into {patch}-cell patches")
    g = n // patch
    lead = cells.shape[:-2]
    x = cells.reshape(*lead, g, patch, g, patch)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, g * g, patch * patch)


def patches_to_grid(patches: np.ndarray, patch: int) -> np.ndarray:
    patches = np.asarray(patches)
    lead = patches.shape[:-2]
    g = int(round(np.sqrt(patches.shape[-2])))
    if g * g != patches.shape[-2] or patches.shape[-1] != patch * patch:
        raise ConfigError("patch array does not tile a square grid")
    x = patches.reshape(*lead, g, g, patch, patch)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, g * patch, g * patch)


def to_pgm(grid: ObstacleGrid | np.ndarray) -> bytes:
    """Binary 8-bit PGM, row 0 first, value ``round(cell * 255)``."""
    cells = grid.cells if isinstance(grid, ObstacleGrid) else np.asarray(grid)
    h, w = cells.shape
    data = np.rint(np.clip(cells, 0.0, 1.0) * 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + data.tobytes()


def write_pgm(grid, path: str | Path) -> None:
    Path(path).write_bytes(to_pgm(grid))


def read_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    raw = np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8)
    return raw.reshape(h, w)
