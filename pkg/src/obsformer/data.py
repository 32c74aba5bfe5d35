"""Scene tables and observation/prediction windows.

Scene files are whitespace separated text with four numeric columns per
line: ``frame ped x y`` (world meters). Raw video frame numbers are divided
by ``frame_stride`` so that consecutive samples have consecutive indices.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np


class ParseError(ValueError):
    """A scene file line could not be parsed."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class IntegrityError(ValueError):
    """Scene records violate a table invariant."""


@dataclass(frozen=True, eq=False)
class SceneTable:
    frames: np.ndarray  # (n,) int64 sample index
    peds: np.ndarray  # (n,) int64
    xy: np.ndarray  # (n, 2) float64, meters
    frame_period: float = 0.4
    name: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        peds = np.asarray(self.peds, dtype=np.int64).reshape(-1)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (len(frames) == len(peds) == len(xy)):
            raise IntegrityError("frames, peds and xy must have equal length")
        if not self.frame_period > 0:
            raise IntegrityError("frame_period must be positive")
        order = np.lexsort((peds, frames))
        frames, peds, xy = frames[order], peds[order], xy[order]
        if len(frames) > 1:
            dup = (np.diff(frames) == 0) & (np.diff(peds) == 0)
            if dup.any():
                i = int(np.argmax(dup))
                raise IntegrityError(
                    f"duplicate record for frame {frames[i]}, ped {peds[i]}"
                )
        for arr in (frames, peds, xy):
            arr.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "peds", peds)
        object.__setattr__(self, "xy", xy)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneTable):
            return NotImplemented
        return (
            self.frame_period == other.frame_period
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.peds, other.peds)
            and np.array_equal(self.xy, other.xy)
        )

    @property
    def records(self) -> list[tuple[int, int, float, float]]:
        return [
            (int(f), int(p), float(x), float(y))
            for f, p, (x, y) in zip(self.frames, self.peds, self.xy)
        ]

    def pedestrians(self) -> np.ndarray:
        return np.unique(self.peds)

    def track(self, ped: int) -> tuple[np.ndarray, np.ndarray]:
        """Frames and positions of one pedestrian, ordered by frame."""
        mask = self.peds == ped
        return self.frames[mask], self.xy[mask]


def parse_annotation(
    stream: IO | bytes | str,
    frame_stride: int = 10,
    yx: bool = False,
    frame_period: float = 0.4,
    name: str = "",
) -> SceneTable:
    """Parse a 4-column scene file.

    ``yx=True`` reads the column order ``frame ped y x``.
    """
    if isinstance(stream, bytes):
        text = stream.decode()
    elif isinstance(stream, str):
        text = stream
    else:
        text = stream.read()
        if isinstance(text, bytes):
            text = text.decode()
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")

    frames, peds, xy = [], [], []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ParseError(lineno, f"expected 4 fields, got {len(fields)}")
        try:
            f, p, a, b = (float(v) for v in fields)
        except ValueError:
            raise ParseError(lineno, "non-numeric field") from None
        if not all(np.isfinite((f, p, a, b))):
            raise ParseError(lineno, "non-finite field")
        if f != round(f) or p != round(p):
            raise ParseError(lineno, "frame and ped id must be integers")
        f, p = int(round(f)), int(round(p))
        if f % frame_stride:
            raise IntegrityError(
                f"line {lineno}: frame {f} is not a multiple of stride {frame_stride}"
            )
        frames.append(f // frame_stride)
        peds.append(p)
        xy.append((b, a) if yx else (a, b))
    return SceneTable(
        np.array(frames, dtype=np.int64),
        np.array(peds, dtype=np.int64),
        np.array(xy, dtype=np.float64).reshape(-1, 2),
        frame_period=frame_period,
        name=name,
    )


def load_scene(path: str | Path, frame_stride: int = 10, yx: bool = False) -> SceneTable:
    path = Path(path)
    with open(path, "rb") as fh:
        return parse_annotation(fh, frame_stride=frame_stride, yx=yx, name=path.stem)


def serialize_scene(scene: SceneTable, frame_stride: int = 10) -> str:
    """Inverse of :func:`parse_annotation` (``repr`` floats round-trip exactly)."""
    lines = [
        f"{int(f) * frame_stride}\t{int(p)}\t{float(x)!r}\t{float(y)!r}\n"
        for f, p, (x, y) in zip(scene.frames, scene.peds, scene.xy)
    ]
    return "".join(lines)


@dataclass(eq=False)
class Window:
    target_ped: int
    obs: np.ndarray  # (T_obs, 2)
    future: np.ndarray  # (T_pred, 2)
    t_index: int  # frame of the last observation
    neighbors: dict[int, np.ndarray] = field(default_factory=dict)  # ped -> (n, 2)
    neighbor_frames: dict[int, np.ndarray] = field(default_factory=dict)  # ped -> (n,)
    scene: str = ""

    @property
    def start(self) -> int:
        return self.t_index - len(self.obs) + 1

    def neighbors_last(self) -> list[np.ndarray]:
        return [h[-1] for _, h in sorted(self.neighbors.items()) if len(h)]


def gap_free_runs(frames: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[i, j)`` of maximal runs of consecutive frames."""
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    bounds = np.concatenate(([0], breaks, [len(frames)]))
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def extract_windows(
    scene: SceneTable,
    T_obs: int = 8,
    T_pred: int = 12,
    stride: int = 1,
    k: int = 4,
) -> list[Window]:
    """Cut every complete ``T_obs + T_pred`` slice out of each track.

    Neighbors are the other pedestrians seen in frames ``[t-k, t-1]`` where
    ``t-1`` is the last observed frame; only those frames are read.
    """
    if T_obs < 2 or T_pred < 1 or stride < 1 or k < 1:
        raise ValueError("need T_obs >= 2, T_pred >= 1, stride >= 1, k >= 1")
    span = T_obs + T_pred
    by_frame: dict[int, list[int]] = {}
    for i, f in enumerate(scene.frames):
        by_frame.setdefault(int(f), []).append(i)

    windows = []
    for ped in scene.pedestrians():
        frames, xy = scene.track(int(ped))
        for a, b in gap_free_runs(frames):
            for s in range(a, b - span + 1, stride):
                t = int(frames[s]) + T_obs
                nb: dict[int, list[int]] = {}
                for f in range(t - k, t):
                    for i in by_frame.get(f, ()):
                        if scene.peds[i] != ped:
                            nb.setdefault(int(scene.peds[i]), []).append(i)
                windows.append(
                    Window(
                        target_ped=int(ped),
                        obs=xy[s : s + T_obs].copy(),
                        future=xy[s + T_obs : s + span].copy(),
                        t_index=t - 1,
                        neighbors={p: scene.xy[idx].copy() for p, idx in nb.items()},
                        neighbor_frames={
                            p: scene.frames[idx].copy() for p, idx in nb.items()
                        },
                        scene=scene.name,
                    )
                )
    return windows


def extract_all(
    scenes: Iterable[SceneTable], T_obs=8, T_pred=12, stride=1, k=4
) -> list[Window]:
    out = []
    for sc in scenes:
        out.extend(extract_windows(sc, T_obs, T_pred, stride, k))
    return out
