import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from obsformer.data import Window
from obsformer.obstacle import (
    ConfigError,
    GridConfig,
    ObstacleMethod,
    grid_to_patches,
    patches_to_grid,
    rasterize,
    rasterize_method1,
    rasterize_method2,
    rasterize_method3,
    read_pgm,
    to_pgm,
    world_to_cell,
)

CFG = GridConfig()
ORIGIN = np.array([3.0, -2.0])


def test_world_to_cell():
    assert world_to_cell(ORIGIN, ORIGIN, CFG) == (32, 32)
    assert world_to_cell(ORIGIN + (0.25, 0), ORIGIN, CFG) == (32, 33)
    assert world_to_cell(ORIGIN + (0, 0.25), ORIGIN, CFG) == (33, 32)
    assert world_to_cell(ORIGIN + (100, 0), ORIGIN, CFG) is None
    assert world_to_cell(ORIGIN - (8.0, 0), ORIGIN, CFG) == (32, 0)
    assert world_to_cell(ORIGIN + (8.0, 0), ORIGIN, CFG) is None


def test_method1_goldens():
    assert not rasterize_method1([], ORIGIN, CFG).cells.any()
    g = rasterize_method1([ORIGIN], ORIGIN, CFG)
    assert g.cells.sum() == 121
    assert set(np.unique(g.cells)) == {0.0, 1.0}
    assert g.cells[27:38, 27:38].all()


def brute_force_stamp_count(cells_rc, n, h):
    hit = set()
    for r, c in cells_rc:
        for p in range(r - h, r + h + 1):
            for q in range(c - h, c + h + 1):
                if 0 <= p < n and 0 <= q < n:
                    hit.add((p, q))
    return len(hit)


def test_method1_border_clip():
    # cell (2, 2) is 30 cells below and left of the center
    pos = ORIGIN + (-30 * 0.25, -30 * 0.25)
    assert world_to_cell(pos, ORIGIN, CFG) == (2, 2)
    g = rasterize_method1([pos], ORIGIN, CFG)
    assert g.cells.sum() == brute_force_stamp_count([(2, 2)], 64, 5) == 64


def test_method2_examples():
    cfg = GridConfig(k=2)
    assert not rasterize_method2({}, ORIGIN, cfg).cells.any()
    far = {7: np.array([ORIGIN, ORIGIN + (22 * 0.25, 0)])}
    expected = brute_force_stamp_count([(32, 32), (32, 54)], 64, 5)
    assert expected == 242
    assert rasterize_method2(far, ORIGIN, cfg).cells.sum() == 242
    same = {7: np.array([ORIGIN, ORIGIN + (0.01, 0.01)])}
    assert rasterize_method2(same, ORIGIN, cfg).cells.sum() == 121


@pytest.mark.parametrize("lag,value", [(1, 1.0), (2, 0.8), (3, 0.6), (4, 0.4)])
def test_method3_stamp_values(lag, value):
    t = 100
    g = rasterize_method3({1: np.array([ORIGIN])}, ORIGIN, CFG, {1: np.array([t - lag])}, t)
    assert set(np.unique(g.cells)) == {0.0, value}
    assert (g.cells == value).sum() == 121


def test_method3_max_wins_both_orders():
    t = 10
    pos = np.array([ORIGIN, ORIGIN])
    for frames in ([t - 1, t - 3], [t - 3, t - 1]):
        g = rasterize_method3({1: pos}, ORIGIN, CFG, {1: np.array(frames)}, t)
        assert g.cells[32, 32] == 1.0
        assert g.cells.max() == 1.0


def test_method3_recency_monotone():
    t = 10
    a, b = ORIGIN + (1.0, 0), ORIGIN + (-1.0, 0)
    values = []
    for j in range(t - 4, t):
        g = rasterize_method3({1: np.array([a])}, ORIGIN, CFG, {1: np.array([j])}, t)
        values.append(g.cells[world_to_cell(a, ORIGIN, CFG)])
    assert values == sorted(values)
    g = rasterize_method3({1: np.array([a, b])}, ORIGIN, CFG, {1: np.array([t - 4, t - 1])}, t)
    assert g.cells[world_to_cell(b, ORIGIN, CFG)] > g.cells[world_to_cell(a, ORIGIN, CFG)]


def _window(neighbors, frames, t_last=9, target_last=ORIGIN):
    obs = np.repeat(np.asarray(target_last)[None], 8, axis=0)
    return Window(1, obs, np.zeros((12, 2)), t_last, neighbors, frames)


def test_methods_1_and_2_agree_for_k1():
    cfg = GridConfig(k=1)
    rng = np.random.default_rng(3)
    nb = {p: ORIGIN + rng.normal(0, 3, size=(1, 2)) for p in range(2, 8)}
    fr = {p: np.array([9]) for p in nb}
    w = _window(nb, fr)
    np.testing.assert_array_equal(rasterize(w, "M1", cfg).cells, rasterize(w, "M2", cfg).cells)


def test_rasterize_none_is_zero():
    w = _window({2: ORIGIN[None]}, {2: np.array([9])})
    assert not rasterize(w, ObstacleMethod.NONE, CFG).cells.any()
    assert rasterize(w, "M1", CFG).cells.sum() == 121


@pytest.mark.parametrize("method", ["M1", "M2", "M3"])
def test_cell_values_in_unit_interval(method):
    rng = np.random.default_rng(0)
    nb = {p: ORIGIN + rng.normal(0, 2, size=(4, 2)) for p in range(2, 12)}
    fr = {p: np.arange(6, 10) for p in nb}
    cells = rasterize(_window(nb, fr), method, CFG).cells
    assert cells.min() >= 0 and cells.max() <= 1
    if method != "M3":
        assert set(np.unique(cells)) <= {0.0, 1.0}


def test_patch_counts():
    p = grid_to_patches(rasterize_method1([], ORIGIN, CFG))
    assert p.shape == (16, 256)
    assert not p.any()


def test_patch_order_row_major():
    cells = np.arange(16.0).reshape(4, 4)
    p = grid_to_patches(cells, 2)
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[2], [8, 9, 12, 13])


@given(arrays(np.float64, (64, 64), elements=st.floats(0, 1)))
def test_patch_round_trip(cells):
    np.testing.assert_array_equal(patches_to_grid(grid_to_patches(cells, 16), 16), cells)


def test_patch_divisibility():
    with pytest.raises(ConfigError):
        grid_to_patches(np.zeros((10, 10)), 3)
    with pytest.raises(ConfigError):
        GridConfig(N=10, patch=3)


def test_pgm_bytes():
    g = rasterize_method1([ORIGIN], ORIGIN, CFG)
    data = to_pgm(g)
    assert data.startswith(b"P5\n64 64\n255\n")
    img = read_pgm(data)
    vals, counts = np.unique(img, return_counts=True)
    assert dict(zip(vals.tolist(), counts.tolist())) == {0: 3975, 255: 121}
    g3 = rasterize_method3({1: np.array([ORIGIN])}, ORIGIN, CFG, {1: np.array([6])}, 10)
    assert set(np.unique(read_pgm(to_pgm(g3)))) == {0, 102}  # round(0.4 * 255)


def test_permutation_invariance_small():
    rng = np.random.default_rng(1)
    nb = {p: ORIGIN + rng.normal(0, 2, size=(3, 2)) for p in range(2, 6)}
    fr = {p: np.arange(7, 10) for p in nb}
    ref = {m: rasterize(_window(nb, fr), m, CFG).cells for m in ("M1", "M2", "M3")}
    for perm in itertools.permutations(nb):
        w = _window({p: nb[p] for p in perm}, {p: fr[p] for p in perm})
        for m, cells in ref.items():
            np.testing.assert_array_equal(rasterize(w, m, CFG).cells, cells)
