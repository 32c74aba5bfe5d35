"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the terminal
(also under pytest's output capture) before asserting. Run with::

    pytest -v tests/test_acceptance.py

The real-data Pearson check reads the scene file named by ``OBSFORMER_ETH``
and is skipped when that variable is unset.
"""
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from obsformer import layers as L
from obsformer.cli import main
from obsformer.data import extract_all, load_scene
from obsformer.evaluation import ablate, ade, evaluate_windows, fde, latency_bench
from obsformer.model import init_params, load_checkpoint, save_checkpoint
from obsformer.obstacle import (
    GridConfig,
    grid_to_patches,
    patches_to_grid,
    rasterize_method1,
    rasterize_method2,
    rasterize_method3,
    recency_value,
)
from obsformer.preprocess import decode_adjacent_diffs, encode, scene_pearson
from obsformer.training import TrainConfig, fit, model_config_for, prepare

from gradcheck import SMALL, check_function, check_model
from social_forces import simulate_corpus
from test_evaluation import naive_ade, naive_fde

DATA = Path(__file__).parent / "data"

# criterion 4: 200 epochs on 10 windows at default width
OVERFIT = dict(epochs=200, batch_size=2, learning_rate=1e-4, momentum=0.95, optimizer="adam", seed=0)

# criterion 6: identical budget for both arms, reduced width to fit the CPU budget
ABLATION_MODEL = dict(d_traj=16, d_obs=32, L_traj=2, L_obs=1, fuse_hidden=64)
ABLATION = dict(epochs=30, batch_size=32, learning_rate=0.02, window_stride=2)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, detail

    return emit


def test_criterion_1_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        p, t = rng.normal(scale=3.0, size=(2, n, 12, 2))
        worst = max(worst, abs(ade(p, t) - naive_ade(p.tolist(), t.tolist())))
        worst = max(worst, abs(fde(p, t) - naive_fde(p.tolist(), t.tolist())))
    truth = rng.normal(size=(4, 12, 2))
    off = truth + np.array([3.0, 4.0])
    exact = ade(off, truth) == 5.0 and fde(off, truth) == 5.0
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and exact and elapsed < 1.0
    verdict(1, ok, f"max oracle diff {worst:.2e}, 3-4-5 exact={exact}, {elapsed:.2f}s")


def _random_histories(rng, cfg, t):
    """Neighbor tracks on a 1/64 m lattice so translations stay exact."""
    target = rng.integers(-640, 640, size=2) / 64
    hist, frames = {}, {}
    for ped in rng.choice(1000, size=int(rng.integers(0, 7)), replace=False):
        n = int(rng.integers(1, cfg.k + 1))
        fr = np.sort(rng.choice(np.arange(t - cfg.k, t), size=n, replace=False))
        hist[int(ped)] = target + rng.integers(-640, 640, size=(n, 2)) / 64
        frames[int(ped)] = fr
    return target, hist, frames


def _all_methods(target, hist, frames, cfg, t):
    return (
        rasterize_method1([h[-1] for h in hist.values()], target, cfg).cells,
        rasterize_method2(hist, target, cfg).cells,
        rasterize_method3(hist, target, cfg, frames, t).cells,
    )


def test_criterion_2_rasterizer(verdict):
    t0 = time.perf_counter()
    cfg = GridConfig()
    origin = np.array([1.5, -2.25])
    centered = rasterize_method1([origin], origin, cfg).cells
    ones = int((centered == 1.0).sum())
    t = 50
    stamps = []
    for j in range(t - 1, t - 5, -1):
        g = rasterize_method3({1: origin[None]}, origin, cfg, {1: np.array([j])}, t).cells
        stamps.append(float(g.max()))
    goldens = ones == 121 and centered.sum() == 121 and stamps == [1.0, 0.8, 0.6, 0.4]
    goldens = goldens and [recency_value(j, t, 4) for j in range(t - 1, t - 5, -1)] == [1.0, 0.8, 0.6, 0.4]

    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        target, hist, frames = _random_histories(rng, cfg, t)
        ref = _all_methods(target, hist, frames, cfg, t)
        order = list(hist)
        rng.shuffle(order)
        perm = _all_methods(target, {p: hist[p] for p in order}, {p: frames[p] for p in order}, cfg, t)
        shift = rng.integers(-100, 100, size=2).astype(float)
        moved = _all_methods(target + shift, {p: h + shift for p, h in hist.items()}, frames, cfg, t)
        for a, b, c in zip(ref, perm, moved):
            bad += not (np.array_equal(a, b) and np.array_equal(a, c))
    elapsed = time.perf_counter() - t0
    ok = goldens and bad == 0 and elapsed < 10.0
    verdict(2, ok, f"121 ones={ones == 121}, M3 stamps {stamps}, {bad} invariance violations, {elapsed:.1f}s")


def _layer_errors(rng):
    errs = {}

    def lin(x, W, b):
        y, c = L.linear_forward(x, W, b)
        return y, lambda dy: L.linear_backward(dy, c, W)

    errs["linear"] = check_function(lin, [rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 6)), rng.normal(size=6)], rng)

    def relu(x):
        y, c = L.relu_forward(x)
        return y, lambda dy: (L.relu_backward(dy, c),)

    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep finite differences away from the kink
    errs["relu"] = check_function(relu, [x], rng)

    def ln(x, g, b):
        y, c = L.layer_norm_forward(x, g, b)
        return y, lambda dy: L.layer_norm_backward(dy, c)

    errs["layer_norm"] = check_function(ln, [rng.normal(size=(3, 4, 8)), rng.normal(size=8), rng.normal(size=8)], rng)

    def attn(Q, K, V):
        y, c = L.attention_forward(Q, K, V)
        return y, lambda dy: L.attention_backward(dy, c)

    errs["attention"] = check_function(attn, list(rng.normal(size=(3, 2, 5, 4))), rng)

    mha_names = ["Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo"]

    def mha(x, *ps):
        p = dict(zip(mha_names, ps))
        y, c = L.mha_forward(x, p, 8)

        def bw(dy):
            dx, g = L.mha_backward(dy, c, p, 8)
            return (dx, *[g[n] for n in mha_names])

        return y, bw

    vals = [rng.normal(size=(16, 16)) * 0.3 if n[0] == "W" else rng.normal(size=16) * 0.1 for n in mha_names]
    errs["multi_head_attention"] = check_function(mha, [rng.normal(size=(2, 5, 16)), *vals], rng)

    ffn_names = ["W1", "b1", "W2", "b2"]

    def ffn(x, *ps):
        p = dict(zip(ffn_names, ps))
        y, c = L.ffn_forward(x, p)

        def bw(dy):
            dx, g = L.ffn_backward(dy, c, p)
            return (dx, *[g[n] for n in ffn_names])

        return y, bw

    vals = [rng.normal(size=(8, 16)), rng.normal(size=16), rng.normal(size=(16, 8)), rng.normal(size=8)]
    errs["ffn"] = check_function(ffn, [rng.normal(size=(2, 3, 8)), *vals], rng)

    enc = {k[len("traj.enc."):]: v + rng.normal(scale=0.1, size=v.shape)
           for k, v in init_params(SMALL, 3).tensors.items() if k.startswith("traj.enc.")}
    names = sorted(enc)

    def layer(x, *ps):
        p = dict(zip(names, ps))
        y, c = L.encoder_stack_forward(x, p, 1, 8)

        def bw(dy):
            dx, g = L.encoder_stack_backward(dy, c, p, 8)
            return (dx, *[g[n] for n in names])

        return y, bw

    errs["encoder_layer"] = check_function(layer, [rng.normal(size=(2, 4, 8)), *[enc[n] for n in names]], rng)
    return errs


def test_criterion_3_gradients(verdict):
    t0 = time.perf_counter()
    errs = _layer_errors(np.random.default_rng(33))
    errs["full_small_model"] = max(check_model(SMALL, seed=5).values())
    elapsed = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    ok = max(errs.values()) < 1e-4 and elapsed < 60.0
    verdict(3, ok, f"worst rel err {errs[worst_name]:.2e} ({worst_name}) over {len(errs)} checks, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_4_overfit(verdict):
    t0 = time.perf_counter()
    windows = extract_all(simulate_corpus(7, 4), stride=3)[:10]
    grid = GridConfig()
    cfg = TrainConfig(grid=grid, model=model_config_for(grid), **OVERFIT)
    data = prepare(windows, cfg.input_form, cfg.obstacle_method, grid)
    snapshot = {}

    def keep(epoch, value, params):
        if epoch == 3:
            snapshot["params"] = params.copy()

    result = fit(cfg, data, on_epoch=keep)
    train_ade = evaluate_windows(result.params, windows, cfg).ade
    replay = fit(replace(cfg, epochs=3), data)
    deterministic = replay.losses == result.losses[:3] and replay.params.equals(snapshot["params"])
    elapsed = time.perf_counter() - t0
    ok = len(windows) == 10 and train_ade < 0.05 and deterministic and elapsed < 600
    verdict(4, ok, f"training ADE {train_ade:.4f} m after {cfg.epochs} epochs, deterministic={deterministic}, {elapsed:.0f}s")


def test_criterion_5_latency(verdict):
    t0 = time.perf_counter()
    params = init_params(model_config_for(GridConfig()), 0)
    lengths = [12, 16, 20, 24, 28, 32]
    rows = latency_bench(params, lengths, repeats=30, warmup=5)
    one = [r.one_shot for r in rows]
    ar = [r.autoregressive for r in rows]
    ratio = max(one) / min(one)
    increasing = all(b > a for a, b in zip(ar, ar[1:]))
    elapsed = time.perf_counter() - t0
    ok = ratio < 1.2 and increasing and elapsed < 300
    detail = (
        f"one-shot max/min {ratio:.3f}, stepwise ms "
        + "/".join(f"{v * 1e3:.2f}" for v in ar)
        + f" increasing={increasing}, {elapsed:.0f}s"
    )
    verdict(5, ok, detail)


@pytest.mark.slow
def test_criterion_6_directional_ablation(verdict):
    t0 = time.perf_counter()
    grid = GridConfig()
    model = model_config_for(grid, **ABLATION_MODEL)
    wins, notes = 0, []
    for seed in range(5):
        scenes = simulate_corpus(seed, 500)
        base = TrainConfig(seed=seed, grid=grid, model=model, **ABLATION)
        report = ablate([("None", "AdjacentDiff"), ("M3", "AdjacentDiff")], scenes[:400], scenes[400:], base)
        none, m3 = report.rows[0].ade, report.rows[1].ade
        wins += m3 <= none
        notes.append(f"{m3:.3f}/{none:.3f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and elapsed < 1800
    verdict(6, ok, f"M3<=None in {wins}/5 seeds (M3/None ADE {', '.join(notes)}), {elapsed:.0f}s")


def _stats(path, *extra):
    import io

    out, err = io.StringIO(), io.StringIO()
    code = main(["stats", *extra, str(path)], out, err)
    return code, out.getvalue()


def test_criterion_7_pearson_toy(verdict):
    t0 = time.perf_counter()
    code, out = _stats(DATA / "correlated.txt")
    r = float(out.split("\t")[1])
    elapsed = time.perf_counter() - t0
    verdict(7, code == 0 and r == 1.0 and elapsed < 1.0, f"toy scene r={r!r}, {elapsed:.2f}s")


@pytest.mark.skipif(not os.environ.get("OBSFORMER_ETH"), reason="set OBSFORMER_ETH to a real ETH scene file")
def test_criterion_7_pearson_eth(verdict):
    path = Path(os.environ["OBSFORMER_ETH"])
    # frame numbering varies between distributions; r does not depend on it
    code, out = _stats(path, "--frame-stride", "1")
    r = float(out.split("\t")[1])
    verdict(7, code == 0 and abs(r - 0.12) <= 0.05, f"ETH r={r!r} (target 0.12 +/- 0.05)")


def test_criterion_8_round_trips(verdict, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    # dyadic tracks: every partial sum is representable, so decoding is exact
    traj_ok = True
    for _ in range(200):
        traj = rng.integers(-4096, 4096, size=(int(rng.integers(2, 21)), 2)) / 256
        seq = encode(traj, "AdjacentDiff")
        traj_ok &= np.array_equal(decode_adjacent_diffs(traj[0], seq.values), traj[1:])
    patch_ok = True
    for _ in range(50):
        cells = rng.random((64, 64))
        patch_ok &= np.array_equal(patches_to_grid(grid_to_patches(cells, 16), 16), cells)
    ckpt_ok = True
    for seed in range(3):
        params = init_params(SMALL, seed)
        a, b = tmp_path / f"a{seed}.ckpt", tmp_path / f"b{seed}.ckpt"
        save_checkpoint(params, a, {"seed": seed})
        loaded, extra = load_checkpoint(a)
        save_checkpoint(loaded, b, extra)
        ckpt_ok &= loaded.equals(params) and a.read_bytes() == b.read_bytes() and extra == {"seed": seed}
    elapsed = time.perf_counter() - t0
    ok = traj_ok and patch_ok and ckpt_ok and elapsed < 10.0
    verdict(8, ok, f"diffs exact={traj_ok}, patches exact={patch_ok}, checkpoint bitwise={ckpt_ok}, {elapsed:.1f}s")


def test_real_scene_loader_is_usable_for_pearson():
    # guard for criterion 7: the bundled toy scene parses with default settings
    assert scene_pearson(load_scene(DATA / "correlated.txt")) == 1.0
