"""Command-line entry point: ``obsformer <subcommand> ...``.

Exit status: 0 on success, 1 on usage errors, 2 on data or configuration errors.
Configuration precedence: ``--set key=value`` > ``--config`` file > defaults.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import load_run_config
from .data import IntegrityError, ParseError, extract_windows, load_scene
from .evaluation import (
    MetricReport,
    ablate,
    config_from_checkpoint,
    evaluate,
    evaluate_linear,
    format_latency,
    latency_bench,
    leave_one_out,
)
from .model import load_checkpoint
from .obstacle import ConfigError, ObstacleMethod, rasterize, write_pgm
from .preprocess import UndefinedCorrelation, scene_pearson
from .training import train

log = logging.getLogger("obsformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _lengths(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="obsformer", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def scene_opts(p):
        p.add_argument("--frame-stride", type=int, default=10, help="raw frames per sample (default 10)")
        p.add_argument("--yx", action="store_true", help="files use column order frame ped y x")

    def config_opts(p):
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("stats", help="x/y Pearson r per scene")
    p.add_argument("scenes", nargs="+", type=Path)
    scene_opts(p)

    p = sub.add_parser("train", help="train and write a checkpoint")
    config_opts(p)
    p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")

    p = sub.add_parser("eval", help="ADE/FDE of a checkpoint on scene files")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--scenes", nargs="+", type=Path, required=True)
    p.add_argument("--linear", action="store_true", help="also report the linear baseline")
    scene_opts(p)

    p = sub.add_parser("bench", help="latency of one-shot vs stepwise decoding")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--lengths", type=_lengths, default=[12, 16, 20, 24, 28, 32])
    p.add_argument("--repeats", type=int, default=30)

    p = sub.add_parser("ablate", help="train/evaluate an obstacle-method x input-form matrix")
    config_opts(p)

    p = sub.add_parser("raster-dump", help="write one window's obstacle grid as PGM")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--method", default="M3", choices=[m.value for m in ObstacleMethod])
    p.add_argument("--out", type=Path, required=True)
    config_opts(p)
    scene_opts(p)
    return parser


def cmd_stats(args, out):
    for path in args.scenes:
        scene = load_scene(path, args.frame_stride, args.yx)
        try:
            r = round(scene_pearson(scene), 6)
            out.write(f"{path.stem}\t{r!r}\n")
        except UndefinedCorrelation:
            out.write(f"{path.stem}\tnan\n")


def cmd_train(args, out):
    run = load_run_config(args.config, args.set)
    if not run.scenes:
        raise ConfigError("no training scenes (set 'scenes')")
    scenes = [load_scene(p, run.frame_stride, run.yx) for p in run.scenes]
    result = train(run.train, scenes, args.out or run.out_dir)
    out.write(f"checkpoint {result.checkpoint}\nloss_log {result.loss_log}\nfinal_loss {result.losses[-1]!r}\n")


def cmd_eval(args, out):
    params, extra = load_checkpoint(args.ckpt)
    cfg = config_from_checkpoint(params, extra)
    datasets = {p.stem: [load_scene(p, args.frame_stride, args.yx)] for p in args.scenes}
    report = evaluate(params, datasets, cfg, extra)
    if args.linear:
        m = params.config
        for name, group in datasets.items():
            windows = [w for sc in group for w in extract_windows(sc, m.T_obs, m.T_pred, 1, cfg.grid.k)]
            report.rows.append(evaluate_linear(windows, name))
    out.write(report.to_csv())


def cmd_bench(args, out):
    params, _ = load_checkpoint(args.ckpt)
    if args.repeats < 30:
        raise UsageError("--repeats must be >= 30")
    out.write(format_latency(latency_bench(params, args.lengths, args.repeats)))


def cmd_ablate(args, out):
    run = load_run_config(args.config, args.set)
    if not run.scenes:
        raise ConfigError("no scenes (set 'scenes')")
    cells = [(m, f) for m in run.ablate_methods for f in run.ablate_forms]
    load = lambda p: load_scene(p, run.frame_stride, run.yx)  # noqa: E731
    report = MetricReport()
    if run.test_scenes:
        report.rows += ablate(cells, [load(p) for p in run.scenes], [load(p) for p in run.test_scenes], run.train, "test").rows
    else:
        named = {p.stem: [load(p)] for p in run.scenes}
        if len(named) < 2:
            raise ConfigError("leave-one-scene-out needs at least two scene files (or set test_scenes)")
        for held_out, tr, te in leave_one_out(named):
            report.rows += ablate(cells, tr, te, run.train, held_out).rows
    out.write(report.to_csv())


def cmd_raster_dump(args, out):
    run = load_run_config(args.config, args.set)
    scene = load_scene(args.scene, args.frame_stride, args.yx)
    m, g = run.train.model, run.train.grid
    windows = extract_windows(scene, m.T_obs, m.T_pred, 1, g.k)
    if not 0 <= args.window < len(windows):
        raise ConfigError(f"window {args.window} out of range (scene has {len(windows)})")
    write_pgm(rasterize(windows[args.window], args.method, g), args.out)
    out.write(f"{args.out}\n")


COMMANDS = {
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "raster-dump": cmd_raster_dump,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        err.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, out)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return 1
    except (ParseError, IntegrityError, ConfigError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        err.write(f"error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
