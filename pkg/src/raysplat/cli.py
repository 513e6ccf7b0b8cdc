"""Command line entry points: run, eval, synth, render.

Exit codes: 0 on success, 1 on any flagged failure (tracking failures
during a run, missing or corrupt artifacts during eval/render), 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_run_config
from .datasets import (
    DatasetError,
    load_trajectory,
    read_intrinsics_file,
    save_sequence_generic,
    write_color_png,
    write_depth_png,
)
from .gaussians import GaussianMapError, load_gaussian_map
from .metrics import write_metrics_report
from .pipeline import EvalError, evaluate_run, run_slam
from .rasterizer import splat
from .synthetic import SCENE_PRESETS, make_preset, render_sequence


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config entry (repeatable, highest precedence)",
    )
    parser.add_argument("--output", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None, help="mapping worker count")
    parser.add_argument("--max-frames", type=int, default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raysplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="track and map a sequence")
    _add_common(p_run)
    p_run.add_argument("--resume", action="store_true", help="continue from persisted state")

    p_eval = sub.add_parser("eval", help="recompute metrics from a finished run")
    p_eval.add_argument("run_dir", help="directory written by `raysplat run`")
    p_eval.add_argument("--max-frames", type=int, default=0)

    p_synth = sub.add_parser("synth", help="write a synthetic preset as a generic dataset")
    p_synth.add_argument("preset", choices=sorted(SCENE_PRESETS))
    p_synth.add_argument("--output", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--max-frames", type=int, default=0, help="frame count (0 = preset default)")

    p_render = sub.add_parser("render", help="re-render saved maps along a pose file")
    p_render.add_argument("run_dir", help="directory containing maps/ and intrinsics.txt")
    p_render.add_argument("--poses", default=None, help="trajectory file (default: the run's)")
    p_render.add_argument("--output", required=True)
    return parser


def _cmd_run(args) -> int:
    cfg = load_run_config(
        args.config,
        overrides=args.overrides,
        output_dir=args.output,
        seed=args.seed,
        worker_count=args.workers,
        max_frames=args.max_frames,
        resume="true" if args.resume else None,
    )
    result = run_slam(cfg)
    m = result.metrics

    def fmt(key, pattern):
        return "absent" if m[key] is None else format(m[key], pattern)

    print(f"frames={m['frames']} ate_rmse={fmt('ate_rmse', '.6f')} "
          f"mean_psnr={fmt('mean_psnr', '.3f')} mean_ssim={fmt('mean_ssim', '.4f')} "
          f"output={result.output_dir}")
    if result.failed_frames:
        print(f"tracking failed on frames: {result.failed_frames}", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    metrics = evaluate_run(args.run_dir, max_frames=args.max_frames)
    txt, _ = write_metrics_report(args.run_dir, metrics)
    print(txt.read_text(), end="")
    return 0


def _cmd_synth(args) -> int:
    kwargs: dict = {"seed": args.seed}
    if args.max_frames:
        kwargs["n_frames"] = args.max_frames
    seq = render_sequence(make_preset(args.preset, **kwargs))
    save_sequence_generic(args.output, seq)
    print(f"wrote {len(seq)} frames to {args.output}")
    return 0


def _cmd_render(args) -> int:
    run_dir = Path(args.run_dir)
    maps_dir = run_dir / "maps"
    intr_path = run_dir / "intrinsics.txt"
    poses_path = Path(args.poses) if args.poses else run_dir / "trajectory.txt"
    missing = [str(p) for p in (intr_path, poses_path) if not p.exists()]
    if not maps_dir.is_dir():
        missing.append(str(maps_dir))
    if missing:
        raise EvalError("missing render inputs: " + ", ".join(missing))
    intr = read_intrinsics_file(intr_path)
    map_files = sorted(maps_dir.glob("frame_*.bin"))
    if not map_files:
        raise EvalError(f"no map files under {maps_dir}")
    maps = [load_gaussian_map(p, intr) for p in map_files]
    poses, _ = load_trajectory(poses_path)

    out = Path(args.output)
    (out / "color").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        rendered = splat(maps, pose, intr, normalize_depth=True)
        write_color_png(out / "color" / f"{i:06d}.png", rendered.color)
        write_depth_png(out / "depth" / f"{i:06d}.png", rendered.depth)
    print(f"rendered {len(poses)} views from {len(maps)} maps to {out}")
    return 0


_COMMANDS = {"run": _cmd_run, "eval": _cmd_eval, "synth": _cmd_synth, "render": _cmd_render}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EvalError, DatasetError, GaussianMapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
