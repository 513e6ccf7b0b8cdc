"""Per-frame SLAM orchestration: initialize, track, map, persist, evaluate.

Tracking runs strictly sequentially on the calling thread. Mapping jobs can
run on a bounded worker pool; a frame's map is handed off only through its
future, so a map is always finalized before any later frame uses it as a
mapping neighbor or a render-init reference. With a fixed seed the poses
and persisted artifacts are identical for any worker count.

The end-of-run report is computed from the persisted artifacts (the
quantized trajectory file and the float32 map files), so re-evaluating a
finished run reproduces the in-run numbers exactly.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_text, load_run_config
from .datasets import (
    DatasetError,
    RgbdSequence,
    load_generic_sequence,
    load_trajectory,
    load_tum_sequence,
    read_intrinsics_file,
    save_trajectory,
    write_intrinsics_file,
)
from .gaussians import load_gaussian_map, save_gaussian_map
from .geometry import Pose
from .mapper import map_frame
from .metrics import ate_rmse, depth_l1, psnr, ssim, write_metrics_report
from .rasterizer import splat
from .synthetic import make_preset, render_sequence
from .tracker import (
    GlobalGeomSet,
    TrackerError,
    build_local_set,
    gicp_align,
    init_pose_constant_speed,
    init_pose_render,
    update_global_set,
)

__all__ = [
    "EvalError",
    "FrameRecord",
    "RunResult",
    "run_slam",
    "evaluate_run",
    "track_sequence",
    "map_file_name",
]


class EvalError(RuntimeError):
    pass


def map_file_name(index: int) -> str:
    return f"frame_{index:06d}.bin"


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    status: str = "skipped"  # ok | failed | skipped | resumed
    init_used: str = "none"  # none | constant_speed | render_init | render_fallback
    gicp_iters: int = 0
    gicp_cost: float = math.nan
    inliers: int = 0
    track_seconds: float = 0.0
    map_loss: float = math.nan
    map_seconds: float = 0.0


@dataclass
class RunResult:
    output_dir: Path
    poses: list
    records: list
    metrics: dict
    failed_frames: list = field(default_factory=list)


def track_sequence(seq: RgbdSequence, tcfg) -> tuple[list, list]:
    """Geometry tracking alone, no mapping: poses plus failed frame indices.

    Frame 0 is identity; later frames start from the constant-speed guess.
    Useful when only trajectory quality is being evaluated.
    """
    poses: list[Pose] = []
    failed: list[int] = []
    global_set = GlobalGeomSet(tcfg.voxel_size)
    for i, frame in enumerate(seq.frames):
        guess = (
            Pose.identity()
            if i == 0
            else poses[0]
            if i == 1
            else init_pose_constant_speed(poses[i - 1], poses[i - 2])
        )
        try:
            local = build_local_set(frame, tcfg)
        except TrackerError:
            failed.append(i)
            poses.append(guess)
            continue
        pose = guess
        if i > 0:
            pose, diag = gicp_align(local, global_set, guess, tcfg)
            if diag.failed:
                failed.append(i)
        update_global_set(global_set, local, pose)
        poses.append(pose)
    return poses, failed


def load_sequence(cfg: RunConfig) -> RgbdSequence:
    """Materialize the configured dataset (deterministic for synthetic)."""
    kind, _, preset = cfg.dataset.partition(":")
    if kind == "synthetic":
        kwargs: dict = {"seed": cfg.seed}
        if cfg.max_frames:
            kwargs["n_frames"] = cfg.max_frames
        return render_sequence(make_preset(preset, **kwargs))
    if kind == "tum":
        return load_tum_sequence(
            cfg.dataset_root, max_frames=cfg.max_frames or None, stride=cfg.stride
        )
    return load_generic_sequence(
        cfg.dataset_root, max_frames=cfg.max_frames or None, stride=cfg.stride
    )


def _resume_start(cfg, out, maps_dir, seq, poses, records, global_set, live_maps):
    """Reload persisted poses/maps and rebuild tracking state through them.

    Returns the first frame index still to process. A frame counts as done
    when its trajectory row and (if it has any valid depth) its map file
    both exist, with no gap before it.
    """
    traj_path = out / "trajectory.txt"
    if not traj_path.exists():
        return 0
    loaded, _ = load_trajectory(traj_path)
    done = 0
    for i in range(min(len(loaded), len(seq))):
        mappable = bool(seq.frames[i].valid_mask.any())
        if mappable and not (maps_dir / map_file_name(i)).exists():
            break
        done = i + 1
    for i in range(done):
        poses.append(loaded[i])
        records[i] = FrameRecord(index=i, timestamp=seq.frames[i].timestamp, status="resumed")
        try:
            local = build_local_set(seq.frames[i], cfg.tracker)
            update_global_set(global_set, local, loaded[i])
        except TrackerError:
            pass
    window = max(cfg.mapper.neighbor_count, 1) + 2
    for i in range(max(0, done - window), done):
        path = maps_dir / map_file_name(i)
        if path.exists():
            live_maps[i] = load_gaussian_map(path, seq.intrinsics)
    return done


def run_slam(cfg: RunConfig, seq: RgbdSequence | None = None) -> RunResult:
    """Run the full tracking+mapping loop and persist every artifact.

    Writes into ``cfg.output_dir``: the resolved config, the camera
    intrinsics, ``trajectory.txt`` (rewritten after every tracked frame, so
    an interrupted run can resume), one Gaussian map per frame under
    ``maps/``, a per-frame diagnostics log, and the metrics report.
    Tracking failures are flagged and the run continues with the
    initializer's pose.
    """
    out = Path(cfg.output_dir)
    maps_dir = out / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    if seq is None:
        seq = load_sequence(cfg)
    if len(seq) == 0:
        raise DatasetError("sequence has no frames")
    (out / "config.txt").write_text(config_to_text(cfg))
    write_intrinsics_file(out / "intrinsics.txt", seq.intrinsics)

    tcfg, mcfg = cfg.tracker, cfg.mapper
    timestamps = [f.timestamp for f in seq.frames]
    poses: list[Pose] = []
    records: list = [None] * len(seq)
    failed: list[int] = []
    global_set = GlobalGeomSet(tcfg.voxel_size)
    live_maps: dict = {}
    map_futures: dict[int, Future] = {}
    # jobs older than this can never be needed again (mapping neighbors
    # reach back neighbor_count frames, render init one frame)
    keep_window = max(mcfg.neighbor_count, 1) + 2

    start = 0
    if cfg.resume:
        start = _resume_start(cfg, out, maps_dir, seq, poses, records, global_set, live_maps)

    pool = ThreadPoolExecutor(max_workers=cfg.worker_count) if cfg.worker_count > 1 else None

    def finished_map(j: int):
        fut = map_futures.get(j)
        if fut is not None:
            return fut.result()[1]
        return live_maps.get(j)

    def make_job(i, frame, pose, neighbor_idx):
        def job():
            t0 = time.perf_counter()
            neighbors = []
            for j in neighbor_idx:
                m = finished_map(j)
                if m is not None:
                    neighbors.append((seq.frames[j], m.pose, m))
            try:
                gmap, losses = map_frame(frame, pose, neighbors, mcfg, seed=cfg.seed + i)
            except ValueError:
                return i, None, math.nan, time.perf_counter() - t0
            save_gaussian_map(maps_dir / map_file_name(i), gmap)
            live_maps[i] = gmap
            return i, gmap, (losses[-1] if losses else math.nan), time.perf_counter() - t0

        return job

    try:
        for i in range(start, len(seq)):
            frame = seq.frames[i]
            rec = FrameRecord(index=i, timestamp=frame.timestamp)
            t0 = time.perf_counter()
            if i == 0:
                pose = (
                    seq.gt_poses[0]
                    if (cfg.gt_prior_frame0 and seq.gt_poses)
                    else Pose.identity()
                )
                try:
                    local = build_local_set(frame, tcfg)
                    update_global_set(global_set, local, pose)
                except TrackerError:
                    rec.status = "failed"
                    failed.append(i)
            else:
                guess = poses[0] if i == 1 else init_pose_constant_speed(poses[i - 1], poses[i - 2])
                rec.init_used = "constant_speed"
                if tcfg.init_mode == "render_init":
                    prev_map = finished_map(i - 1)
                    refined, ok = (
                        init_pose_render(
                            frame,
                            prev_map,
                            guess,
                            iters=tcfg.render_init_iters,
                            coverage_min=tcfg.render_coverage_min,
                        )
                        if prev_map is not None
                        else (guess, False)
                    )
                    if ok:
                        guess, rec.init_used = refined, "render_init"
                    else:
                        rec.init_used = "render_fallback"
                try:
                    local = build_local_set(frame, tcfg)
                    pose, diag = gicp_align(local, global_set, guess, tcfg)
                    rec.gicp_iters = diag.iterations
                    rec.gicp_cost = diag.final_cost
                    rec.inliers = diag.inlier_count
                    rec.status = "failed" if diag.failed else "ok"
                    if diag.failed:
                        failed.append(i)
                    update_global_set(global_set, local, pose)
                except TrackerError:
                    pose = guess
                    rec.status = "failed"
                    failed.append(i)
            poses.append(pose)
            rec.track_seconds = time.perf_counter() - t0
            records[i] = rec
            save_trajectory(out / "trajectory.txt", poses, timestamps[: len(poses)])

            neighbor_idx = tuple(range(max(0, i - mcfg.neighbor_count), i))
            job = make_job(i, frame, pose, neighbor_idx)
            if pool is None:
                fut: Future = Future()
                try:
                    fut.set_result(job())
                except BaseException as exc:  # surfaced at collection below
                    fut.set_exception(exc)
            else:
                fut = pool.submit(job)
            map_futures[i] = fut
            for old in [k for k in live_maps if k < i - keep_window]:
                live_maps.pop(old, None)

        for i, fut in map_futures.items():
            _, gmap, loss, secs = fut.result()
            records[i].map_loss = loss
            records[i].map_seconds = secs
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    save_trajectory(out / "trajectory.txt", poses, timestamps[: len(poses)])
    _write_run_log(out / "run.log", records)

    metrics = evaluate_run(out, seq=seq)
    metrics["tracking"] = {
        "failed_frames": failed,
        "status": [r.status for r in records if r is not None],
    }
    write_metrics_report(out, metrics)
    return RunResult(
        output_dir=out, poses=poses, records=records, metrics=metrics, failed_frames=failed
    )


def _write_run_log(path: Path, records) -> None:
    lines = []
    for r in records:
        if r is None:
            continue
        lines.append(
            f"frame={r.index:06d} status={r.status} init={r.init_used} "
            f"gicp_iters={r.gicp_iters} gicp_cost={r.gicp_cost:.6g} inliers={r.inliers} "
            f"map_loss={r.map_loss:.6g} track_s={r.track_seconds:.3f} map_s={r.map_seconds:.3f}"
        )
    path.write_text("\n".join(lines) + "\n")


def _frame_render_metrics(gmap, neighbor_maps, frame, coverage_alpha: float):
    """PSNR/SSIM over all pixels; depth L1 where the sensor and render agree
    on coverage. Rendering happens at the map's own stored pose."""
    out = splat([gmap] + list(neighbor_maps), gmap.pose, frame.intrinsics, normalize_depth=True)
    p = psnr(out.color, frame.color)
    s = ssim(out.color, frame.color)
    mask = frame.valid_mask & (out.alpha > coverage_alpha)
    d = depth_l1(out.depth, frame.depth, mask) if mask.any() else None
    return p, s, d


def evaluate_run(run_dir, seq: RgbdSequence | None = None, max_frames: int = 0) -> dict:
    """Recompute the metrics report from a run directory's artifacts.

    Nothing is re-estimated: poses come from ``trajectory.txt`` and each
    frame's render is composited from its saved map plus the saved maps of
    its mapping-time neighbors. Ground truth, when the dataset has none,
    leaves ``ate_rmse`` as None. Missing artifacts raise :class:`EvalError`
    listing every absent file; corrupted map files raise an error naming
    the file.
    """
    run_dir = Path(run_dir)
    required = [run_dir / "config.txt", run_dir / "intrinsics.txt", run_dir / "trajectory.txt"]
    missing = [str(p) for p in required if not p.exists()]
    if missing:
        raise EvalError("missing run artifacts: " + ", ".join(missing))

    cfg = load_run_config(run_dir / "config.txt")
    if seq is None:
        seq = load_sequence(cfg)
    intr = read_intrinsics_file(run_dir / "intrinsics.txt")
    poses, _ = load_trajectory(run_dir / "trajectory.txt")

    n = min(len(poses), len(seq))
    if max_frames:
        n = min(n, max_frames)
    if n == 0:
        raise EvalError(f"trajectory {run_dir / 'trajectory.txt'} has no poses")

    maps_dir = run_dir / "maps"
    unmapped = [i for i in range(n) if not seq.frames[i].valid_mask.any()]
    expected = [i for i in range(n) if i not in unmapped]
    absent = [str(maps_dir / map_file_name(i)) for i in expected if not (maps_dir / map_file_name(i)).exists()]
    if absent:
        raise EvalError("missing map files: " + ", ".join(absent))

    maps = {i: load_gaussian_map(maps_dir / map_file_name(i), intr) for i in expected}

    n_nb = cfg.mapper.neighbor_count
    per_psnr: list = []
    per_ssim: list = []
    per_depth: list = []
    for i in range(n):
        if i in maps:
            neighbors = [maps[j] for j in range(max(0, i - n_nb), i) if j in maps]
            p, s, d = _frame_render_metrics(
                maps[i], neighbors, seq.frames[i], cfg.mapper.coverage_alpha
            )
        else:
            p = s = d = None
        per_psnr.append(p)
        per_ssim.append(s)
        per_depth.append(d)

    def _mean(values):
        kept = [v for v in values if v is not None]
        return float(np.mean(kept)) if kept else None

    ate = None
    if seq.gt_poses is not None:
        ate = ate_rmse(poses[:n], seq.gt_poses[:n]).ate_rmse

    return {
        "frames": n,
        "ate_rmse": ate,
        "mean_psnr": _mean(per_psnr),
        "mean_ssim": _mean(per_ssim),
        "mean_depth_l1": _mean(per_depth),
        "unmapped_frames": unmapped,
        "per_frame": {"psnr": per_psnr, "ssim": per_ssim, "depth_l1": per_depth},
    }
