"""Acceptance suite: one test per release criterion, one verdict line each.

Each test prints ``criterion N: PASS/FAIL - details`` on the real stdout
(bypassing capture) so a full run shows the scorecard inline. Thresholds
are fixed here and are not tuned by the tests.
"""

import os
import sys
import time
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_composite, line_intrinsics, single_pixel_ray_maps
from test_rasterizer import run_gradient_check

from raysplat.config import load_run_config
from raysplat.datasets import RgbdFrame
from raysplat.gaussians import init_gaussians
from raysplat.geometry import Intrinsics, Pose, pose_difference, se3_exp
from raysplat.mapper import MapperConfig, map_frame
from raysplat.metrics import ate_rmse, psnr
from raysplat.pipeline import run_slam, track_sequence
from raysplat.rasterizer import splat
from raysplat.ssim import ssim
from raysplat.synthetic import (
    make_corridor_scene,
    make_desk_scene,
    make_lateral_scene,
    render_sequence,
    sample_plane_box_points,
)
from raysplat.tracker import (
    GlobalGeomSet,
    TrackerConfig,
    gicp_align,
    local_set_from_points,
    update_global_set,
)

_REPO = Path(__file__).resolve().parent.parent


def _verdict(capsys, num: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_01_gicp_oracle(capsys):
    """Plane+box clouds, 5k points, 5 mm noise, offsets up to 5 deg / 10 cm:
    identity-initialized registration recovers the pose on all 20 seeds."""
    cfg = TrackerConfig()
    worst_rot = worst_t = worst_s = 0.0
    successes = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        world = sample_plane_box_points(5000, seed=seed) + rng.normal(0.0, 0.005, (5000, 3))
        surface = sample_plane_box_points(5000, seed=seed + 1000)

        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, np.deg2rad(5.0))
        shift = rng.normal(size=3)
        shift = shift / np.linalg.norm(shift) * rng.uniform(0.0, 0.10)
        truth = Pose(se3_exp(np.concatenate([axis * angle, np.zeros(3)])).rotation, shift)
        cam = truth.inverse().apply(surface + rng.normal(0.0, 0.005, (5000, 3)))

        t0 = time.perf_counter()
        local = local_set_from_points(cam, k_c=cfg.neighbor_count, scale_mode=cfg.scale_mode)
        global_set = GlobalGeomSet(cfg.voxel_size)
        update_global_set(
            global_set,
            local_set_from_points(world, k_c=cfg.neighbor_count, scale_mode=cfg.scale_mode),
            Pose.identity(),
        )
        recovered, diag = gicp_align(local, global_set, Pose.identity(), cfg)
        elapsed = time.perf_counter() - t0

        rot_err, t_err = pose_difference(recovered, truth)
        worst_rot = max(worst_rot, rot_err)
        worst_t = max(worst_t, t_err)
        worst_s = max(worst_s, elapsed)
        if not diag.failed and rot_err < np.deg2rad(0.5) and t_err < 0.005 and elapsed < 1.0:
            successes += 1
    _verdict(
        capsys,
        1,
        successes == 20,
        f"{successes}/20 seeds, worst rot {np.rad2deg(worst_rot):.3f} deg, "
        f"worst t {worst_t * 1000:.2f} mm, worst time {worst_s:.2f} s",
    )


def test_criterion_02_tracking_variant_ordering(capsys):
    """Distribution-to-surface matching with ellipse scale normalization beats
    both the flat-plane scales and plain point-to-point on a noisy sweep."""
    scene = make_desk_scene(n_frames=20).with_noise(depth_sigma=0.01)
    seq = render_sequence(scene)
    ates = {}
    for name, kw in (
        ("ellipse", dict(metric_mode="point2surf", scale_mode="ellipse")),
        ("plane", dict(metric_mode="point2surf", scale_mode="plane")),
        ("point2point", dict(metric_mode="point2point", scale_mode="none")),
    ):
        poses, _ = track_sequence(seq, TrackerConfig(**kw))
        ates[name] = ate_rmse(poses, seq.gt_poses).ate_rmse
    ok = ates["ellipse"] < ates["plane"] and ates["ellipse"] < ates["point2point"]
    _verdict(
        capsys,
        2,
        ok,
        "ATE mm: ellipse {:.2f} < plane {:.2f} and < point2point {:.2f}".format(
            ates["ellipse"] * 1000, ates["plane"] * 1000, ates["point2point"] * 1000
        ),
    )


def test_criterion_03_gradient_fidelity(capsys):
    """Analytic splat gradients match central differences on 200 random
    three-Gaussian scenes for every learnable attribute."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        worst = max(worst, run_gradient_check(rng, h_scale=1e-5))
    _verdict(capsys, 3, worst < 1e-3, f"max relative error {worst:.2e} over 200 draws")


def test_criterion_04_compositing_oracle(capsys):
    """Front-to-back compositing is exact against a brute-force evaluator for
    every opacity combination of up to 4 Gaussians per ray."""
    levels = [round(0.1 * k, 1) for k in range(1, 10)]
    depths = [1.0, 1.5, 2.0, 2.5]
    palette = [(0.9, 0.2, 0.1), (0.2, 0.8, 0.3), (0.1, 0.3, 0.9), (0.7, 0.7, 0.2)]
    worst = 0.0
    rays = 0
    for k in range(1, 5):
        combos = list(product(levels, repeat=k))
        for lo in range(0, len(combos), 729):
            chunk = combos[lo : lo + 729]
            w = len(chunk)
            intr = line_intrinsics(w)
            maps = single_pixel_ray_maps(
                [[combo[j] for combo in chunk] for j in range(k)],
                [[palette[j]] * w for j in range(k)],
                depths[:k],
                intr,
            )
            out = splat(maps, Pose.identity(), intr)
            for col, combo in enumerate(chunk):
                c_ref, d_ref, a_ref = brute_composite(combo, palette[:k], depths[:k])
                worst = max(
                    worst,
                    float(np.max(np.abs(out.color[0, col] - c_ref))),
                    abs(float(out.depth[0, col]) - d_ref),
                    abs(float(out.alpha[0, col]) - a_ref),
                )
            rays += w
    _verdict(capsys, 4, worst <= 1e-12, f"max abs deviation {worst:.2e} over {rays} rays")


def _chain_mean_psnr(seq, cfg: MapperConfig) -> float:
    """Mean PSNR of each frame's composite render at its own view, maps fit
    in sequence order with the previous frames as fixed neighbors."""
    maps: list = []
    values = []
    for i, frame in enumerate(seq.frames):
        pose = seq.gt_poses[i]
        neighbors = [
            (seq.frames[j], seq.gt_poses[j], maps[j])
            for j in range(max(0, i - cfg.neighbor_count), i)
        ]
        fitted, _ = map_frame(frame, pose, neighbors, cfg, seed=i)
        maps.append(fitted)
        rendered = splat([fitted] + [n[2] for n in neighbors], pose, frame.intrinsics)
        values.append(psnr(rendered.color, frame.color))
    return float(np.mean(values))


def test_criterion_05_learned_offsets_beat_frozen(capsys):
    """With 1 cm corruption on 30% of depth pixels, maps with learnable depth
    offsets render at least 0.3 dB better than offsets frozen at zero."""
    scene = make_lateral_scene(n_frames=5).with_noise(corrupt_fraction=0.3, corrupt_magnitude=0.01)
    seq = render_sequence(scene)
    cfg = MapperConfig(mapping_iters=60)
    learned = _chain_mean_psnr(seq, cfg)
    frozen = _chain_mean_psnr(seq, replace(cfg, offset_frozen=True))
    gap = learned - frozen
    _verdict(
        capsys,
        5,
        gap >= 0.3,
        f"PSNR learned {learned:.2f} dB vs frozen {frozen:.2f} dB, gap {gap:.2f} dB (>= 0.3)",
    )


def test_criterion_06_noise_fraction_robustness(capsys):
    """Corrupting 10%-40% of depth pixels leaves single-frame fit quality
    within a 0.5 dB band of the clean fit."""
    cfg = MapperConfig(mapping_iters=60)
    values = {}
    for fraction in (0.0, 0.1, 0.2, 0.3, 0.4):
        scene = make_corridor_scene(n_frames=1).with_noise(
            corrupt_fraction=fraction, corrupt_magnitude=0.01
        )
        seq = render_sequence(scene)
        frame, pose = seq.frames[0], seq.gt_poses[0]
        fitted, _ = map_frame(frame, pose, [], cfg, seed=0)
        values[fraction] = psnr(splat([fitted], pose, frame.intrinsics).color, frame.color)
    spread = max(values.values()) - min(values.values())
    _verdict(
        capsys,
        6,
        spread <= 0.5,
        "PSNR by corrupt fraction "
        + ", ".join(f"{f:.0%}: {v:.2f}" for f, v in values.items())
        + f"; spread {spread:.3f} dB (<= 0.5)",
    )


def test_criterion_07_end_to_end_corridor(capsys, tmp_path):
    """Full run on the 10-frame corridor preset: ATE under 1 cm, mean PSNR
    over 30 dB, SSIM at least 0.95, inside five minutes of wall clock."""
    cfg = load_run_config(
        _REPO / "configs" / "corridor.txt", overrides=[f"output_dir={tmp_path / 'run'}"]
    )
    t0 = time.perf_counter()
    result = run_slam(cfg)
    wall = time.perf_counter() - t0
    m = result.metrics
    ok = (
        m["ate_rmse"] < 0.01
        and m["mean_psnr"] > 30.0
        and m["mean_ssim"] >= 0.95
        and wall < 300.0
        and not result.failed_frames
    )
    _verdict(
        capsys,
        7,
        ok,
        f"ATE {m['ate_rmse'] * 1000:.3f} mm (< 10), PSNR {m['mean_psnr']:.2f} dB (> 30), "
        f"SSIM {m['mean_ssim']:.3f} (>= 0.95), wall {wall:.0f} s (< 300)",
    )


def test_criterion_08_metric_sanity(capsys):
    """ATE alignment invariances, SSIM self-identity, and the depth/focal
    radius initialization hold to their stated precision."""
    rng = np.random.default_rng(5)
    gt = [se3_exp(rng.uniform(-1, 1, 6) * np.r_[0.3, 0.3, 0.3, 1, 1, 1]) for _ in range(25)]
    est = [se3_exp(rng.normal(0, 0.02, 6)).compose(p) for p in gt]
    base = ate_rmse(est, gt).ate_rmse
    g = se3_exp([0.4, -0.2, 0.3, 2.0, -1.0, 0.5])
    both = ate_rmse([g.compose(p) for p in est], [g.compose(p) for p in gt]).ate_rmse
    alone = ate_rmse([g.compose(p) for p in est], gt).ate_rmse
    ate_ok = abs(both - base) < 1e-9 and abs(alone - base) < 1e-9

    img = rng.uniform(0, 1, (48, 64, 3))
    ssim_ok = abs(ssim(img, img) - 1.0) < 1e-6

    intr = Intrinsics(fx=77.0, fy=77.0, cx=15.5, cy=11.5, width=32, height=24)
    depth = rng.uniform(0.4, 4.0, (24, 32))
    frame = RgbdFrame(
        color=np.zeros((24, 32, 3)),
        depth=depth.astype(np.float32),
        valid_mask=np.ones((24, 32), dtype=bool),
        intrinsics=intr,
        timestamp=0.0,
        index=0,
    )
    fitted = init_gaussians(frame, Pose.identity(), base_depth=depth)
    radius_dev = float(np.max(np.abs(fitted.radius / (depth / intr.fx) - 1.0)))
    radius_ok = radius_dev < 1e-14

    _verdict(
        capsys,
        8,
        ate_ok and ssim_ok and radius_ok,
        f"ATE invariance dev {max(abs(both - base), abs(alone - base)):.1e} (< 1e-9), "
        f"ssim(x,x) err {abs(ssim(img, img) - 1.0):.1e} (< 1e-6), "
        f"radius init rel dev {radius_dev:.1e}",
    )


def test_criterion_09_tum_reproduction(capsys):
    """Optional real-data check, skipped without a local TUM fr3/office copy.
    See scripts/reproduce_tum.py for the standalone version."""
    root = os.environ.get("RAYSPLAT_TUM_ROOT", "")
    if not root or not (Path(root) / "rgb.txt").exists():
        with capsys.disabled():
            print("criterion 9: SKIP - set RAYSPLAT_TUM_ROOT to a TUM fr3/office copy to enable")
        pytest.skip("TUM dataset not available")
    sys.path.insert(0, str(_REPO / "scripts"))
    from reproduce_tum import run as run_tum

    ate = run_tum(Path(root))
    _verdict(capsys, 9, ate <= 0.04, f"ATE {ate * 100:.2f} cm (<= 4.0 cm, 2x of 2.0)")
