#!/usr/bin/env python3
"""Tracking reproduction on TUM fr3/office at quarter resolution.

Downloads are manual: fetch and extract
rgbd_dataset_freiburg3_long_office_household from the TUM RGBD benchmark
site, then run

    python3 scripts/reproduce_tum.py /path/to/rgbd_dataset_freiburg3_long_office_household

The script tracks the first 500 associated frames at stride 2 (quarter the
pixels of VGA) with the geometry-similarity tracker and reports ATE RMSE
against the interpolated ground-truth trajectory. Expected: within 2x of
the 2.0 cm reference. Mapping is skipped; the trajectory does not depend
on it. Runtime is tens of minutes on a desktop CPU.
"""

import argparse
import sys
import time
from pathlib import Path

from raysplat.datasets import load_tum_sequence
from raysplat.metrics import ate_rmse
from raysplat.pipeline import track_sequence
from raysplat.tracker import TrackerConfig


def run(root: Path, max_frames: int = 500, stride: int = 2) -> float:
    seq = load_tum_sequence(root, max_frames=max_frames, stride=stride)
    if seq.gt_poses is None:
        raise SystemExit(f"{root} has no groundtruth.txt; cannot compute ATE")
    t0 = time.perf_counter()
    poses, failed = track_sequence(seq, TrackerConfig())
    ate = ate_rmse(poses, seq.gt_poses).ate_rmse
    print(
        f"frames={len(poses)} failed={len(failed)} ate_rmse={ate * 100:.2f} cm "
        f"({time.perf_counter() - t0:.0f}s)"
    )
    return ate


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=Path, help="extracted TUM sequence directory")
    parser.add_argument("--max-frames", type=int, default=500)
    parser.add_argument("--stride", type=int, default=2)
    args = parser.parse_args(argv)
    if not (args.root / "rgb.txt").exists():
        print(f"no TUM sequence at {args.root} (rgb.txt missing)", file=sys.stderr)
        return 1
    ate = run(args.root, args.max_frames, args.stride)
    return 0 if ate <= 0.04 else 1


if __name__ == "__main__":
    sys.exit(main())
