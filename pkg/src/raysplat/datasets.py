"""RGBD sequence loading, depth hole filling, and trajectory file IO.

Two on-disk layouts are supported:

* the TUM RGBD layout (``rgb.txt`` / ``depth.txt`` / ``groundtruth.txt``
  index files with timestamped image paths, 16-bit depth PNGs at 1/5000 m),
* a generic layout with ``color/%06d.png``, ``depth/%06d.png``, an
  ``intrinsics.txt`` key=value file (keys: fx, fy, cx, cy, width, height,
  depth_scale) and an optional ``poses.txt`` in trajectory format.

Trajectory files use one ``timestamp tx ty tz qx qy qz qw`` line per pose.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from .geometry import Intrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion

TUM_DEPTH_SCALE = 5000.0
TUM_MAX_TIME_GAP = 0.02

# Factory calibrations for the TUM Freiburg sensors; used when the sequence
# directory name identifies the sensor and no intrinsics are given.
_FREIBURG_INTRINSICS = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
}
_TUM_DEFAULT_INTRINSICS = (525.0, 525.0, 319.5, 239.5)


class DatasetError(RuntimeError):
    pass


@dataclass
class RgbdFrame:
    """One color+depth observation. ``depth`` is metric, 0 marks invalid."""

    color: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    intrinsics: Intrinsics
    timestamp: float
    index: int

    def __post_init__(self):
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3):
            raise ValueError("color and depth resolutions differ")
        if self.valid_mask.shape != (h, w):
            raise ValueError("valid_mask resolution differs from depth")


@dataclass
class RgbdSequence:
    frames: list[RgbdFrame]
    intrinsics: Intrinsics
    gt_poses: list[Pose] | None = None
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.frames)


def _read_color(path: Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _read_depth(path: Path, depth_scale: float) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.uint16)
    return arr.astype(np.float32) / depth_scale


def write_color_png(path: Path, color: np.ndarray) -> None:
    """Write a [0, 1] float color image as 8-bit PNG."""
    arr = np.clip(np.asarray(color), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def write_depth_png(path: Path, depth: np.ndarray, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    """Write metric depth as 16-bit PNG scaled by ``depth_scale`` (clipped at uint16 range)."""
    arr = np.clip(np.asarray(depth, dtype=np.float64) * depth_scale + 0.5, 0.0, 65535.0)
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _decimate_frame(color, depth, stride: int):
    if stride <= 1:
        return color, depth
    return color[::stride, ::stride], depth[::stride, ::stride]


def _decimate_intrinsics(intr: Intrinsics, stride: int, height: int, width: int) -> Intrinsics:
    if stride <= 1:
        return intr
    return Intrinsics(
        fx=intr.fx / stride,
        fy=intr.fy / stride,
        cx=intr.cx / stride,
        cy=intr.cy / stride,
        width=width,
        height=height,
        depth_scale=intr.depth_scale,
    )


def _read_tum_list(path: Path) -> list[tuple[float, str]]:
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        entries.append((float(parts[0]), parts[1]))
    entries.sort(key=lambda e: e[0])
    return entries


def _read_tum_trajectory_rows(path: Path) -> np.ndarray:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise DatasetError(f"malformed trajectory line in {path}: {line!r}")
        rows.append(vals)
    if not rows:
        raise DatasetError(f"no poses in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    return arr[np.argsort(arr[:, 0])]


def _interpolate_gt(gt: np.ndarray, timestamps: np.ndarray) -> list[Pose]:
    """Interpolate ground truth to the query timestamps.

    Rotations are slerped, translations interpolated linearly. Queries
    outside the covered time range clamp to the nearest end.
    """
    ts = gt[:, 0]
    quats = gt[:, 4:8]
    rots = Rotation.from_quat(quats)
    slerp = Slerp(ts, rots)
    q = np.clip(timestamps, ts[0], ts[-1])
    rq = slerp(q)
    poses = []
    for i, t in enumerate(q):
        trans = np.array(
            [np.interp(t, ts, gt[:, 1]), np.interp(t, ts, gt[:, 2]), np.interp(t, ts, gt[:, 3])]
        )
        poses.append(Pose(rq[i].as_matrix(), trans))
    return poses


def tum_intrinsics_for(root: Path) -> Intrinsics:
    name = str(root).lower()
    fx, fy, cx, cy = _TUM_DEFAULT_INTRINSICS
    for key, vals in _FREIBURG_INTRINSICS.items():
        if key in name:
            fx, fy, cx, cy = vals
            break
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=640, height=480, depth_scale=TUM_DEPTH_SCALE)


def load_tum_sequence(
    root: str | Path,
    max_frames: int | None = None,
    intrinsics: Intrinsics | None = None,
    stride: int = 1,
) -> RgbdSequence:
    """Load a TUM RGBD sequence directory.

    Color and depth entries are associated by nearest timestamp with a
    maximum gap of 0.02 s, each depth image used at most once. Color frames
    without a depth partner are counted in ``skipped``. When
    ``groundtruth.txt`` is present, a pose is interpolated at every kept
    color timestamp. ``stride`` decimates resolution by integer subsampling.
    """
    root = Path(root)
    rgb_list = _read_tum_list(root / "rgb.txt")
    depth_list = _read_tum_list(root / "depth.txt")
    if intrinsics is None:
        intrinsics = tum_intrinsics_for(root)

    depth_ts = np.array([t for t, _ in depth_list])
    used = np.zeros(len(depth_list), dtype=bool)
    pairs = []
    skipped = 0
    for t_rgb, rgb_path in rgb_list:
        i = int(np.searchsorted(depth_ts, t_rgb))
        best, best_gap = -1, TUM_MAX_TIME_GAP
        for j in (i - 1, i):
            if 0 <= j < len(depth_ts) and not used[j]:
                gap = abs(depth_ts[j] - t_rgb)
                if gap <= best_gap:
                    best, best_gap = j, gap
        if best < 0:
            skipped += 1
            continue
        used[best] = True
        pairs.append((t_rgb, rgb_path, depth_list[best][1]))
        if max_frames is not None and len(pairs) >= max_frames:
            break

    if not pairs:
        raise DatasetError(f"no associable rgb/depth pairs under {root}")

    frames = []
    frame_intr = intrinsics
    for idx, (t, rgb_rel, depth_rel) in enumerate(pairs):
        color = _read_color(root / rgb_rel)
        depth = _read_depth(root / depth_rel, intrinsics.depth_scale)
        color, depth = _decimate_frame(color, depth, stride)
        if idx == 0:
            frame_intr = _decimate_intrinsics(intrinsics, stride, depth.shape[0], depth.shape[1])
        frames.append(
            RgbdFrame(
                color=color,
                depth=depth,
                valid_mask=depth > 0,
                intrinsics=frame_intr,
                timestamp=t,
                index=idx,
            )
        )

    gt_poses = None
    gt_file = root / "groundtruth.txt"
    if gt_file.exists():
        gt = _read_tum_trajectory_rows(gt_file)
        gt_poses = _interpolate_gt(gt, np.array([f.timestamp for f in frames]))

    return RgbdSequence(frames=frames, intrinsics=frame_intr, gt_poses=gt_poses, skipped=skipped)


def read_intrinsics_file(path: str | Path) -> Intrinsics:
    values: dict[str, float] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"bad intrinsics line in {path}: {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = float(val)
    try:
        return Intrinsics(
            fx=values["fx"],
            fy=values["fy"],
            cx=values["cx"],
            cy=values["cy"],
            width=int(values["width"]),
            height=int(values["height"]),
            depth_scale=values.get("depth_scale", TUM_DEPTH_SCALE),
        )
    except KeyError as e:
        raise DatasetError(f"intrinsics file {path} is missing key {e}") from e


def write_intrinsics_file(path: Path, intr: Intrinsics) -> None:
    path.write_text(
        "".join(
            f"{k}={v}\n"
            for k, v in [
                ("fx", intr.fx),
                ("fy", intr.fy),
                ("cx", intr.cx),
                ("cy", intr.cy),
                ("width", intr.width),
                ("height", intr.height),
                ("depth_scale", intr.depth_scale),
            ]
        )
    )


def load_generic_sequence(
    root: str | Path, max_frames: int | None = None, stride: int = 1
) -> RgbdSequence:
    """Load a generic ``color/ depth/ intrinsics.txt [poses.txt]`` directory."""
    root = Path(root)
    intr = read_intrinsics_file(root / "intrinsics.txt")
    color_dir, depth_dir = root / "color", root / "depth"
    if not color_dir.is_dir() or not depth_dir.is_dir():
        raise DatasetError(f"{root} lacks color/ and depth/ directories")

    gt_rows = None
    poses_file = root / "poses.txt"
    if poses_file.exists():
        gt_rows = _read_tum_trajectory_rows(poses_file)

    frames = []
    frame_intr = intr
    idx = 0
    while True:
        cpath = color_dir / f"{idx:06d}.png"
        dpath = depth_dir / f"{idx:06d}.png"
        if not cpath.exists() or not dpath.exists():
            break
        color = _read_color(cpath)
        depth = _read_depth(dpath, intr.depth_scale)
        color, depth = _decimate_frame(color, depth, stride)
        if idx == 0:
            frame_intr = _decimate_intrinsics(intr, stride, depth.shape[0], depth.shape[1])
        t = float(gt_rows[idx, 0]) if gt_rows is not None and idx < len(gt_rows) else idx / 30.0
        frames.append(
            RgbdFrame(
                color=color,
                depth=depth,
                valid_mask=depth > 0,
                intrinsics=frame_intr,
                timestamp=t,
                index=idx,
            )
        )
        idx += 1
        if max_frames is not None and idx >= max_frames:
            break

    if not frames:
        raise DatasetError(f"no frames found under {root}")

    gt_poses = None
    if gt_rows is not None:
        gt_poses = []
        for i in range(len(frames)):
            if i >= len(gt_rows):
                raise DatasetError(f"poses.txt has fewer rows than frames in {root}")
            row = gt_rows[i]
            gt_poses.append(Pose(quaternion_to_rotation(row[4:8]), row[1:4].copy()))

    return RgbdSequence(frames=frames, intrinsics=frame_intr, gt_poses=gt_poses, skipped=0)


def save_sequence_generic(
    root: str | Path, seq: RgbdSequence, depth_scale: float = TUM_DEPTH_SCALE
) -> None:
    """Write a sequence to the generic layout, including poses when known.

    ``depth_scale`` sets the 16-bit PNG quantization and is recorded in the
    written intrinsics file, independent of the in-memory depth_scale.
    """
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics_file(root / "intrinsics.txt", replace(seq.intrinsics, depth_scale=depth_scale))
    for f in seq.frames:
        write_color_png(root / "color" / f"{f.index:06d}.png", f.color)
        depth = np.where(f.valid_mask, f.depth, 0.0)
        write_depth_png(root / "depth" / f"{f.index:06d}.png", depth, depth_scale)
    if seq.gt_poses is not None:
        save_trajectory(root / "poses.txt", seq.gt_poses, [f.timestamp for f in seq.frames])


def inpaint_depth(depth: np.ndarray, valid_mask: np.ndarray, max_iters: int = 200, tol: float = 1e-5) -> np.ndarray:
    """Fill invalid depth pixels by harmonic diffusion from the valid ones.

    Invalid pixels are seeded with their nearest valid value and then
    relaxed by Jacobi sweeps of the grid Laplace equation with the valid
    pixels held fixed, until the largest update drops below ``tol`` meters
    or ``max_iters`` sweeps have run. A fully valid input is returned
    unchanged, which also makes the operation idempotent.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool) & (depth > 0)
    if not valid.any():
        raise ValueError("cannot inpaint a frame with no valid depth")
    if valid.all():
        return depth.copy()

    # seed each hole with its nearest valid neighbor so diffusion starts
    # near the fixed point instead of at zero
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    out = depth[iy, ix]
    out[valid] = depth[valid]

    hole = ~valid
    for _ in range(max_iters):
        padded = np.pad(out, 1, mode="edge")
        avg = 0.25 * (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:])
        delta = np.abs(avg[hole] - out[hole]).max()
        out[hole] = avg[hole]
        if delta < tol:
            break
    return out


def save_trajectory(path: str | Path, poses: list[Pose], timestamps) -> None:
    """Write poses as ``timestamp tx ty tz qx qy qz qw`` rows, 9 significant digits."""
    lines = []
    for t, pose in zip(timestamps, poses):
        q = rotation_to_quaternion(pose.rotation)
        tx, ty, tz = pose.translation
        lines.append(
            f"{t:.9f} {tx:.9g} {ty:.9g} {tz:.9g} {q[0]:.9g} {q[1]:.9g} {q[2]:.9g} {q[3]:.9g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> tuple[list[Pose], np.ndarray]:
    """Read a trajectory file. Quaternions are renormalized on load."""
    rows = _read_tum_trajectory_rows(Path(path))
    poses = [Pose(quaternion_to_rotation(r[4:8]), r[1:4].copy()) for r in rows]
    return poses, rows[:, 0]
