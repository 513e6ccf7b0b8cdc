"""Trajectory and image-quality metrics, plus the run report writer.

ATE aligns translation tracks with a closed-form rigid (no-scale) Procrustes
fit before taking the RMS residual, so a globally shifted or rotated estimate
scores zero. PSNR and depth L1 are plain formula metrics; SSIM comes from the
windowed kernel shared with the mapping loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Pose
from .ssim import ssim

__all__ = [
    "TrajectoryError",
    "ate_rmse",
    "psnr",
    "depth_l1",
    "ssim",
    "write_metrics_report",
    "read_metrics_summary",
]

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class TrajectoryError:
    ate_rmse: float
    per_frame_errors: list = field(default_factory=list)
    alignment: Pose = field(default_factory=Pose.identity)
    scale: float = 1.0


def _translations(trajectory: Sequence) -> np.ndarray:
    out = np.empty((len(trajectory), 3), dtype=np.float64)
    for i, p in enumerate(trajectory):
        out[i] = p.translation if isinstance(p, Pose) else np.asarray(p, dtype=np.float64).reshape(3)
    return out


def ate_rmse(estimated: Sequence, ground_truth: Sequence) -> TrajectoryError:
    """Absolute trajectory error after rigid alignment of the translations.

    Both arguments are equal-length sequences of poses (or bare translation
    vectors) in matching order. The alignment maps estimated points onto the
    ground truth and excludes scale.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory length mismatch: {len(estimated)} vs {len(ground_truth)}")
    if len(estimated) == 0:
        raise ValueError("empty trajectory")
    est = _translations(estimated)
    gt = _translations(ground_truth)

    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    cov = (gt - mu_g).T @ (est - mu_e) / len(est)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    # proper rotation, not a reflection
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    trans = mu_g - rot @ mu_e

    residuals = gt - (est @ rot.T + trans)
    errors = np.linalg.norm(residuals, axis=1)
    return TrajectoryError(
        ate_rmse=float(np.sqrt(np.mean(errors**2))),
        per_frame_errors=[float(e) for e in errors],
        alignment=Pose(rot, trans),
    )


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def depth_l1(d_a: np.ndarray, d_b: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth difference in meters over the masked pixels."""
    a = np.asarray(d_a, dtype=np.float64)
    b = np.asarray(d_b, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or a.shape != m.shape:
        raise ValueError(f"depth/mask shapes differ: {a.shape}, {b.shape}, {m.shape}")
    if not m.any():
        raise ValueError("empty depth mask")
    return float(np.mean(np.abs(a[m] - b[m])))


def write_metrics_report(output_dir, metrics: Mapping) -> tuple[Path, Path]:
    """Write ``metrics.txt`` (one key=value per line) and ``metrics.json``.

    Nested mappings flatten into dotted keys in the text report; the JSON
    summary keeps the structure. Returns both paths.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def _flatten(prefix: str, obj, lines: list):
        if isinstance(obj, Mapping):
            for k in obj:
                _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], lines)
        elif isinstance(obj, (list, tuple)):
            lines.append(f"{prefix}={json.dumps(list(obj))}")
        elif obj is None:
            lines.append(f"{prefix}=absent")
        elif isinstance(obj, float):
            lines.append(f"{prefix}={obj:.6f}")
        else:
            lines.append(f"{prefix}={obj}")

    lines: list = []
    _flatten("", metrics, lines)

    txt_path = out / "metrics.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(metrics, indent=2, default=float) + "\n")
    return txt_path, json_path


def read_metrics_summary(output_dir) -> dict:
    path = Path(output_dir) / "metrics.json"
    if not path.exists():
        raise FileNotFoundError(f"missing metrics summary: {path}")
    return json.loads(path.read_text())
