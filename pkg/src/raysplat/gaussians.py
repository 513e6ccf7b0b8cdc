"""Per-pixel Gaussian maps: construction and binary persistence.

A map stores one Gaussian per active pixel of its source frame. Gaussians
have no free 3D position: each sits on its pixel's camera ray at depth
``|base_depth + delta|``, where ``delta`` is a learnable offset. The other
learnable attributes are color, a scalar radius (kept as log) and an
opacity (kept as logit).

File layout (little-endian): 4-byte magic, uint32 version, uint32 height,
uint32 width, int64 frame index, 12 float64 pose entries (rotation
row-major, then translation), then row-major float32 planes in the order
base_depth, delta, radius, opacity_logit, color R, color G, color B, and
finally the active mask as one byte per pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import RgbdFrame
from .geometry import Intrinsics, Pose

MAP_MAGIC = b"RSGM"
MAP_VERSION = 1
_HEADER = struct.Struct("<4sIIIq")


class GaussianMapError(RuntimeError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class PixelGaussianMap:
    frame_index: int
    pose: Pose
    intrinsics: Intrinsics
    base_depth: np.ndarray
    delta: np.ndarray
    color: np.ndarray
    log_radius: np.ndarray
    opacity_logit: np.ndarray
    active_mask: np.ndarray

    def __post_init__(self):
        h, w = self.base_depth.shape
        for name in ("delta", "log_radius", "opacity_logit"):
            if getattr(self, name).shape != (h, w):
                raise ValueError(f"{name} shape differs from base_depth")
        if self.color.shape != (h, w, 3):
            raise ValueError("color must be (H, W, 3)")
        if self.active_mask.shape != (h, w):
            raise ValueError("active_mask shape differs from base_depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.base_depth.shape

    @property
    def radius(self) -> np.ndarray:
        return np.exp(self.log_radius)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def adjusted_depth(self) -> np.ndarray:
        return np.abs(self.base_depth + self.delta)

    def num_active(self) -> int:
        return int(self.active_mask.sum())


def init_gaussians(frame: RgbdFrame, pose: Pose, base_depth: np.ndarray | None = None) -> PixelGaussianMap:
    """Build the initial map for a frame at a fixed pose.

    ``base_depth`` should be hole-free (inpainted or neighbor-completed);
    when omitted the frame's own depth is used and invalid pixels stay
    inactive. Initial attributes: the frame's colors, radius depth/fx so a
    Gaussian's footprint is about one pixel, opacity 0.5, zero offset.
    """
    if base_depth is None:
        base = np.asarray(frame.depth, dtype=np.float64)
    else:
        base = np.asarray(base_depth, dtype=np.float64)
    active = base > 0
    safe = np.where(active, base, 1.0)
    return PixelGaussianMap(
        frame_index=frame.index,
        pose=pose,
        intrinsics=frame.intrinsics,
        base_depth=np.where(active, base, 0.0),
        delta=np.zeros_like(base),
        color=np.asarray(frame.color, dtype=np.float64).copy(),
        log_radius=np.log(safe / frame.intrinsics.fx),
        opacity_logit=np.zeros_like(base),
        active_mask=active,
    )


def save_gaussian_map(path: str | Path, gmap: PixelGaussianMap) -> None:
    h, w = gmap.shape
    pose_vals = np.concatenate([gmap.pose.rotation.reshape(9), gmap.pose.translation])
    planes = np.stack(
        [
            gmap.base_depth,
            gmap.delta,
            gmap.radius,
            gmap.opacity_logit,
            gmap.color[:, :, 0],
            gmap.color[:, :, 1],
            gmap.color[:, :, 2],
        ]
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAP_MAGIC, MAP_VERSION, h, w, gmap.frame_index))
        f.write(pose_vals.astype("<f8").tobytes())
        f.write(planes.tobytes())
        f.write(gmap.active_mask.astype(np.uint8).tobytes())


def load_gaussian_map(path: str | Path, intrinsics: Intrinsics) -> PixelGaussianMap:
    """Read a map written by :func:`save_gaussian_map`.

    The file does not carry intrinsics; the caller supplies them (they are
    recorded once per run). Malformed or truncated files raise
    :class:`GaussianMapError` naming the offending path.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size + 96:
        raise GaussianMapError(f"gaussian map file too short: {path}")
    magic, version, h, w, frame_index = _HEADER.unpack_from(blob, 0)
    if magic != MAP_MAGIC:
        raise GaussianMapError(f"bad magic in gaussian map file: {path}")
    if version != MAP_VERSION:
        raise GaussianMapError(f"unsupported gaussian map version {version} in {path}")
    expected = _HEADER.size + 96 + 7 * 4 * h * w + h * w
    if len(blob) != expected:
        raise GaussianMapError(
            f"gaussian map file {path} has {len(blob)} bytes, expected {expected}"
        )
    off = _HEADER.size
    pose_vals = np.frombuffer(blob, dtype="<f8", count=12, offset=off)
    off += 96
    planes = np.frombuffer(blob, dtype="<f4", count=7 * h * w, offset=off).reshape(7, h, w)
    off += 7 * 4 * h * w
    mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)

    radius = planes[2].astype(np.float64)
    if (radius <= 0).any():
        raise GaussianMapError(f"non-positive radius in gaussian map file: {path}")
    return PixelGaussianMap(
        frame_index=int(frame_index),
        pose=Pose(pose_vals[:9].reshape(3, 3).copy(), pose_vals[9:].copy()),
        intrinsics=intrinsics,
        base_depth=planes[0].astype(np.float64),
        delta=planes[1].astype(np.float64),
        color=np.stack([planes[4], planes[5], planes[6]], axis=-1).astype(np.float64),
        log_radius=np.log(radius),
        opacity_logit=planes[3].astype(np.float64),
        active_mask=mask.astype(bool),
    )
