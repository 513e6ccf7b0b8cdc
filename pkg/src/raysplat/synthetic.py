"""Procedural RGBD test scenes rendered by exact ray casting.

Scenes are built from rectangles, axis-aligned boxes, and spheres with flat
(optionally checkered) albedo. Depth is the camera-frame z of the first hit,
so a fronto-parallel plane at distance d produces a constant depth image d.
Sensor defects (Gaussian depth noise, per-pixel corruption, dropout) are
applied per frame from a seeded generator, deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import RgbdFrame, RgbdSequence
from .geometry import Intrinsics, Pose, pixel_rays, se3_exp

_Z_NEAR = 0.01


@dataclass(frozen=True)
class Checker:
    """Two-tone checker albedo over world-space cells of size ``cell``."""

    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    cell: float = 0.2


Albedo = "tuple[float, float, float] | Checker"


@dataclass(frozen=True)
class RectPatch:
    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    albedo: object

    def __post_init__(self):
        for name in ("origin", "edge_u", "edge_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: object

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: object

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))


@dataclass(frozen=True)
class NoiseModel:
    """Per-frame sensor defects. All default to off."""

    depth_sigma: float = 0.0
    dropout: float = 0.0
    corrupt_fraction: float = 0.0
    corrupt_magnitude: float = 0.0


@dataclass
class SyntheticScene:
    primitives: list
    trajectory: list[Pose]
    intrinsics: Intrinsics
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def with_noise(self, **kwargs) -> "SyntheticScene":
        return SyntheticScene(
            primitives=self.primitives,
            trajectory=self.trajectory,
            intrinsics=self.intrinsics,
            noise=replace(self.noise, **kwargs),
            seed=self.seed,
        )


def _albedo_at(albedo, pts: np.ndarray) -> np.ndarray:
    if isinstance(albedo, Checker):
        parity = np.floor(pts / albedo.cell).sum(axis=1).astype(np.int64) & 1
        a = np.asarray(albedo.color_a, dtype=np.float64)
        b = np.asarray(albedo.color_b, dtype=np.float64)
        return np.where(parity[:, None] == 0, a, b)
    return np.broadcast_to(np.asarray(albedo, dtype=np.float64), (len(pts), 3)).copy()


def _intersect_rect(prim: RectPatch, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = np.cross(prim.edge_u, prim.edge_v)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(denom) > 1e-12, (prim.origin - origin) @ n / denom, np.inf)
    hit = origin + s[:, None] * dirs
    q = hit - prim.origin
    a = q @ prim.edge_u / (prim.edge_u @ prim.edge_u)
    b = q @ prim.edge_v / (prim.edge_v @ prim.edge_v)
    inside = (a >= 0.0) & (a <= 1.0) & (b >= 0.0) & (b <= 1.0)
    return np.where(inside & (s > _Z_NEAR), s, np.inf)


def _intersect_box(prim: Box, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (prim.lo - origin) / dirs
        t2 = (prim.hi - origin) / dirs
    # rays parallel to a slab: inside iff origin within that slab
    par = np.abs(dirs) < 1e-12
    lo_ok = (origin >= prim.lo) & (origin <= prim.hi)
    t1 = np.where(par, np.where(lo_ok, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(lo_ok, np.inf, -np.inf), t2)
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    s = np.where(t_enter > _Z_NEAR, t_enter, t_exit)
    valid = (t_exit >= np.maximum(t_enter, _Z_NEAR)) & (s > _Z_NEAR)
    return np.where(valid, s, np.inf)


def _intersect_sphere(prim: Sphere, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = origin - prim.center
    a = (dirs * dirs).sum(axis=1)
    b = 2.0 * dirs @ oc
    c = oc @ oc - prim.radius**2
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s1 = (-b - sq) / (2.0 * a)
    s2 = (-b + sq) / (2.0 * a)
    s = np.where(s1 > _Z_NEAR, s1, s2)
    return np.where(ok & (s > _Z_NEAR), s, np.inf)


_INTERSECTORS = {RectPatch: _intersect_rect, Box: _intersect_box, Sphere: _intersect_sphere}


def render_synthetic_frame(scene: SyntheticScene, pose_index: int) -> RgbdFrame:
    """Ray cast one frame of the scene at trajectory entry ``pose_index``.

    Bit-identical for identical (scene, seed, pose_index).
    """
    pose = scene.trajectory[pose_index]
    intr = scene.intrinsics
    dirs_cam = pixel_rays(intr).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T  # world direction, camera z = ray parameter
    origin = pose.translation

    best_s = np.full(len(dirs), np.inf)
    best_prim = np.full(len(dirs), -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        s = _INTERSECTORS[type(prim)](prim, origin, dirs)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_prim[closer] = k

    hit = np.isfinite(best_s)
    depth = np.where(hit, best_s, 0.0)
    color = np.zeros((len(dirs), 3))
    pts = origin + depth[:, None] * dirs
    for k, prim in enumerate(scene.primitives):
        sel = hit & (best_prim == k)
        if sel.any():
            color[sel] = _albedo_at(prim.albedo, pts[sel])

    rng = np.random.default_rng([scene.seed, pose_index])
    nz = scene.noise
    if nz.depth_sigma > 0.0:
        depth = depth + np.where(hit, rng.normal(0.0, nz.depth_sigma, size=len(dirs)), 0.0)
    if nz.corrupt_fraction > 0.0 and nz.corrupt_magnitude != 0.0:
        pick = hit & (rng.random(len(dirs)) < nz.corrupt_fraction)
        sign = np.where(rng.random(len(dirs)) < 0.5, -1.0, 1.0)
        depth = depth + np.where(pick, sign * nz.corrupt_magnitude, 0.0)
    if nz.dropout > 0.0:
        hit = hit & (rng.random(len(dirs)) >= nz.dropout)
    hit = hit & (depth > 0.0)
    depth = np.where(hit, depth, 0.0)

    h, w = intr.height, intr.width
    return RgbdFrame(
        color=color.reshape(h, w, 3).astype(np.float32),
        depth=depth.reshape(h, w).astype(np.float32),
        valid_mask=hit.reshape(h, w),
        intrinsics=intr,
        timestamp=pose_index / 30.0,
        index=pose_index,
    )


def render_sequence(scene: SyntheticScene) -> RgbdSequence:
    frames = [render_synthetic_frame(scene, i) for i in range(len(scene.trajectory))]
    return RgbdSequence(
        frames=frames,
        intrinsics=scene.intrinsics,
        gt_poses=list(scene.trajectory),
        skipped=0,
    )


def _small_intrinsics(width=96, height=72, f=90.0) -> Intrinsics:
    return Intrinsics(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height
    )


def make_corridor_scene(
    n_frames: int = 10, width: int = 96, height: int = 72, seed: int = 0
) -> SyntheticScene:
    """Checker-walled corridor with a forward-moving, slightly yawing camera."""
    # moderate contrast: point-sampled hard edges punish sub-pixel view shifts
    # quadratically in the albedo step, so keep steps well under 0.2
    red = Checker((0.62, 0.38, 0.34), (0.78, 0.56, 0.5), cell=0.27)
    blue = Checker((0.36, 0.44, 0.66), (0.55, 0.62, 0.78), cell=0.23)
    green = Checker((0.42, 0.6, 0.45), (0.6, 0.74, 0.6), cell=0.29)
    gray = Checker((0.48, 0.47, 0.5), (0.63, 0.62, 0.63), cell=0.33)
    amber = Checker((0.72, 0.58, 0.35), (0.85, 0.74, 0.52), cell=0.21)
    prims = [
        RectPatch((-0.7, 0.55, -1.0), (1.4, 0.0, 0.0), (0.0, 0.0, 5.0), gray),
        RectPatch((-0.7, -0.55, -1.0), (1.4, 0.0, 0.0), (0.0, 0.0, 5.0), green),
        RectPatch((-0.7, -0.55, -1.0), (0.0, 1.1, 0.0), (0.0, 0.0, 5.0), red),
        RectPatch((0.7, -0.55, -1.0), (0.0, 1.1, 0.0), (0.0, 0.0, 5.0), blue),
        RectPatch((-0.7, -0.55, 3.2), (1.4, 0.0, 0.0), (0.0, 1.1, 0.0), amber),
        Box((-0.45, 0.25, 1.6), (-0.15, 0.55, 1.9), (0.85, 0.8, 0.3)),
        Box((0.2, 0.33, 2.3), (0.55, 0.55, 2.65), (0.3, 0.75, 0.85)),
    ]
    traj = []
    for i in range(n_frames):
        # video-rate motion: mm-scale steps keep consecutive views within a
        # fraction of a pixel so neighbor maps stay usable as fixed occluders
        twist = [0.0002 * i, 0.0006 * i, 0.0002 * i, 0.0006 * i, 0.0003 * i, 0.006 * i]
        traj.append(se3_exp(twist))
    return SyntheticScene(
        primitives=prims, trajectory=traj, intrinsics=_small_intrinsics(width, height), seed=seed
    )


def make_desk_scene(
    n_frames: int = 20, width: int = 96, height: int = 72, seed: int = 0, step: float = 0.012
) -> SyntheticScene:
    """Tabletop with boxes and a sphere, camera translating and yawing across it."""
    table = Checker((0.55, 0.4, 0.25), (0.85, 0.75, 0.6), cell=0.15)
    wall = Checker((0.6, 0.6, 0.65), (0.85, 0.88, 0.9), cell=0.21)
    prims = [
        RectPatch((-1.4, 0.42, -0.5), (2.8, 0.0, 0.0), (0.0, 0.0, 3.0), table),
        RectPatch((-1.4, -1.0, 2.1), (2.8, 0.0, 0.0), (0.0, 1.42, 0.0), wall),
        Box((-0.28, 0.12, 1.05), (0.02, 0.42, 1.35), (0.8, 0.3, 0.25)),
        Box((0.18, 0.24, 0.8), (0.38, 0.42, 1.0), (0.25, 0.45, 0.8)),
        Box((-0.05, 0.3, 0.62), (0.1, 0.42, 0.74), (0.9, 0.8, 0.3)),
        Sphere((0.32, 0.27, 1.45), 0.15, (0.3, 0.7, 0.4)),
    ]
    traj = []
    for i in range(n_frames):
        yaw = -0.006 * i
        twist = [0.0015 * i, yaw, 0.0, step * i, -0.002 * i, 0.004 * i]
        traj.append(se3_exp(twist))
    return SyntheticScene(
        primitives=prims, trajectory=traj, intrinsics=_small_intrinsics(width, height), seed=seed
    )


def make_flat_scene(n_frames: int = 2, width: int = 96, height: int = 72, seed: int = 0) -> SyntheticScene:
    """Texture-free room corner: constant albedo, geometry only."""
    c = (0.6, 0.6, 0.6)
    prims = [
        RectPatch((-1.5, 0.5, -0.5), (3.0, 0.0, 0.0), (0.0, 0.0, 3.0), c),
        RectPatch((-1.2, -1.2, 1.8), (0.9, 0.0, 0.9), (0.0, 1.7, 0.0), c),
        RectPatch((-0.3, -1.2, 2.7), (2.4, 0.0, 0.0), (0.0, 1.7, 0.0), c),
    ]
    traj = [se3_exp([0.0, 0.002 * i, 0.0, 0.01 * i, 0.0, 0.005 * i]) for i in range(n_frames)]
    return SyntheticScene(
        primitives=prims, trajectory=traj, intrinsics=_small_intrinsics(width, height), seed=seed
    )


def make_lateral_scene(
    n_frames: int = 5,
    width: int = 96,
    height: int = 72,
    seed: int = 0,
    baseline: float = 0.02,
    f: float = 150.0,
) -> SyntheticScene:
    """Close-up textured wall with sideways camera motion (strong parallax)."""
    face = Checker((0.85, 0.3, 0.25), (0.95, 0.9, 0.8), cell=0.05)
    side = Checker((0.25, 0.4, 0.8), (0.85, 0.9, 0.95), cell=0.04)
    floor = Checker((0.4, 0.65, 0.35), (0.9, 0.92, 0.85), cell=0.06)
    prims = [
        RectPatch((-1.5, -1.0, 0.85), (3.0, 0.0, 0.0), (0.0, 2.0, 0.0), face),
        Box((-0.16, -0.3, 0.55), (0.12, 0.05, 0.85), side),
        Box((0.2, -0.02, 0.62), (0.42, 0.22, 0.85), (0.9, 0.75, 0.3)),
        RectPatch((-1.5, 0.28, 0.2), (3.0, 0.0, 0.0), (0.0, 0.0, 1.0), floor),
    ]
    traj = [se3_exp([0.0, 0.0, 0.0, baseline * i, 0.0, 0.0]) for i in range(n_frames)]
    return SyntheticScene(
        primitives=prims,
        trajectory=traj,
        intrinsics=_small_intrinsics(width, height, f=f),
        seed=seed,
    )


SCENE_PRESETS = {
    "corridor": make_corridor_scene,
    "desk": make_desk_scene,
    "flat": make_flat_scene,
    "lateral": make_lateral_scene,
}


def make_preset(name: str, **kwargs) -> SyntheticScene:
    if name not in SCENE_PRESETS:
        raise KeyError(f"unknown synthetic preset {name!r}; have {sorted(SCENE_PRESETS)}")
    return SCENE_PRESETS[name](**kwargs)


def sample_plane_box_points(n: int, seed: int = 0) -> np.ndarray:
    """Points on a plane plus a box sitting on it, for registration tests.

    Roughly 60% of the points sample a 2x2 m ground square, the rest the
    five exposed faces of a 0.6 m box. Returns (n, 3) float64.
    """
    rng = np.random.default_rng(seed)
    n_plane = int(n * 0.6)
    plane = np.column_stack(
        [
            rng.uniform(-1.0, 1.0, n_plane),
            rng.uniform(-1.0, 1.0, n_plane),
            np.zeros(n_plane),
        ]
    )
    lo = np.array([-0.3, -0.25, 0.0])
    hi = np.array([0.3, 0.35, 0.6])
    n_box = n - n_plane
    # area-weighted sampling over the 5 faces that are not flush with the plane
    ext = hi - lo
    faces = [
        (0, lo[0], ext[1] * ext[2]),
        (0, hi[0], ext[1] * ext[2]),
        (1, lo[1], ext[0] * ext[2]),
        (1, hi[1], ext[0] * ext[2]),
        (2, hi[2], ext[0] * ext[1]),
    ]
    areas = np.array([f[2] for f in faces])
    counts = rng.multinomial(n_box, areas / areas.sum())
    box_pts = []
    for (axis, level, _), cnt in zip(faces, counts):
        pts = rng.uniform(lo, hi, size=(cnt, 3))
        pts[:, axis] = level
        box_pts.append(pts)
    return np.vstack([plane] + box_pts)
