"""Geometry-similarity tracking.

Each frame's depth is downsampled to a set of oriented geometry Gaussians
(center, eigenbasis, normalized scales, normal), which are registered to a
global world-frame set with a generalized ICP whose residuals are weighted
by the combined covariances of both endpoints. The global set grows by
voxel-gated insertion so revisited surface is not duplicated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .datasets import RgbdFrame
from .geometry import Pose, se3_exp, sym_eigh3_batch

SCALE_MODES = ("ellipse", "plane", "none")
METRIC_MODES = ("point2surf", "point2point")
INIT_MODES = ("constant_speed", "render_init")

# covariance eigenvalues are floored at this fraction of the largest one so
# collinear neighborhoods still invert
EIGVAL_FLOOR_REL = 1e-6
PLANE_SCALES = (1.0, 1.0, 1e-3)
MIN_INLIERS = 10
MAX_STEP_HALVINGS = 5


class TrackerError(ValueError):
    pass


@dataclass
class TrackerConfig:
    downsample_ratio: int = 10
    neighbor_count: int = 10
    max_gicp_iters: int = 30
    correspondence_dist_max: float = 0.2
    convergence_eps: float = 1e-5
    scale_mode: str = "ellipse"
    metric_mode: str = "point2surf"
    init_mode: str = "constant_speed"
    voxel_size: float = 0.02
    render_init_iters: int = 10
    render_coverage_min: float = 0.3

    def __post_init__(self):
        if self.downsample_ratio < 1:
            raise TrackerError("downsample_ratio must be >= 1")
        if self.neighbor_count < 4:
            raise TrackerError("neighbor_count must be >= 4")
        if self.scale_mode not in SCALE_MODES:
            raise TrackerError(f"scale_mode must be one of {SCALE_MODES}")
        if self.metric_mode not in METRIC_MODES:
            raise TrackerError(f"metric_mode must be one of {METRIC_MODES}")
        if self.init_mode not in INIT_MODES:
            raise TrackerError(f"init_mode must be one of {INIT_MODES}")


@dataclass
class LocalGeomSet:
    """Oriented geometry Gaussians in the camera frame of one frame."""

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    normals: np.ndarray
    source_frame: int = -1

    def __len__(self) -> int:
        return self.centers.shape[0]

    def covariances(self) -> np.ndarray:
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", self.rotations, s2, self.rotations)


class GlobalGeomSet:
    """World-frame geometry Gaussians with a K-NN index and voxel occupancy.

    At most one member per voxel cell; the spatial index is rebuilt with
    every batch insertion so queries always match the stored members.
    """

    def __init__(self, voxel_size: float = 0.02):
        if voxel_size <= 0:
            raise TrackerError("voxel_size must be positive")
        self.voxel_size = voxel_size
        self.centers = np.empty((0, 3))
        self.rotations = np.empty((0, 3, 3))
        self.scales = np.empty((0, 3))
        self.normals = np.empty((0, 3))
        self._cells: set[tuple[int, int, int]] = set()
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return self.centers.shape[0]

    def _cell_keys(self, centers: np.ndarray) -> np.ndarray:
        return np.floor(centers / self.voxel_size).astype(np.int64)

    def insert(self, centers, rotations, scales, normals) -> int:
        """Insert rows whose voxel cell is free; returns the number added."""
        keys = self._cell_keys(centers)
        keep: list[int] = []
        batch_cells: set[tuple[int, int, int]] = set()
        for i, key in enumerate(map(tuple, keys)):
            if key in self._cells or key in batch_cells:
                continue
            batch_cells.add(key)
            keep.append(i)
        if keep:
            idx = np.array(keep)
            self.centers = np.concatenate([self.centers, centers[idx]])
            self.rotations = np.concatenate([self.rotations, rotations[idx]])
            self.scales = np.concatenate([self.scales, scales[idx]])
            self.normals = np.concatenate([self.normals, normals[idx]])
            self._cells |= batch_cells
            self._tree = cKDTree(self.centers)
        return len(keep)

    def query_nearest(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._tree is None:
            raise TrackerError("global set is empty")
        return self._tree.query(points, k=1)

    def covariances(self, idx: np.ndarray) -> np.ndarray:
        rot = self.rotations[idx]
        s2 = self.scales[idx] ** 2
        return np.einsum("nij,nj,nkj->nik", rot, s2, rot)


def _normalize_scales(scales: np.ndarray, mode: str) -> np.ndarray:
    if mode == "ellipse":
        return scales / np.linalg.norm(scales, axis=1, keepdims=True)
    if mode == "plane":
        return np.broadcast_to(np.array(PLANE_SCALES), scales.shape).copy()
    return scales


def _fit_oriented_gaussians(
    centers: np.ndarray,
    reference: np.ndarray,
    k_c: int,
    scale_mode: str,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenbasis, scales, and origin-facing normal per center.

    Covariances come from each center's k_c Euclidean nearest neighbors in
    ``reference`` (the center itself excluded when present).
    """
    tree = cKDTree(reference)
    _, nn = tree.query(centers, k=k_c + 1)
    nbr = reference[nn[:, 1:]]
    diff = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", diff, diff) / k_c

    rot, vals = sym_eigh3_batch(cov)
    vals = np.maximum(vals, EIGVAL_FLOOR_REL * vals[:, :1])
    scales = _normalize_scales(np.sqrt(vals), scale_mode)

    normals = rot[:, :, 2].copy()
    flip = np.einsum("ni,ni->n", normals, -centers) < 0.0
    normals[flip] *= -1.0
    rot[flip, :, 2] *= -1.0
    rot[flip, :, 1] *= -1.0  # keep det +1 with the normal column flipped
    return rot, scales, normals


def local_set_from_points(
    points: np.ndarray,
    k_c: int = 10,
    scale_mode: str = "ellipse",
    source_frame: int = -1,
) -> LocalGeomSet:
    """Fit oriented Gaussians to a raw camera-frame cloud (one per point)."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < k_c + 1:
        raise TrackerError(f"{points.shape[0]} points, need at least {k_c + 1}")
    rot, scales, normals = _fit_oriented_gaussians(points, points, k_c, scale_mode)
    return LocalGeomSet(
        centers=points.copy(),
        rotations=rot,
        scales=scales,
        normals=normals,
        source_frame=source_frame,
    )


def build_local_set(frame: RgbdFrame, cfg: TrackerConfig) -> LocalGeomSet:
    """Grid-sample valid depth and fit an oriented Gaussian to each sample.

    Covariances come from each sample's Euclidean nearest neighbors among
    all back-projected valid pixels, not only the sampled ones. Normals are
    the least-spread eigenvector, oriented toward the camera.
    """
    k_c = cfg.neighbor_count
    valid = frame.valid_mask
    n_valid = int(valid.sum())
    if n_valid < k_c + 1:
        raise TrackerError(
            f"frame {frame.index}: {n_valid} valid pixels, need at least {k_c + 1}"
        )
    intr = frame.intrinsics
    vs, us = np.nonzero(valid)
    z_all = frame.depth[vs, us].astype(np.float64)
    pts_all = np.stack(
        [(us - intr.cx) / intr.fx * z_all, (vs - intr.cy) / intr.fy * z_all, z_all],
        axis=1,
    )

    r = cfg.downsample_ratio
    grid = np.zeros_like(valid)
    grid[::r, ::r] = True
    sampled = (grid[vs, us]).nonzero()[0]
    if sampled.size == 0:
        raise TrackerError(f"frame {frame.index}: no valid pixels on the sample grid")
    centers = pts_all[sampled]
    rot, scales, normals = _fit_oriented_gaussians(centers, pts_all, k_c, cfg.scale_mode)

    return LocalGeomSet(
        centers=centers,
        rotations=rot,
        scales=scales,
        normals=normals,
        source_frame=frame.index,
    )


def update_global_set(global_set: GlobalGeomSet, local: LocalGeomSet, pose: Pose) -> int:
    """Transform a local set to world and insert non-overlapping members."""
    centers = pose.apply(local.centers)
    rotations = np.einsum("ij,njk->nik", pose.rotation, local.rotations)
    normals = local.normals @ pose.rotation.T
    return global_set.insert(centers, rotations, local.scales.copy(), normals)


@dataclass
class GicpDiagnostics:
    iterations: int = 0
    final_cost: float = float("nan")
    inlier_count: int = 0
    converged: bool = False
    failed: bool = False
    # per accepted iteration: frozen-weight cost before and after the step
    cost_pairs: list[tuple[float, float]] = field(default_factory=list)
    accepted_first: np.ndarray | None = None


def _skew(p: np.ndarray) -> np.ndarray:
    out = np.zeros(p.shape[:-1] + (3, 3))
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def gicp_align(
    local: LocalGeomSet,
    global_set: GlobalGeomSet,
    init: Pose,
    cfg: TrackerConfig,
) -> tuple[Pose, GicpDiagnostics]:
    """Register a local set against the global set starting from ``init``.

    Correspondences are Euclidean-nearest candidates filtered by the
    configured metric; each iteration takes one Gauss-Newton step on the
    combined-covariance quadratic cost with the weights frozen, halving the
    step (at most 5 times) whenever it would increase that cost. Fewer than
    10 accepted correspondences in any iteration aborts and returns
    ``init`` with the failure flag set.
    """
    if len(global_set) == 0:
        raise TrackerError("global set is empty")
    diag = GicpDiagnostics()
    pose = init
    c_local = local.covariances()

    for it in range(cfg.max_gicp_iters):
        pts = pose.apply(local.centers)
        dist, j = global_set.query_nearest(pts)
        b = global_set.centers[j]
        d = b - pts
        if cfg.metric_mode == "point2surf":
            metric = np.abs(np.einsum("ni,ni->n", global_set.normals[j], d))
        else:
            metric = dist
        acc = metric < cfg.correspondence_dist_max
        n_acc = int(acc.sum())
        diag.inlier_count = n_acc
        if it == 0:
            diag.accepted_first = acc.copy()
        if n_acc < MIN_INLIERS:
            diag.failed = True
            return init, diag

        rot = pose.rotation
        c_comb = global_set.covariances(j[acc]) + np.einsum(
            "ij,njk,lk->nil", rot, c_local[acc], rot
        )
        w = np.linalg.inv(c_comb)
        a_w = local.centers[acc]
        b_w = b[acc]

        def cost_at(p: Pose) -> float:
            res = b_w - p.apply(a_w)
            return float(np.einsum("ni,nij,nj->", res, w, res))

        cost_before = cost_at(pose)
        d_acc = d[acc]
        p_acc = pts[acc]
        jac = np.concatenate([_skew(p_acc), -np.broadcast_to(np.eye(3), (n_acc, 3, 3))], axis=2)
        h = np.einsum("nij,nik,nkl->jl", jac, w, jac)
        g = np.einsum("nij,nik,nk->j", jac, w, d_acc)
        try:
            xi = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            xi = np.linalg.lstsq(h, -g, rcond=None)[0]

        candidate = se3_exp(xi).compose(pose)
        halvings = 0
        while cost_at(candidate) > cost_before and halvings < MAX_STEP_HALVINGS:
            xi = 0.5 * xi
            candidate = se3_exp(xi).compose(pose)
            halvings += 1
        cost_after = cost_at(candidate)
        if cost_after > cost_before:
            diag.final_cost = cost_before
            break

        pose = candidate
        diag.iterations += 1
        diag.final_cost = cost_after
        diag.cost_pairs.append((cost_before, cost_after))
        if np.linalg.norm(xi) < cfg.convergence_eps:
            diag.converged = True
            break

    return pose, diag


def init_pose_constant_speed(prev: Pose, prev_prev: Pose) -> Pose:
    """Replay the last inter-frame motion: prev o (prev_prev^-1 o prev)."""
    return prev.compose(prev_prev.inverse().compose(prev))


def init_pose_render(
    frame: RgbdFrame,
    prev_map,
    init: Pose,
    iters: int = 10,
    depth_weight: float = 4.0,
    coverage_min: float = 0.3,
) -> tuple[Pose, bool]:
    """Refine a pose by rendering the previous frame's map against ``frame``.

    Minimizes the L1 photometric plus valid-masked L1 depth error over the
    6-dim twist with iteratively reweighted Gauss-Newton; the residual
    Jacobian comes from central differences through the renderer. The depth
    term gets extra weight: rendered depth is nearly unbiased across small
    view changes, while rendered color inherits artifacts tuned to the
    map's own view. Returns ``(init, False)`` when the map covers too
    little of the frame.
    """
    from .rasterizer import splat  # local import: rasterizer pulls in numba

    intr = frame.intrinsics
    target_c = frame.color.astype(np.float64)
    target_d = frame.depth.astype(np.float64)
    mask = frame.valid_mask.astype(np.float64)

    def residuals(p: Pose) -> np.ndarray:
        out = splat([prev_map], p, intr)
        rc = (out.color - target_c).reshape(-1)
        rd = (depth_weight * mask * (out.depth - target_d)).reshape(-1)
        return np.concatenate([rc, rd])

    coverage = float((splat([prev_map], init, intr).alpha > 0.5).mean())
    if coverage < coverage_min:
        return init, False

    pose = init
    h = 1e-4
    r = residuals(pose)
    for _ in range(iters):
        jac = np.empty((r.size, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            rp = residuals(se3_exp(e).compose(pose))
            rm = residuals(se3_exp(-e).compose(pose))
            jac[:, k] = (rp - rm) / (2.0 * h)

        # a few reweighted solves on the same linearization: weights follow
        # the predicted residuals so the L1 surrogate tightens without
        # re-rendering the Jacobian
        xi = np.zeros(6)
        for _inner in range(3):
            r_pred = r + jac @ xi
            irls_w = 1.0 / np.maximum(np.abs(r_pred), 1e-3)
            hw = jac.T @ (jac * irls_w[:, None])
            gw = jac.T @ (irls_w * r)
            xi = np.linalg.lstsq(hw, -gw, rcond=None)[0]

        cost = float(np.abs(r).sum())
        candidate = se3_exp(xi).compose(pose)
        r_cand = residuals(candidate)
        halvings = 0
        while float(np.abs(r_cand).sum()) > cost and halvings < MAX_STEP_HALVINGS:
            xi = 0.5 * xi
            candidate = se3_exp(xi).compose(pose)
            r_cand = residuals(candidate)
            halvings += 1
        if float(np.abs(r_cand).sum()) > cost:
            break
        pose, r = candidate, r_cand
        if np.linalg.norm(xi) < 1e-7:
            break
    return pose, True
