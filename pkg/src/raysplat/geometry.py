"""Rigid-body transforms, pinhole camera math, and 3x3 symmetric eigendecomposition.

Everything here is plain float64 numpy. Poses map camera coordinates to world
coordinates; twists are 6-vectors ``[wx, wy, wz, vx, vy, vz]`` with the
rotational part first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
_NEAR_PI = np.pi - 1e-3


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self @ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series expansion below the small-angle cutoff."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        # 2nd order series keeps the result orthogonal to ~1e-16 at this scale
        return np.eye(3) + wx + 0.5 * (wx @ wx)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * wx + b * (wx @ wx)


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion ``[x, y, z, w]``, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle vector.

    Uses the standard trace formula away from pi and switches to a
    quaternion-based extraction when the angle approaches pi, where the
    trace formula loses the axis.
    """
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta >= _NEAR_PI:
        q = rotation_to_quaternion(r)
        vec_norm = np.linalg.norm(q[:3])
        if vec_norm < 1e-12:
            return np.zeros(3)
        angle = 2.0 * np.arctan2(vec_norm, q[3])
        return q[:3] / vec_norm * angle
    return theta / (2.0 * np.sin(theta)) * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * wx + (wx @ wx) / 6.0
    t2 = theta * theta
    b = (1.0 - np.cos(theta)) / t2
    c = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + b * wx + c * (wx @ wx)


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * wx + (1.0 - cot) / (theta * theta) * (wx @ wx)


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map from a twist ``[w; v]`` to a Pose."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp`. Principal branch, rotation angle in [0, pi]."""
    w = so3_log(pose.rotation)
    v = _left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(so3_log(r)))


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle rad, translation distance m) between two poses."""
    rel = a.inverse().compose(b)
    return rotation_angle(rel.rotation), float(np.linalg.norm(rel.translation))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model. Pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` in both axes."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            depth_scale=self.depth_scale,
        )


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions in the camera frame, shape (H, W, 3), z = 1."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = (uu - intr.cx) / intr.fx
    rays[..., 1] = (vv - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    return rays


def backproject(depth: np.ndarray, mask: np.ndarray, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Lift masked depth pixels to world-frame 3D points.

    Points come back in row-major pixel order, shape (N, 3). Pixels whose
    depth is not strictly positive are dropped even when the mask says
    valid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & (depth > 0)
    rays = pixel_rays(intr)
    pts_cam = rays[mask] * depth[mask][:, None]
    return pose.apply(pts_cam)


def project(points_cam: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points to pixel coordinates. Returns ((N, 2) uv, (N,) z)."""
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    uv = np.empty((len(pts), 2))
    uv[:, 0] = intr.fx * pts[:, 0] / z + intr.cx
    uv[:, 1] = intr.fy * pts[:, 1] / z + intr.cy
    return uv, z


@dataclass(frozen=True)
class Mat3Decomp:
    """Eigendecomposition of a symmetric PSD 3x3: ``M = R diag(scales^2) R^T``.

    ``scales`` are sorted descending and ``rotation`` is right-handed; the
    third column is the direction of least spread.
    """

    rotation: np.ndarray
    scales: np.ndarray


# relative eigenvalue gap below which the analytic path hands over to LAPACK
_EIG_GAP_FALLBACK = 1e-8


def sym_eigh3_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched symmetric 3x3 eigendecomposition, eigenvalues descending.

    Analytic (trigonometric) eigenvalues plus projector-based eigenvectors,
    falling back to ``np.linalg.eigh`` for matrices with nearly equal
    eigenvalues, where the analytic vectors lose accuracy.

    Returns ``(rotations (N,3,3), eigvals (N,3))`` with right-handed
    rotations whose columns are the eigenvectors.
    """
    m = np.asarray(mats, dtype=np.float64)
    n = m.shape[0]
    rot = np.empty((n, 3, 3))
    vals = np.empty((n, 3))

    q = np.trace(m, axis1=1, axis2=2) / 3.0
    off = m[:, 0, 1] ** 2 + m[:, 0, 2] ** 2 + m[:, 1, 2] ** 2
    dd = m[:, [0, 1, 2], [0, 1, 2]] - q[:, None]
    p2 = (dd**2).sum(axis=1) + 2.0 * off
    scale = np.maximum(np.abs(m).max(axis=(1, 2)), 1e-300)

    iso = p2 <= (1e-14 * scale) ** 2
    if iso.any():
        vals[iso] = q[iso, None]
        rot[iso] = np.eye(3)

    gen = ~iso
    if gen.any():
        mg = m[gen]
        qg = q[gen]
        p = np.sqrt(p2[gen] / 6.0)
        b = (mg - qg[:, None, None] * np.eye(3)) / p[:, None, None]
        detb = np.linalg.det(b)
        phi = np.arccos(np.clip(detb / 2.0, -1.0, 1.0)) / 3.0
        e1 = qg + 2.0 * p * np.cos(phi)
        e3 = qg + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        e2 = 3.0 * qg - e1 - e3
        ev = np.stack([e1, e2, e3], axis=1)

        gap = np.minimum(e1 - e2, e2 - e3) / scale[gen]
        ok = gap > _EIG_GAP_FALLBACK

        r_gen = np.empty((gen.sum(), 3, 3))
        if ok.any():
            r_gen[ok] = _projector_eigvecs(mg[ok], ev[ok])
        if (~ok).any():
            w, vecs = np.linalg.eigh(mg[~ok])
            # eigh sorts ascending; flip to descending
            ev[~ok] = w[:, ::-1]
            r_gen[~ok] = vecs[:, :, ::-1]
        vals[gen] = ev
        rot[gen] = r_gen

    # enforce right-handedness
    det = np.linalg.det(rot)
    flip = det < 0
    rot[flip, :, 2] *= -1.0
    return rot, vals


def _projector_eigvecs(m: np.ndarray, ev: np.ndarray) -> np.ndarray:
    """Eigenvectors via spectral projectors, valid for well-separated eigenvalues."""
    eye = np.eye(3)

    def principal_column(a: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(a, axis=1)  # column norms of each matrix
        idx = np.argmax(norms, axis=1)
        cols = a[np.arange(len(a)), :, idx]
        return cols / np.linalg.norm(cols, axis=1, keepdims=True)

    m2 = m - ev[:, 1, None, None] * eye
    m3 = m - ev[:, 2, None, None] * eye
    m1 = m - ev[:, 0, None, None] * eye
    v1 = principal_column(m2 @ m3)
    v3 = principal_column(m1 @ m2)
    v3 = v3 - (v3 * v1).sum(axis=1, keepdims=True) * v1
    v3 /= np.linalg.norm(v3, axis=1, keepdims=True)
    v2 = np.cross(v3, v1)
    return np.stack([v1, v2, v3], axis=2)


def sym3_eigendecomp(m: np.ndarray) -> Mat3Decomp:
    """Decompose one symmetric PSD 3x3 matrix into rotation and scales.

    Negative eigenvalues from numerical noise are clamped to zero before the
    square root.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    if np.abs(m - m.T).max() > 1e-9:
        raise ValueError("matrix is not symmetric within 1e-9")
    rot, vals = sym_eigh3_batch(m[None])
    scales = np.sqrt(np.clip(vals[0], 0.0, None))
    return Mat3Decomp(rotation=rot[0], scales=scales)
