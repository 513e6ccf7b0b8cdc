"""Differentiable splatting of pixel-Gaussian maps into a target view.

Each source Gaussian is lifted to 3D along its pixel ray at the adjusted
depth, projected into the target camera, and drawn as an isotropic 2D
Gaussian of footprint ``sigma_px = radius * fx / z`` truncated at three
sigma. Per pixel, contributions are alpha-composited front to back in
camera depth order (ties broken by source frame index, then pixel index),
stopping once transmittance falls under 1e-4:

    C = sum_j c_j a_j T_j,  D = sum_j z_j a_j T_j,  A = sum_j a_j T_j

with ``a_j = opacity_j * w_j`` clamped to 0.999 and ``T_j`` the product of
``(1 - a_l)`` over earlier contributors. Depth is alpha-weighted but not
normalized unless asked. The backward pass evaluates the exact analytic
gradients of this formula; tile traversal is shared by both passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .gaussians import PixelGaussianMap, sigmoid
from .geometry import Intrinsics, Pose

ALPHA_MAX = 0.999
TRANSMITTANCE_MIN = 1e-4
Z_NEAR = 1e-6
_TILE = 16


@dataclass
class RenderOutput:
    """Composited target view. ``alpha`` is accumulated opacity in [0, 1]."""

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    contributors: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class MapGradients:
    """Gradients for the learnable source map, zero at culled or inactive pixels."""

    color: np.ndarray
    radius: np.ndarray
    opacity_logit: np.ndarray
    delta: np.ndarray


@dataclass
class _SplatBatch:
    # all arrays sorted by (camera depth, frame index, pixel index)
    u0: np.ndarray
    v0: np.ndarray
    z: np.ndarray
    sigma: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    learnable: np.ndarray
    pixel_index: np.ndarray
    # chain-rule context for the learnable map's survivors
    dir_t: np.ndarray
    y: np.ndarray
    radius: np.ndarray
    height: int
    width: int
    fx: float
    fy: float


def _prepare(maps, target_pose: Pose, intr: Intrinsics, learnable_map: int) -> _SplatBatch:
    chunks = []
    for mi, gmap in enumerate(maps):
        h, w = gmap.shape
        act = gmap.active_mask.reshape(-1)
        if not act.any():
            continue
        sintr = gmap.intrinsics
        u = np.arange(w, dtype=np.float64)
        v = np.arange(h, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        rays = np.stack(
            [((uu - sintr.cx) / sintr.fx), ((vv - sintr.cy) / sintr.fy), np.ones_like(uu)], axis=-1
        ).reshape(-1, 3)[act]
        d_adj = gmap.adjusted_depth.reshape(-1)[act]
        rel = target_pose.inverse().compose(gmap.pose)
        dir_t = rays @ rel.rotation.T
        y = dir_t * d_adj[:, None] + rel.translation
        z = y[:, 2]

        radius = gmap.radius.reshape(-1)[act]
        keep = z > Z_NEAR
        if not keep.any():
            continue
        y = y[keep]
        z = z[keep]
        dir_t = dir_t[keep]
        radius = radius[keep]
        u0 = intr.fx * y[:, 0] / z + intr.cx
        v0 = intr.fy * y[:, 1] / z + intr.cy
        sig = radius * intr.fx / z
        margin = 3.0 * sig
        on = (
            (u0 + margin >= 0.0)
            & (u0 - margin <= intr.width - 1.0)
            & (v0 + margin >= 0.0)
            & (v0 - margin <= intr.height - 1.0)
        )
        if not on.any():
            continue
        pix = np.nonzero(act)[0][keep][on]
        chunks.append(
            dict(
                u0=u0[on],
                v0=v0[on],
                z=z[on],
                sigma=sig[on],
                opacity=sigmoid(gmap.opacity_logit.reshape(-1)[act][keep][on]),
                color=gmap.color.reshape(-1, 3)[act][keep][on],
                frame=np.full(int(on.sum()), gmap.frame_index, dtype=np.int64),
                learnable=np.full(int(on.sum()), np.uint8(1 if mi == learnable_map else 0)),
                pixel_index=pix,
                dir_t=dir_t[on],
                y=y[on],
                radius=radius[on],
            )
        )

    if not chunks:
        empty3 = np.zeros((0, 3))
        return _SplatBatch(
            u0=np.zeros(0),
            v0=np.zeros(0),
            z=np.zeros(0),
            sigma=np.zeros(0),
            opacity=np.zeros(0),
            color=empty3,
            learnable=np.zeros(0, dtype=np.uint8),
            pixel_index=np.zeros(0, dtype=np.int64),
            dir_t=empty3,
            y=empty3,
            radius=np.zeros(0),
            height=intr.height,
            width=intr.width,
            fx=intr.fx,
            fy=intr.fy,
        )

    cat = {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}
    order = np.lexsort((cat["pixel_index"], cat["frame"], cat["z"]))
    return _SplatBatch(
        u0=np.ascontiguousarray(cat["u0"][order]),
        v0=np.ascontiguousarray(cat["v0"][order]),
        z=np.ascontiguousarray(cat["z"][order]),
        sigma=np.ascontiguousarray(cat["sigma"][order]),
        opacity=np.ascontiguousarray(cat["opacity"][order]),
        color=np.ascontiguousarray(cat["color"][order]),
        learnable=np.ascontiguousarray(cat["learnable"][order]),
        pixel_index=np.ascontiguousarray(cat["pixel_index"][order]),
        dir_t=np.ascontiguousarray(cat["dir_t"][order]),
        y=np.ascontiguousarray(cat["y"][order]),
        radius=np.ascontiguousarray(cat["radius"][order]),
        height=intr.height,
        width=intr.width,
        fx=intr.fx,
        fy=intr.fy,
    )


@njit(cache=True, nogil=True)
def _build_tile_lists(u0, v0, sigma, height, width, tile):
    n = u0.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n_tiles = ntx * nty
    counts = np.zeros(n_tiles, dtype=np.int64)
    bounds = np.empty((n, 4), dtype=np.int64)
    for g in range(n):
        r = 3.0 * sigma[g]
        x0 = int(np.floor((u0[g] - r) / tile))
        x1 = int(np.floor((u0[g] + r) / tile))
        y0 = int(np.floor((v0[g] - r) / tile))
        y1 = int(np.floor((v0[g] + r) / tile))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > ntx - 1:
            x1 = ntx - 1
        if y1 > nty - 1:
            y1 = nty - 1
        bounds[g, 0] = x0
        bounds[g, 1] = x1
        bounds[g, 2] = y0
        bounds[g, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    lists = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for g in range(n):
        for ty in range(bounds[g, 2], bounds[g, 3] + 1):
            for tx in range(bounds[g, 0], bounds[g, 1] + 1):
                t = ty * ntx + tx
                lists[cursor[t]] = g
                cursor[t] += 1
    return offsets, lists


@njit(cache=True, nogil=True)
def _forward_kernel(
    u0, v0, z, sigma, opacity, color, offsets, lists, height, width, tile,
    out_color, out_depth, out_alpha, out_count,
):
    ntx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        ylim = min((ty + 1) * tile, height)
        xlim = min((tx + 1) * tile, width)
        for py in range(ty * tile, ylim):
            for px in range(tx * tile, xlim):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dep = 0.0
                acc = 0.0
                cnt = 0
                for k in range(offsets[t], offsets[t + 1]):
                    g = lists[k]
                    dx = u0[g] - px
                    dy = v0[g] - py
                    d2 = dx * dx + dy * dy
                    s2 = sigma[g] * sigma[g]
                    if d2 > 9.0 * s2:
                        continue
                    w = np.exp(-0.5 * d2 / s2)
                    a = opacity[g] * w
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    at = a * trans
                    c0 += color[g, 0] * at
                    c1 += color[g, 1] * at
                    c2 += color[g, 2] * at
                    dep += z[g] * at
                    acc += at
                    cnt += 1
                    trans *= 1.0 - a
                    if trans < TRANSMITTANCE_MIN:
                        break
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_depth[py, px] = dep
                out_alpha[py, px] = acc
                out_count[py, px] = cnt


@njit(cache=True, nogil=True)
def _backward_kernel(
    u0, v0, z, sigma, opacity, color, learnable, offsets, lists, height, width, tile,
    g_out_color, g_out_depth, g_out_alpha,
    g_color, g_opacity, g_u0, g_v0, g_sigma, g_z,
):
    ntx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        ylim = min((ty + 1) * tile, height)
        xlim = min((tx + 1) * tile, width)
        for py in range(ty * tile, ylim):
            for px in range(tx * tile, xlim):
                gc0 = g_out_color[py, px, 0]
                gc1 = g_out_color[py, px, 1]
                gc2 = g_out_color[py, px, 2]
                gd = g_out_depth[py, px]
                ga = g_out_alpha[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and ga == 0.0:
                    continue

                # forward sweep: find where compositing stopped
                trans = 1.0
                last = -1
                for k in range(offsets[t], offsets[t + 1]):
                    g = lists[k]
                    dx = u0[g] - px
                    dy = v0[g] - py
                    d2 = dx * dx + dy * dy
                    s2 = sigma[g] * sigma[g]
                    if d2 > 9.0 * s2:
                        continue
                    a = opacity[g] * np.exp(-0.5 * d2 / s2)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    last = k
                    trans *= 1.0 - a
                    if trans < TRANSMITTANCE_MIN:
                        break
                if last < 0:
                    continue

                # reverse sweep with suffix accumulators
                s_c0 = 0.0
                s_c1 = 0.0
                s_c2 = 0.0
                s_d = 0.0
                s_a = 0.0
                t_cur = trans
                for k in range(last, offsets[t] - 1, -1):
                    g = lists[k]
                    dx = u0[g] - px
                    dy = v0[g] - py
                    d2 = dx * dx + dy * dy
                    s2 = sigma[g] * sigma[g]
                    if d2 > 9.0 * s2:
                        continue
                    w = np.exp(-0.5 * d2 / s2)
                    aw = opacity[g] * w
                    clamped = aw > ALPHA_MAX
                    a = ALPHA_MAX if clamped else aw
                    t_before = t_cur / (1.0 - a)
                    at = a * t_before

                    if learnable[g] != 0:
                        d_alpha = (
                            gc0 * (color[g, 0] * t_before - s_c0 / (1.0 - a))
                            + gc1 * (color[g, 1] * t_before - s_c1 / (1.0 - a))
                            + gc2 * (color[g, 2] * t_before - s_c2 / (1.0 - a))
                            + gd * (z[g] * t_before - s_d / (1.0 - a))
                            + ga * (t_before - s_a / (1.0 - a))
                        )
                        g_color[g, 0] += gc0 * at
                        g_color[g, 1] += gc1 * at
                        g_color[g, 2] += gc2 * at
                        g_z[g] += gd * at
                        if not clamped:
                            gw = d_alpha * opacity[g]
                            g_opacity[g] += d_alpha * w
                            g_sigma[g] += gw * w * d2 / (s2 * sigma[g])
                            gd2 = gw * (-0.5 * w / s2)
                            g_u0[g] += gd2 * 2.0 * dx
                            g_v0[g] += gd2 * 2.0 * dy

                    s_c0 += color[g, 0] * at
                    s_c1 += color[g, 1] * at
                    s_c2 += color[g, 2] * at
                    s_d += z[g] * at
                    s_a += at
                    t_cur = t_before


def splat(
    maps,
    target_pose: Pose,
    intrinsics: Intrinsics,
    normalize_depth: bool = False,
) -> RenderOutput:
    """Render source maps into the target camera.

    The result does not depend on the order of ``maps``. An empty source
    set produces a zero image with zero alpha.
    """
    batch = _prepare(maps, target_pose, intrinsics, learnable_map=-1)
    h, w = intrinsics.height, intrinsics.width
    out_color = np.zeros((h, w, 3))
    out_depth = np.zeros((h, w))
    out_alpha = np.zeros((h, w))
    out_count = np.zeros((h, w), dtype=np.int32)
    if len(batch.z):
        offsets, lists = _build_tile_lists(batch.u0, batch.v0, batch.sigma, h, w, _TILE)
        _forward_kernel(
            batch.u0, batch.v0, batch.z, batch.sigma, batch.opacity, batch.color,
            offsets, lists, h, w, _TILE,
            out_color, out_depth, out_alpha, out_count,
        )
    if normalize_depth:
        out_depth = np.where(out_alpha > 1e-8, out_depth / np.maximum(out_alpha, 1e-8), 0.0)
    return RenderOutput(color=out_color, depth=out_depth, alpha=out_alpha, contributors=out_count)


def splat_backward(
    maps,
    target_pose: Pose,
    intrinsics: Intrinsics,
    grad_color: np.ndarray,
    grad_depth: np.ndarray,
    grad_alpha: np.ndarray,
    learnable_map: int = 0,
    normalize_depth: bool = False,
) -> MapGradients:
    """Backpropagate image-space gradients into one source map's attributes.

    Returns gradients with respect to the learnable map's color, radius,
    opacity logit, and depth offset; the other maps only occlude. Gaussians
    culled in the forward pass receive zero gradient.
    """
    gmap = maps[learnable_map]
    h, w = intrinsics.height, intrinsics.width
    mh, mw = gmap.shape
    out = MapGradients(
        color=np.zeros((mh, mw, 3)),
        radius=np.zeros((mh, mw)),
        opacity_logit=np.zeros((mh, mw)),
        delta=np.zeros((mh, mw)),
    )
    batch = _prepare(maps, target_pose, intrinsics, learnable_map=learnable_map)
    if not len(batch.z):
        return out

    g_out_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    g_out_depth = np.asarray(grad_depth, dtype=np.float64)
    g_out_alpha = np.asarray(grad_alpha, dtype=np.float64).copy()
    if normalize_depth:
        # d_hat = d / max(a, eps): fold the quotient rule into the upstream grads
        fwd = splat(maps, target_pose, intrinsics, normalize_depth=False)
        safe_a = np.maximum(fwd.alpha, 1e-8)
        covered = fwd.alpha > 1e-8
        g_out_alpha += np.where(covered, -g_out_depth * fwd.depth / safe_a**2, 0.0)
        g_out_depth = np.where(covered, g_out_depth / safe_a, 0.0)
    g_out_depth = np.ascontiguousarray(g_out_depth)

    n = len(batch.z)
    g_color = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_u0 = np.zeros(n)
    g_v0 = np.zeros(n)
    g_sigma = np.zeros(n)
    g_z = np.zeros(n)
    offsets, lists = _build_tile_lists(batch.u0, batch.v0, batch.sigma, h, w, _TILE)
    _backward_kernel(
        batch.u0, batch.v0, batch.z, batch.sigma, batch.opacity, batch.color, batch.learnable,
        offsets, lists, h, w, _TILE,
        g_out_color, g_out_depth, g_out_alpha,
        g_color, g_opacity, g_u0, g_v0, g_sigma, g_z,
    )

    sel = batch.learnable != 0
    if not sel.any():
        return out
    pix = batch.pixel_index[sel]
    y = batch.y[sel]
    z = batch.z[sel]
    dir_t = batch.dir_t[sel]
    radius = batch.radius[sel]
    sigma = batch.sigma[sel]
    opac = batch.opacity[sel]

    # sigma = radius * fx / z couples into both radius and depth
    g_radius = g_sigma[sel] * batch.fx / z
    g_z_total = (
        g_z[sel]
        - g_sigma[sel] * sigma / z
        - g_u0[sel] * batch.fx * y[:, 0] / z**2
        - g_v0[sel] * batch.fy * y[:, 1] / z**2
    )
    g_y0 = g_u0[sel] * batch.fx / z
    g_y1 = g_v0[sel] * batch.fy / z
    g_dadj = g_y0 * dir_t[:, 0] + g_y1 * dir_t[:, 1] + g_z_total * dir_t[:, 2]

    base = gmap.base_depth.reshape(-1)[pix]
    delta = gmap.delta.reshape(-1)[pix]
    # |x| has subgradient sign(x), taken as +1 at zero
    sgn = np.where(base + delta >= 0.0, 1.0, -1.0)

    flat_color = out.color.reshape(-1, 3)
    flat_color[pix] = g_color[sel]
    out.radius.reshape(-1)[pix] = g_radius
    out.opacity_logit.reshape(-1)[pix] = g_opacity[sel] * opac * (1.0 - opac)
    out.delta.reshape(-1)[pix] = g_dadj * sgn
    return out
