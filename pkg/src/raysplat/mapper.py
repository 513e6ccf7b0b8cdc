"""Per-frame map optimization against the frame itself and its neighbors.

The mapping loss for a target frame k is

    rho * L1(V, V') + tau * (1 - SSIM(V, V')) + sigma * L1_masked(D, D')

where (V', D') is the splatted render of the current map together with its
fixed neighbor maps at the target pose, and the depth term averages only
over pixels whose sensor depth was valid (hole-filled pixels seed geometry
but are not supervised). Targets alternate between the current frame and
its neighbors under a deterministic schedule with a floor on the fraction
of current-frame iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import RgbdFrame, inpaint_depth
from .gaussians import PixelGaussianMap, init_gaussians
from .geometry import Intrinsics, Pose
from .rasterizer import MapGradients, RenderOutput, splat, splat_backward
from .ssim import ssim


@dataclass
class MapperConfig:
    rho: float = 0.8
    tau: float = 0.2
    sigma: float = 1.0
    neighbor_count: int = 1
    mapping_iters: int = 100
    lr_color: float = 0.0025
    lr_radius: float = 0.005
    lr_opacity: float = 0.05
    lr_offset: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_current_fraction: float = 0.4
    offset_frozen: bool = False
    normalize_depth: bool = False
    coverage_alpha: float = 0.5


class MapOptimizer:
    """Adam over the four learnable attribute groups of one map.

    Radius gradients arrive with respect to the radius itself and are
    chained onto the stored log-radius; after each step colors are clipped
    back to [0, 1].
    """

    _GROUPS = ("color", "log_radius", "opacity_logit", "delta")

    def __init__(self, gmap: PixelGaussianMap, cfg: MapperConfig):
        self.gmap = gmap
        self.cfg = cfg
        self.t = 0
        self._m = {g: np.zeros_like(getattr(gmap, g)) for g in self._GROUPS}
        self._v = {g: np.zeros_like(getattr(gmap, g)) for g in self._GROUPS}

    def _lr(self, group: str) -> float:
        return {
            "color": self.cfg.lr_color,
            "log_radius": self.cfg.lr_radius,
            "opacity_logit": self.cfg.lr_opacity,
            "delta": self.cfg.lr_offset,
        }[group]

    def step(self, grads: MapGradients) -> None:
        self.t += 1
        by_group = {
            "color": grads.color,
            "log_radius": grads.radius * self.gmap.radius,
            "opacity_logit": grads.opacity_logit,
            "delta": grads.delta,
        }
        if self.cfg.offset_frozen:
            by_group.pop("delta")
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        for group, g in by_group.items():
            m = self._m[group]
            v = self._v[group]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            param = getattr(self.gmap, group)
            param -= self._lr(group) * mhat / (np.sqrt(vhat) + eps)
        np.clip(self.gmap.color, 0.0, 1.0, out=self.gmap.color)


@dataclass
class LossBreakdown:
    total: float
    color_l1: float
    ssim_term: float
    depth_l1: float


def mapping_loss(
    maps,
    target_frame: RgbdFrame,
    target_pose: Pose,
    cfg: MapperConfig,
    with_grads: bool = True,
):
    """Evaluate the mapping objective for one target; optionally with grads.

    Returns ``(LossBreakdown, MapGradients | None, RenderOutput)``. The
    gradient refers to ``maps[0]``, the map under optimization.
    """
    intr = target_frame.intrinsics
    out = splat(maps, target_pose, intr, normalize_depth=cfg.normalize_depth)
    target_color = np.asarray(target_frame.color, dtype=np.float64)

    n_color = out.color.size
    resid = out.color - target_color
    color_l1 = float(np.abs(resid).sum() / n_color)

    if cfg.tau != 0.0:
        if with_grads:
            ssim_val, ssim_grad = ssim(out.color, target_color, with_grad=True)
        else:
            ssim_val, ssim_grad = ssim(out.color, target_color), None
    else:
        ssim_val, ssim_grad = 1.0, None
    ssim_term = 1.0 - ssim_val

    mask = target_frame.valid_mask
    n_depth = int(mask.sum())
    dres = out.depth - np.asarray(target_frame.depth, dtype=np.float64)
    depth_l1 = float(np.abs(dres[mask]).sum() / n_depth) if n_depth else 0.0

    total = cfg.rho * color_l1 + cfg.tau * ssim_term + cfg.sigma * depth_l1
    breakdown = LossBreakdown(total, color_l1, ssim_term, depth_l1)
    if not with_grads:
        return breakdown, None, out

    g_color = cfg.rho * np.sign(resid) / n_color
    if ssim_grad is not None:
        g_color = g_color - cfg.tau * ssim_grad
    if n_depth:
        g_depth = cfg.sigma * np.sign(dres) * mask / n_depth
    else:
        g_depth = np.zeros_like(dres)
    g_alpha = np.zeros_like(g_depth)
    grads = splat_backward(
        maps, target_pose, intr, g_color, g_depth, g_alpha,
        learnable_map=0, normalize_depth=cfg.normalize_depth,
    )
    return breakdown, grads, out


def mapping_step(
    gmap: PixelGaussianMap,
    optimizer: MapOptimizer,
    target_frame: RgbdFrame,
    target_pose: Pose,
    neighbor_maps,
    cfg: MapperConfig,
) -> LossBreakdown:
    """One optimization step of ``gmap`` against a single target frame."""
    maps = [gmap] + list(neighbor_maps)
    breakdown, grads, _ = mapping_loss(maps, target_frame, target_pose, cfg)
    optimizer.step(grads)
    return breakdown


def target_schedule(iters: int, n_neighbors: int, min_current_fraction: float, seed: int = 0) -> list[int]:
    """Deterministic target order: 0 is the current frame, 1..N its neighbors.

    Baseline is strict alternation (current on even slots, neighbors
    round-robin on odd slots, the starting neighbor set by ``seed``); extra
    current slots are inserted whenever alternation alone would drop the
    current-frame share below ``min_current_fraction``.
    """
    sched: list[int] = []
    cur = 0
    nxt = 0
    for i in range(iters):
        behind_floor = cur < min_current_fraction * (i + 1)
        if n_neighbors == 0 or behind_floor or i % 2 == 0:
            sched.append(0)
            cur += 1
        else:
            sched.append(1 + (seed + nxt) % n_neighbors)
            nxt += 1
    return sched


def assemble_base_depth(frame: RgbdFrame, pose: Pose, neighbor_maps) -> np.ndarray:
    """Hole-free depth for Gaussian placement.

    Sensor depth where valid; where a neighbor map covers the hole
    (accumulated alpha above 0.5), the neighbor's alpha-normalized rendered
    depth; remaining holes by harmonic inpainting.
    """
    base = np.where(frame.valid_mask, frame.depth.astype(np.float64), 0.0)
    if frame.valid_mask.all():
        return base
    if neighbor_maps:
        out = splat(neighbor_maps, pose, frame.intrinsics, normalize_depth=True)
        fill = (~frame.valid_mask) & (out.alpha > 0.5) & (out.depth > 0)
        base[fill] = out.depth[fill]
    if (base > 0).all():
        return base
    return inpaint_depth(base, base > 0)


def map_frame(
    frame: RgbdFrame,
    pose: Pose,
    neighbors,
    cfg: MapperConfig,
    seed: int = 0,
) -> tuple[PixelGaussianMap, list[float]]:
    """Fit a frame's Gaussian map at a fixed pose.

    ``neighbors`` is a list of (frame, pose, map) triples; their maps are
    rendered alongside but never updated. Neighbor targets with no valid
    depth are dropped from the schedule. Deterministic for a given seed.
    """
    if not frame.valid_mask.any():
        raise ValueError(f"frame {frame.index} has no valid depth to map")
    neighbors = [n for n in neighbors if n[0].valid_mask.any()]
    neighbor_maps = [m for _, _, m in neighbors]

    base = assemble_base_depth(frame, pose, neighbor_maps)
    gmap = init_gaussians(frame, pose, base_depth=base)
    opt = MapOptimizer(gmap, cfg)

    losses: list[float] = []
    sched = target_schedule(cfg.mapping_iters, len(neighbors), cfg.min_current_fraction, seed)
    for slot in sched:
        if slot == 0:
            t_frame, t_pose = frame, pose
        else:
            t_frame, t_pose, _ = neighbors[slot - 1]
        breakdown = mapping_step(gmap, opt, t_frame, t_pose, neighbor_maps, cfg)
        losses.append(breakdown.total)
    return gmap, losses
