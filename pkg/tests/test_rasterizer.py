import numpy as np
import numpy.testing as npt

from oracles import (
    brute_composite,
    draw_is_fd_safe,
    line_intrinsics,
    make_three_gaussian_setup,
    single_pixel_ray_maps,
)
from raysplat.datasets import RgbdFrame
from raysplat.gaussians import init_gaussians, logit
from raysplat.geometry import Intrinsics, Pose, se3_exp
from raysplat.rasterizer import MapGradients, splat, splat_backward
from raysplat.synthetic import RectPatch, SyntheticScene, render_synthetic_frame


def _plane_frame(depth=0.9, w=64, h=48, fx=100.0, color=(0.6, 0.4, 0.3)):
    intr = Intrinsics(fx=fx, fy=fx, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)
    plane = RectPatch((-5.0, -5.0, depth), (10.0, 0.0, 0.0), (0.0, 10.0, 0.0), color)
    scene = SyntheticScene(primitives=[plane], trajectory=[Pose.identity()], intrinsics=intr)
    return render_synthetic_frame(scene, 0)


class TestForward:
    def test_empty_sources(self):
        intr = line_intrinsics(4)
        out = splat([], Pose.identity(), intr)
        npt.assert_array_equal(out.color, 0.0)
        npt.assert_array_equal(out.alpha, 0.0)
        npt.assert_array_equal(out.contributors, 0)

    def test_single_gaussian_half_opacity(self):
        intr = line_intrinsics(3)
        maps = single_pixel_ray_maps([[0.5, 0.5, 0.5]], [[(1.0, 0.5, 0.25)] * 3], [2.0], intr)
        out = splat(maps, Pose.identity(), intr)
        npt.assert_allclose(out.color[0, 1], [0.5, 0.25, 0.125], atol=1e-12)
        npt.assert_allclose(out.depth[0, 1], 1.0, atol=1e-12)
        npt.assert_allclose(out.alpha[0, 1], 0.5, atol=1e-12)
        assert out.contributors[0, 1] == 1

    def test_two_layer_compositing_frozen_value(self):
        # alpha 0.5 over alpha 0.5: weights are 0.5 and 0.25
        intr = line_intrinsics(1)
        maps = single_pixel_ray_maps(
            [[0.5], [0.5]], [[(1.0, 0.0, 0.0)], [(0.0, 1.0, 0.0)]], [1.0, 2.0], intr
        )
        out = splat(maps, Pose.identity(), intr)
        npt.assert_allclose(out.color[0, 0], [0.5, 0.25, 0.0], atol=1e-12)
        npt.assert_allclose(out.depth[0, 0], 0.5 * 1.0 + 0.25 * 2.0, atol=1e-12)
        npt.assert_allclose(out.alpha[0, 0], 0.75, atol=1e-12)

    def test_matches_brute_force_random_stacks(self):
        rng = np.random.default_rng(0)
        intr = line_intrinsics(32)
        depths = [0.8, 1.3, 1.9, 2.6]
        alphas = [rng.uniform(0.05, 0.9, 32) for _ in depths]
        colors = [rng.uniform(0.0, 1.0, (32, 3)) for _ in depths]
        maps = single_pixel_ray_maps(alphas, colors, depths, intr)
        out = splat(maps, Pose.identity(), intr)
        for u in range(32):
            c, d, a = brute_composite(
                [al[u] for al in alphas], [co[u] for co in colors], depths
            )
            npt.assert_allclose(out.color[0, u], c, atol=1e-12)
            npt.assert_allclose(out.depth[0, u], d, atol=1e-12)
            npt.assert_allclose(out.alpha[0, u], a, atol=1e-12)

    def test_source_order_invariance(self):
        rng = np.random.default_rng(1)
        intr = line_intrinsics(16)
        depths = [1.0, 1.5, 2.0]
        alphas = [rng.uniform(0.1, 0.9, 16) for _ in depths]
        colors = [rng.uniform(0.0, 1.0, (16, 3)) for _ in depths]
        maps = single_pixel_ray_maps(alphas, colors, depths, intr)
        a = splat(maps, Pose.identity(), intr)
        b = splat(maps[::-1], Pose.identity(), intr)
        npt.assert_array_equal(a.color, b.color)
        npt.assert_array_equal(a.depth, b.depth)

    def test_equal_depth_ties_use_frame_order(self):
        intr = line_intrinsics(1)
        maps = single_pixel_ray_maps(
            [[0.8], [0.4]], [[(1.0, 0.0, 0.0)], [(0.0, 1.0, 0.0)]], [1.5, 1.5], intr
        )
        out = splat(maps, Pose.identity(), intr)
        # frame 0 composites first regardless of supply order
        expected_r = 0.8
        expected_g = 0.4 * (1.0 - 0.8)
        npt.assert_allclose(out.color[0, 0, 0], expected_r, atol=1e-12)
        npt.assert_allclose(out.color[0, 0, 1], expected_g, atol=1e-12)
        out2 = splat(maps[::-1], Pose.identity(), intr)
        npt.assert_array_equal(out.color, out2.color)

    def test_termination_at_transmittance_cutoff(self):
        # 50 stacked layers at alpha 0.95: transmittance crosses 1e-4 after 4
        intr = line_intrinsics(1)
        n = 50
        maps = single_pixel_ray_maps(
            [[0.95]] * n, [[(1.0, 1.0, 1.0)]] * n, list(1.0 + 0.05 * np.arange(n)), intr
        )
        out = splat(maps, Pose.identity(), intr)
        assert out.contributors[0, 0] == 4
        assert out.alpha[0, 0] < 1.0

    def test_alpha_clamp(self):
        intr = line_intrinsics(1)
        maps = single_pixel_ray_maps([[0.9999]], [[(1.0, 1.0, 1.0)]], [1.0], intr)
        out = splat(maps, Pose.identity(), intr)
        npt.assert_allclose(out.alpha[0, 0], 0.999, atol=1e-9)

    def test_self_reprojection_depth(self):
        frame = _plane_frame(depth=0.9)
        m = init_gaussians(frame, Pose.identity())
        m.opacity_logit[:] = 20.0
        out = splat([m], Pose.identity(), frame.intrinsics)
        interior = np.zeros(frame.depth.shape, dtype=bool)
        interior[4:-4, 4:-4] = True
        assert np.abs(out.depth - frame.depth)[interior].max() <= 1e-4

    def test_behind_camera_culled(self):
        frame = _plane_frame(depth=0.9)
        m = init_gaussians(frame, Pose.identity())
        # move the target camera past the plane, looking away from it
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 2.0]))
        out = splat([m], pose, frame.intrinsics)
        npt.assert_array_equal(out.alpha, 0.0)

    def test_normalized_depth_on_covered_pixels(self):
        intr = line_intrinsics(1)
        maps = single_pixel_ray_maps(
            [[0.5], [0.5]], [[(1.0, 0.0, 0.0)], [(0.0, 1.0, 0.0)]], [1.0, 2.0], intr
        )
        out = splat(maps, Pose.identity(), intr, normalize_depth=True)
        npt.assert_allclose(out.depth[0, 0], (0.5 * 1.0 + 0.25 * 2.0) / 0.75, atol=1e-12)

    def test_alpha_bounded(self):
        frame = _plane_frame()
        m = init_gaussians(frame, Pose.identity())
        m.opacity_logit[:] = 8.0
        out = splat([m], Pose.identity(), frame.intrinsics)
        assert out.alpha.max() <= 1.0 + 1e-12
        assert out.alpha.min() >= 0.0


def _loss_and_grads(maps, pose, intr, g_color, g_depth, g_alpha, normalize_depth=False):
    out = splat(maps, pose, intr, normalize_depth=normalize_depth)
    loss = float((out.color * g_color).sum() + (out.depth * g_depth).sum() + (out.alpha * g_alpha).sum())
    return loss, out


def run_gradient_check(rng, normalize_depth=False, h_scale=1e-4):
    """One random draw: returns max relative error across all parameters.

    ``h_scale`` trades truncation error against roundoff; 1e-5 is needed
    when near-zero gradients on high-curvature draws must validate tightly.
    """
    while True:
        gmap, pose, intr = make_three_gaussian_setup(rng)
        if draw_is_fd_safe(gmap, pose, intr):
            break
    g_color = rng.normal(size=(16, 16, 3))
    g_depth = rng.normal(size=(16, 16))
    g_alpha = rng.normal(size=(16, 16))

    grads = splat_backward(
        [gmap], pose, intr, g_color, g_depth, g_alpha, learnable_map=0,
        normalize_depth=normalize_depth,
    )

    def loss():
        l, _ = _loss_and_grads([gmap], pose, intr, g_color, g_depth, g_alpha, normalize_depth)
        return l

    worst = 0.0

    def check(analytic, get, set_, value):
        nonlocal worst
        h = h_scale * max(1.0, abs(value))
        set_(value + h)
        lp = loss()
        set_(value - h)
        lm = loss()
        set_(value)
        fd = (lp - lm) / (2.0 * h)
        denom = max(abs(fd), abs(analytic), 1e-4)
        worst = max(worst, abs(fd - analytic) / denom)

    for j in range(3):
        for c in range(3):
            v = gmap.color[0, j, c]
            check(
                grads.color[0, j, c],
                None,
                lambda x, j=j, c=c: gmap.color.__setitem__((0, j, c), x),
                v,
            )
        r = float(gmap.radius[0, j])
        check(
            grads.radius[0, j],
            None,
            lambda x, j=j: gmap.log_radius.__setitem__((0, j), np.log(x)),
            r,
        )
        ol = gmap.opacity_logit[0, j]
        check(
            grads.opacity_logit[0, j],
            None,
            lambda x, j=j: gmap.opacity_logit.__setitem__((0, j), x),
            ol,
        )
        d = gmap.delta[0, j]
        check(
            grads.delta[0, j],
            None,
            lambda x, j=j: gmap.delta.__setitem__((0, j), x),
            d,
        )
    return worst


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        frame = _plane_frame(w=16, h=16)
        m = init_gaussians(frame, Pose.identity())
        zeros = np.zeros((16, 16))
        g = splat_backward([m], Pose.identity(), frame.intrinsics, np.zeros((16, 16, 3)), zeros, zeros)
        npt.assert_array_equal(g.color, 0.0)
        npt.assert_array_equal(g.radius, 0.0)
        npt.assert_array_equal(g.opacity_logit, 0.0)
        npt.assert_array_equal(g.delta, 0.0)

    def test_single_gaussian_color_grad_is_alpha(self):
        intr = line_intrinsics(3)
        maps = single_pixel_ray_maps([[0.5, 0.5, 0.5]], [[(0.3, 0.3, 0.3)] * 3], [2.0], intr)
        g_color = np.zeros((1, 3, 3))
        g_color[0, 1, 0] = 1.0
        zeros = np.zeros((1, 3))
        g = splat_backward(maps, Pose.identity(), intr, g_color, zeros, zeros)
        npt.assert_allclose(g.color[0, 1, 0], 0.5, atol=1e-12)
        assert g.color[0, 0, 0] == 0.0 and g.color[0, 2, 0] == 0.0

    def test_gradcheck_sample(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            assert run_gradient_check(rng) < 1e-3

    def test_gradcheck_normalized_depth(self):
        rng = np.random.default_rng(43)
        for _ in range(5):
            assert run_gradient_check(rng, normalize_depth=True) < 1e-3

    def test_neighbor_map_gets_no_grads(self):
        intr = line_intrinsics(4)
        maps = single_pixel_ray_maps(
            [[0.5] * 4, [0.6] * 4],
            [[(0.2, 0.4, 0.6)] * 4, [(0.8, 0.1, 0.3)] * 4],
            [1.0, 1.6],
            intr,
        )
        ones = np.ones((1, 4))
        g0 = splat_backward(maps, Pose.identity(), intr, np.ones((1, 4, 3)), ones, ones, learnable_map=0)
        g1 = splat_backward(maps, Pose.identity(), intr, np.ones((1, 4, 3)), ones, ones, learnable_map=1)
        assert np.abs(g0.color).max() > 0.0
        assert np.abs(g1.color).max() > 0.0
        # occluded layer sees the front layer's transmittance
        npt.assert_allclose(g1.color[0, 0], 0.6 * 0.5, atol=1e-12)

    def test_offscreen_gaussian_zero_grad(self):
        frame = _plane_frame(w=16, h=16)
        m = init_gaussians(frame, Pose.identity())
        pose = se3_exp([0.0, 1.2, 0.0, 0.0, 0.0, 0.0])  # look far away
        ones = np.ones((16, 16))
        g = splat_backward([m], pose, frame.intrinsics, np.ones((16, 16, 3)), ones, ones)
        npt.assert_array_equal(g.delta, 0.0)
