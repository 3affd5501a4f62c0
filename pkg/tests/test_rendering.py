"""Ray sampling, opacity conversion, compositing and surface extraction.

Compositing is checked against a brute-force double-loop oracle; surface
casting against analytic ray-plane depths on the cuboid template.
"""

import math

import numpy as np
import pytest
import torch

from poseprobe import fields as F
from poseprobe import rendering as R

DT = torch.float64


def _probe():
    return F.ProbeConfig((0.0, 0.0, 0.4), (0.3, 0.22, 0.38))


def _hybrid(dims=(65, 65, 65)):
    return F.HybridSdf(_probe(), grid_dims=dims, deform_hidden=(8, 8),
                       seed=0, dtype=DT)


def brute_force_composite(alphas, colors, mids, background):
    """Independent O(n^2) reference for transmittance compositing."""
    n = len(alphas)
    rgb = np.array(background, dtype=np.float64).copy() * 1.0
    total_w = 0.0
    out = np.zeros(3)
    depth_num = 0.0
    for i in range(n):
        trans = 1.0
        for j in range(i):
            trans *= 1.0 - alphas[j]
        w = trans * alphas[i]
        out += w * np.asarray(colors[i])
        depth_num += w * mids[i]
        total_w += w
    out += (1.0 - total_w) * rgb
    depth = depth_num / max(total_w, 1e-8)
    return out, depth, total_w


class TestSampleRay:
    def test_miss_returns_empty(self):
        t = R.sample_ray([5, 5, 5], [0, 0, 1], [-1, -1, -1], [1, 1, 1], 0.25)
        assert t.numel() == 0

    def test_axis_aligned_spacing(self):
        t = R.sample_ray([-2, 0, 0], [1, 0, 0], [-1, -1, -1], [1, 1, 1], 0.25)
        # entry depth 1, exit 3 -> ladder 1.0, 1.25, ..., 3.0
        expected = 1.0 + 0.25 * np.arange(9)
        np.testing.assert_allclose(t.numpy(), expected, atol=1e-12)

    def test_deterministic_without_jitter(self):
        a = R.sample_ray([-2, 0.1, 0.2], [1, 0, 0], [-1, -1, -1], [1, 1, 1], 0.3)
        b = R.sample_ray([-2, 0.1, 0.2], [1, 0, 0], [-1, -1, -1], [1, 1, 1], 0.3)
        assert torch.equal(a, b)

    def test_jitter_bounded_and_seeded(self):
        g1 = torch.Generator().manual_seed(4)
        g2 = torch.Generator().manual_seed(4)
        base = R.sample_ray([-2, 0, 0], [1, 0, 0], [-1, -1, -1], [1, 1, 1],
                            0.25)
        j1 = R.sample_ray([-2, 0, 0], [1, 0, 0], [-1, -1, -1], [1, 1, 1],
                          0.25, rng=g1)
        j2 = R.sample_ray([-2, 0, 0], [1, 0, 0], [-1, -1, -1], [1, 1, 1],
                          0.25, rng=g2)
        assert torch.equal(j1, j2)
        assert bool((j1 >= base).all()) and bool((j1 <= base + 0.25 + 1e-12).all())

    def test_origin_inside_box(self):
        t = R.sample_ray([0, 0, 0], [0, 0, 1], [-1, -1, -1], [1, 1, 1], 0.5)
        np.testing.assert_allclose(t.numpy(), [0.0, 0.5, 1.0], atol=1e-12)


class TestSdfToAlpha:
    def test_equal_values_zero(self):
        a = R.sdf_to_alpha(torch.tensor(0.7, dtype=DT),
                           torch.tensor(0.7, dtype=DT))
        assert float(a) == 0.0

    def test_hand_computed_crossing(self):
        # (sig(2) - sig(-2)) / sig(2)
        a = R.sdf_to_alpha(torch.tensor(2.0, dtype=DT),
                           torch.tensor(-2.0, dtype=DT))
        sig = lambda x: 1 / (1 + math.exp(-x))
        assert float(a) == pytest.approx((sig(2) - sig(-2)) / sig(2), abs=1e-12)
        assert float(a) == pytest.approx(0.8647, abs=1e-4)

    def test_exiting_surface_clamped(self):
        a = R.sdf_to_alpha(torch.tensor(-1.0, dtype=DT),
                           torch.tensor(1.0, dtype=DT))
        assert float(a) == 0.0

    def test_range(self):
        rng = np.random.default_rng(0)
        m = torch.tensor(rng.normal(0, 3, (100, 2)), dtype=DT)
        a = R.sdf_to_alpha(m[:, 0], m[:, 1])
        assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


class TestCompositing:
    def test_weight_identity(self):
        rng = np.random.default_rng(1)
        alphas = torch.tensor(rng.uniform(0, 1, (50, 12)), dtype=DT)
        trans, w = R.compositing_weights(alphas)
        total = w.sum(dim=-1)
        expected = 1.0 - torch.prod(1.0 - alphas, dim=-1)
        assert float((total - expected).abs().max()) < 1e-10
        assert float(w.min()) >= 0.0
        assert bool((trans[:, 0] == 1.0).all())

    def test_all_transparent_gives_background(self):
        edges = torch.linspace(1, 2, 6, dtype=DT)
        alphas = torch.zeros(5, dtype=DT)
        colors = torch.rand(5, 3, generator=torch.Generator().manual_seed(0)
                            ).to(DT)
        s = R.RenderSample.from_alphas(edges, alphas, colors)
        bg = torch.tensor([0.2, 0.4, 0.6], dtype=DT)
        rgb, depth, opacity = R.composite(s, bg)
        np.testing.assert_allclose(rgb.numpy(), bg.numpy(), atol=1e-15)
        assert float(opacity) == 0.0

    def test_hand_computed_two_samples(self):
        # alpha=[0.5,0.5], red/blue, black bg: w=[0.5,0.25], C=(0.5,0,0.25)
        edges = torch.tensor([0.0, 1.0, 2.0], dtype=DT)
        alphas = torch.tensor([0.5, 0.5], dtype=DT)
        colors = torch.tensor([[1, 0, 0], [0, 0, 1]], dtype=DT)
        s = R.RenderSample.from_alphas(edges, alphas, colors)
        rgb, depth, opacity = R.composite(s, torch.zeros(3, dtype=DT))
        np.testing.assert_allclose(rgb.numpy(), [0.5, 0.0, 0.25], atol=1e-15)
        assert float(opacity) == pytest.approx(0.75)
        # depth = (0.5*0.5 + 0.25*1.5) / 0.75
        assert float(depth) == pytest.approx((0.25 + 0.375) / 0.75)

    def test_single_opaque_sample(self):
        edges = torch.tensor([2.0, 2.5], dtype=DT)
        alphas = torch.tensor([1.0], dtype=DT)
        colors = torch.tensor([[0.3, 0.7, 0.1]], dtype=DT)
        s = R.RenderSample.from_alphas(edges, alphas, colors)
        rgb, depth, opacity = R.composite(s, torch.ones(3, dtype=DT))
        np.testing.assert_allclose(rgb.numpy(), [0.3, 0.7, 0.1], atol=1e-15)
        assert float(depth) == pytest.approx(2.25)
        assert float(opacity) == pytest.approx(1.0)

    def test_brute_force_oracle_random(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = rng.integers(1, 16)
            edges = np.sort(rng.uniform(0, 5, n + 1))
            alphas = rng.uniform(0, 1, n)
            colors = rng.uniform(0, 1, (n, 3))
            bg = rng.uniform(0, 1, 3)
            s = R.RenderSample.from_alphas(
                torch.tensor(edges, dtype=DT), torch.tensor(alphas, dtype=DT),
                torch.tensor(colors, dtype=DT))
            rgb, depth, opacity = R.composite(s, torch.tensor(bg, dtype=DT))
            mids = 0.5 * (edges[:-1] + edges[1:])
            rgb_o, depth_o, op_o = brute_force_composite(alphas, colors, mids, bg)
            np.testing.assert_allclose(rgb.numpy(), rgb_o, atol=1e-10)
            assert float(depth) == pytest.approx(depth_o, abs=1e-10)
            assert float(opacity) == pytest.approx(op_o, abs=1e-10)

    def test_zero_alpha_insertion_invariance(self):
        rng = np.random.default_rng(3)
        edges = np.sort(rng.uniform(0, 4, 7))
        alphas = rng.uniform(0, 1, 6)
        colors = rng.uniform(0, 1, (6, 3))
        bg = np.array([1.0, 1.0, 1.0])
        s1 = R.RenderSample.from_alphas(
            torch.tensor(edges, dtype=DT), torch.tensor(alphas, dtype=DT),
            torch.tensor(colors, dtype=DT))
        rgb1, _, op1 = R.composite(s1, torch.tensor(bg, dtype=DT))
        # split bin 2 into two by inserting a zero-alpha degenerate bin
        edges2 = np.insert(edges, 3, edges[3])
        alphas2 = np.insert(alphas, 3, 0.0)
        colors2 = np.insert(colors, 3, [0.5, 0.5, 0.5], axis=0)
        s2 = R.RenderSample.from_alphas(
            torch.tensor(edges2, dtype=DT), torch.tensor(alphas2, dtype=DT),
            torch.tensor(colors2, dtype=DT))
        rgb2, _, op2 = R.composite(s2, torch.tensor(bg, dtype=DT))
        np.testing.assert_allclose(rgb1.numpy(), rgb2.numpy(), atol=1e-12)
        assert float(op1) == pytest.approx(float(op2), abs=1e-12)


class TestCastSurface:
    def test_symmetric_bracket_midpoint(self):
        # planar-ramp template along z; step chosen so the two samples
        # bracketing the surface carry exactly opposite mapped values,
        # making the secant the exact midpoint
        h = _hybrid(dims=(9, 9, 9))
        bmin, bmax = h.bbox
        zs = torch.linspace(float(bmin[2]), float(bmax[2]), 9, dtype=DT)
        vals = (zs - 0.4).view(1, 1, 1, 9).expand(1, 9, 9, 9)
        h.template.set_values(vals.contiguous())
        z_entry = float(bmax[2])
        step = 2 * (z_entry - 0.4) / 9  # samples 4 and 5 straddle z=0.4 evenly
        out = R.cast_surface_point(h, [0.0, 0.0, 1.2], [0.0, 0.0, -1.0],
                                   step=step)
        assert out is not None
        _, t_hat = out
        assert float(t_hat) == pytest.approx(0.8, abs=1e-9)

    def test_cuboid_face_depth_axis_aligned(self):
        h = _hybrid()
        out = R.cast_surface_point(h, [2.0, 0.05, 0.45], [-1.0, 0.0, 0.0])
        assert out is not None
        point, t_hat = out
        assert float(t_hat) == pytest.approx(1.7, abs=1e-6)
        np.testing.assert_allclose(point.detach().numpy(),
                                   [0.3, 0.05, 0.45], atol=1e-6)

    def test_miss_returns_none(self):
        h = _hybrid(dims=(9, 9, 9))
        assert R.cast_surface_point(h, [5, 5, 5], [0, 0, 1]) is None

    def test_translation_monotonicity(self):
        # shifting the probe along the ray moves the hit by the same amount
        delta = 0.11
        h1 = _hybrid(dims=(33, 33, 33))
        p2 = F.ProbeConfig((delta, 0.0, 0.4), (0.3, 0.22, 0.38))
        h2 = F.HybridSdf(p2, grid_dims=(33, 33, 33), deform_hidden=(8, 8),
                         seed=0, dtype=DT)
        o, d = [-2.0, 0.04, 0.42], [1.0, 0.0, 0.0]
        _, t1 = R.cast_surface_point(h1, o, d)
        _, t2 = R.cast_surface_point(h2, o, d)
        assert float(t2 - t1) == pytest.approx(delta, abs=2e-3)

    def test_oblique_ray_within_half_step(self):
        h = _hybrid()
        d = np.array([-1.0, 0.35, -0.25])
        d /= np.linalg.norm(d)
        o = np.array([1.5, -0.4, 0.7])
        out = R.cast_surface_point(h, o, d)
        assert out is not None
        _, t_hat = out
        # oracle: analytic sdf sign change along the ray (fine bisection)
        from poseprobe.fields import cuboid_sdf
        ts = np.linspace(0.5, 3.0, 20001)
        sd = cuboid_sdf(o + ts[:, None] * d, (0, 0, 0.4), (0.3, 0.22, 0.38))
        idx = np.argmax(sd <= 0)
        t_true = ts[idx]
        assert abs(float(t_hat) - t_true) < 0.5 * h.step_size


class TestVisibility:
    def test_point_behind_camera(self):
        h = _hybrid(dims=(9, 9, 9))
        from poseprobe.geometry import Intrinsics
        k = Intrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
        c2w = torch.eye(4, dtype=DT)
        pts = torch.tensor([[0.0, 0.0, -2.0]], dtype=DT)
        vis, reason = R.check_visibility(pts, c2w, k, h)
        assert not bool(vis[0])
        assert int(reason[0]) == R.OUT_OF_VIEW

    def test_empty_field_visible(self):
        h = _hybrid(dims=(9, 9, 9))
        h.template.set_values(torch.full((1, 9, 9, 9), 10.0, dtype=DT))
        from poseprobe.geometry import Intrinsics
        k = Intrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
        c2w = torch.eye(4, dtype=DT)
        c2w[2, 3] = -2.0
        pts = torch.tensor([[0.0, 0.0, 0.4]], dtype=DT)
        vis, reason = R.check_visibility(pts, c2w, k, h)
        assert bool(vis[0])
        assert int(reason[0]) == R.IN_VIEW

    def test_point_behind_cuboid_occluded(self):
        h = _hybrid()
        from poseprobe.geometry import Intrinsics
        from poseprobe.synthdata import look_at_pose
        k = Intrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
        cam = look_at_pose(np.array([2.5, 0.0, 0.4]), np.array([0.0, 0.0, 0.4]))
        c2w = torch.tensor(cam.matrix, dtype=DT)
        # a point just behind the far face of the probe
        pts = torch.tensor([[-0.5, 0.0, 0.4]], dtype=DT)
        vis, reason = R.check_visibility(pts, c2w, k, h)
        assert not bool(vis[0])
        assert int(reason[0]) == R.OCCLUDED


class TestRenderGradients:
    def test_color_gradient_wrt_pose_twist(self):
        # end-to-end FD check of the rendered color w.r.t. a pose twist
        from poseprobe.geometry import Intrinsics, se3_exp, pixel_rays
        from poseprobe.synthdata import look_at_pose

        torch.manual_seed(0)
        k = Intrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
        field = F.ObjectField(_probe(), grid_dims=(9, 9, 9), feat_channels=4,
                              color_hidden=(12,), deform_hidden=(8,),
                              pos_frequencies=2, dir_frequencies=2, seed=2,
                              dtype=DT)
        with torch.no_grad():
            field.feat.values.normal_(0, 0.3)
        base = torch.tensor(
            look_at_pose(np.array([1.6, 0.3, 0.9]),
                         np.array([0, 0, 0.4])).matrix)
        pix = torch.tensor([[30.0, 33.0], [34.0, 29.0]], dtype=DT)
        bg = torch.tensor([1.0, 1.0, 1.0], dtype=DT)

        def render_sum(twist):
            c2w = se3_exp(twist) @ base
            o, d = pixel_rays(pix, c2w, k)
            out = R.render_object(field, o, d, bg)
            return out["rgb"].sum()

        twist = torch.zeros(6, dtype=DT, requires_grad=True)
        loss = render_sum(twist)
        (g,) = torch.autograd.grad(loss, twist)
        eps = 1e-6
        for axis in range(6):
            e = torch.zeros(6, dtype=DT)
            e[axis] = eps
            fd = (render_sum(e) - render_sum(-e)) / (2 * eps)
            assert float(g[axis]) == pytest.approx(float(fd), rel=1e-3,
                                                   abs=1e-7)
