"""Voxel grid sampling, encodings, hybrid SDF and the scale mapping."""

import math

import numpy as np
import pytest
import torch

from poseprobe import fields as F

DT = torch.float64


def _probe():
    return F.ProbeConfig((0.0, 0.0, 0.4), (0.3, 0.22, 0.38))


def _grid(dims=(5, 5, 5), channels=2, lo=(-1, -1, -1), hi=(1, 1, 1), seed=0):
    g = F.VoxelGrid(dims, channels, lo, hi, dtype=DT)
    rng = np.random.default_rng(seed)
    g.set_values(torch.tensor(rng.normal(0, 1, (channels, *dims)), dtype=DT))
    return g


class TestVoxelGrid:
    def test_rejects_tiny_dims(self):
        with pytest.raises(ValueError):
            F.VoxelGrid((1, 4, 4), 1, (-1, -1, -1), (1, 1, 1))

    def test_rejects_inverted_bbox(self):
        with pytest.raises(ValueError):
            F.VoxelGrid((4, 4, 4), 1, (1, -1, -1), (-1, 1, 1))

    def test_lattice_node_exact(self):
        g = _grid()
        # node (i,j,k) sits at -1 + 0.5*(i,j,k)
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 4)]:
            p = torch.tensor([[-1 + 0.5 * idx[0], -1 + 0.5 * idx[1],
                               -1 + 0.5 * idx[2]]], dtype=DT)
            expected = g.values[:, idx[0], idx[1], idx[2]]
            got = F.grid_sample(g, p)[0]
            assert torch.equal(got, expected)

    def test_constant_cell(self):
        g = F.VoxelGrid((3, 3, 3), 1, (-1, -1, -1), (1, 1, 1), init=4.25,
                        dtype=DT)
        p = torch.tensor([[0.123, -0.77, 0.501]], dtype=DT)
        assert float(F.grid_sample(g, p)) == pytest.approx(4.25, abs=1e-15)

    def test_alternating_x_center(self):
        # corners 0/1 alternating along x only: center of a cell -> 0.5
        g = F.VoxelGrid((3, 3, 3), 1, (0, 0, 0), (2, 2, 2), dtype=DT)
        vals = torch.zeros(1, 3, 3, 3, dtype=DT)
        vals[0, 1] = 1.0  # value = x index parity
        g.set_values(vals)
        p = torch.tensor([[0.5, 0.5, 0.5]], dtype=DT)
        assert float(F.grid_sample(g, p)) == pytest.approx(0.5, abs=1e-15)

    def test_linearity_in_values(self):
        g1, g2 = _grid(seed=1), _grid(seed=2)
        g3 = _grid(seed=3)
        a, b = 0.7, -1.3
        g3.set_values(a * g1.values + b * g2.values)
        rng = np.random.default_rng(4)
        p = torch.tensor(rng.uniform(-1.2, 1.2, (40, 3)), dtype=DT)
        lhs = F.grid_sample(g3, p)
        rhs = a * F.grid_sample(g1, p) + b * F.grid_sample(g2, p)
        assert float((lhs - rhs).abs().max()) < 1e-12

    def test_outside_clamps_to_boundary(self):
        g = _grid()
        inside = torch.tensor([[1.0, 0.2, -0.4]], dtype=DT)
        outside = torch.tensor([[3.5, 0.2, -0.4]], dtype=DT)
        assert torch.allclose(F.grid_sample(g, outside), F.grid_sample(g, inside))
        assert bool(g.inside(inside)[0]) and not bool(g.inside(outside)[0])

    def test_analytic_grad_matches_autograd(self):
        g = _grid(seed=5)
        rng = np.random.default_rng(6)
        p = torch.tensor(rng.uniform(-0.95, 0.95, (50, 3)), dtype=DT,
                         requires_grad=True)
        vals, grad = F.grid_sample_with_grad(g, p)
        for c in range(2):
            (ag,) = torch.autograd.grad(F.grid_sample(g, p)[:, c].sum(), p,
                                        retain_graph=True)
            assert float((grad[:, c] - ag).abs().max()) < 1e-12

    def test_analytic_grad_matches_fd(self):
        g = _grid(seed=7, channels=1)
        rng = np.random.default_rng(8)
        # keep clear of cell boundaries (multiples of 0.5)
        p_np = rng.uniform(-0.9, 0.9, (30, 3))
        p_np = np.where(np.abs((p_np % 0.5) - 0.25) < 0.05, p_np, p_np * 0.99)
        p = torch.tensor(p_np, dtype=DT)
        _, grad = F.grid_sample_with_grad(g, p)
        h = 1e-6
        for axis in range(3):
            e = torch.zeros(3, dtype=DT)
            e[axis] = h
            fd = (F.grid_sample(g, p + e) - F.grid_sample(g, p - e)) / (2 * h)
            assert float((grad[:, 0, axis] - fd[:, 0]).abs().max()) < 1e-7


class TestEncoding:
    def test_full_alpha_all_bands_active(self):
        sch = F.EncodingSchedule(4, 1.0, 1.0, progress=0.0)
        assert torch.allclose(sch.weights(), torch.ones(4, dtype=DT))

    def test_zero_alpha_only_raw(self):
        sch = F.EncodingSchedule(4, 0.0, 1.0, progress=0.0)
        p = torch.tensor([[0.3, -0.7]], dtype=DT)
        out = F.positional_encode(p, sch)
        assert out.shape == (1, 2 + 2 * 2 * 4)
        assert torch.allclose(out[:, :2], p)
        assert torch.allclose(out[:, 2:], torch.zeros_like(out[:, 2:]))

    def test_half_band_cosine_ease(self):
        # K=4, alpha=1.5: w = [1, 0.5*(1-cos(pi/2)), 0, 0] = [1, 0.5, 0, 0]
        sch = F.EncodingSchedule(4, 0.0, 1.0, progress=1.5 / 4.0)
        assert sch.alpha == pytest.approx(1.5)
        w = sch.weights()
        np.testing.assert_allclose(w.numpy(), [1.0, 0.5, 0.0, 0.0], atol=1e-15)

    def test_layout_and_frequencies(self):
        sch = F.EncodingSchedule(2, 1.0, 1.0)
        p = torch.tensor([[0.25]], dtype=DT)
        out = F.positional_encode(p, sch).numpy()[0]
        expected = [0.25,
                    math.sin(math.pi * 0.25), math.cos(math.pi * 0.25),
                    math.sin(2 * math.pi * 0.25), math.cos(2 * math.pi * 0.25)]
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_weights_monotone_in_progress(self):
        sch = F.EncodingSchedule(6, 0.3, 0.9)
        prev = None
        for prog in np.linspace(0, 1, 11):
            sch.progress = float(prog)
            w = sch.weights()
            if prev is not None:
                assert bool((w >= prev - 1e-12).all())
            prev = w

    def test_invalid_window(self):
        with pytest.raises(ValueError):
            F.EncodingSchedule(4, 0.8, 0.5)


class TestMapping:
    def test_init_values(self):
        m = F.MappingParams(10.0, 2.0, dtype=DT)
        assert float(m.beta) == pytest.approx(10.0, abs=1e-9)
        assert float(m.gamma) == pytest.approx(2.0, abs=1e-9)

    def test_positive_for_any_raw(self):
        m = F.MappingParams(dtype=DT)
        with torch.no_grad():
            m.beta_raw.fill_(-20.0)
            m.gamma_raw.fill_(-35.0)
        assert float(m.beta) > 0 and float(m.gamma) > 0

    def test_zero_maps_to_zero(self):
        m = F.MappingParams(10.0, 2.0, dtype=DT)
        assert float(m(torch.tensor(0.0, dtype=DT))) == 0.0

    def test_hand_computed_value(self):
        # 10 * (1/(1+e^-1) - 0.5) = 2.3105857863...
        m = F.MappingParams(10.0, 2.0, dtype=DT)
        val = float(m(torch.tensor(0.5, dtype=DT)))
        assert val == pytest.approx(10.0 * (1 / (1 + math.exp(-1)) - 0.5),
                                    abs=1e-9)
        assert val == pytest.approx(2.3105857863, abs=1e-6)

    def test_saturation_limit(self):
        m = F.MappingParams(10.0, 2.0, dtype=DT)
        assert float(m(torch.tensor(1e6, dtype=DT))) == pytest.approx(5.0)

    def test_odd_and_monotone(self):
        m = F.MappingParams(7.0, 3.0, dtype=DT)
        x = torch.linspace(-4, 4, 101, dtype=DT)
        y = m(x)
        assert float((y + m(-x)).abs().max()) < 1e-12
        assert bool((torch.diff(y) > 0).all())


def _hybrid(dims=(17, 17, 17), seed=0, deform_hidden=(16, 16)):
    return F.HybridSdf(_probe(), grid_dims=dims, deform_hidden=deform_hidden,
                       seed=seed, dtype=DT)


class TestHybridSdf:
    def test_face_point_near_zero(self):
        h = _hybrid()
        p = torch.tensor([[0.3, 0.0, 0.4], [0.0, 0.22, 0.4], [0.0, 0.0, 0.78]],
                         dtype=DT)
        half_diag = float(h.template.voxel_size.norm()) / 2
        assert float(h.sdf_raw(p).abs().max()) < half_diag

    def test_zero_deform_equals_template(self):
        h = _hybrid()
        rng = np.random.default_rng(0)
        p = torch.tensor(rng.uniform(-0.4, 0.4, (50, 3)), dtype=DT)
        assert torch.equal(h.sdf_raw(p), h.template.sample(p)[..., 0])

    def test_constant_deformation_shift_oracle(self):
        h = _hybrid()
        delta = 0.07
        with torch.no_grad():
            h.deform.layers[-1].bias.copy_(torch.tensor([delta, 0, 0, 0],
                                                        dtype=DT))
        rng = np.random.default_rng(1)
        p = torch.tensor(rng.uniform(-0.3, 0.3, (40, 3)), dtype=DT)
        p[:, 2] += 0.4
        shifted = p + torch.tensor([delta, 0.0, 0.0], dtype=DT)
        expected = h.template.sample(shifted)[..., 0]
        assert float((h.sdf_raw(p) - expected).abs().max()) < 1e-9

    def test_mapped_sign_and_bound(self):
        h = _hybrid()
        rng = np.random.default_rng(2)
        p = torch.tensor(rng.uniform(-0.5, 0.5, (100, 3)), dtype=DT)
        p[:, 2] += 0.4
        raw = h.sdf_raw(p)
        mapped = h.sdf_mapped(p)
        assert bool((torch.sign(mapped) == torch.sign(raw)).all())
        assert float(mapped.abs().max()) < float(h.mapping.beta) / 2

    def test_gradient_linear_ramp(self):
        h = _hybrid()
        # overwrite template with x-ramp; mapped gradient parallel to +x
        bmin, bmax = h.bbox
        xs = torch.linspace(bmin[0], bmax[0], 17, dtype=DT)
        vals = xs.view(17, 1, 1).expand(17, 17, 17).clone()
        h.template.set_values(vals.unsqueeze(0))
        p = torch.tensor([[0.05, 0.02, 0.42]], dtype=DT)
        g = h.sdf_gradient(p)[0]
        assert float(g[0]) > 0
        assert abs(float(g[1])) < 1e-12 and abs(float(g[2])) < 1e-12

    def test_gradient_constant_template(self):
        h = _hybrid()
        h.template.set_values(torch.full((1, 17, 17, 17), 0.2, dtype=DT))
        p = torch.tensor([[0.1, -0.05, 0.35]], dtype=DT)
        np.testing.assert_allclose(h.sdf_gradient(p)[0].detach().numpy(),
                                   np.zeros(3), atol=1e-12)

    def test_gradient_fd_check(self):
        h = _hybrid(seed=3)
        with torch.no_grad():  # non-trivial deformation
            for prm in h.deform.layers[-1].parameters():
                prm.uniform_(-0.04, 0.04)
        rng = np.random.default_rng(4)
        p = torch.tensor(rng.uniform(-0.35, 0.35, (100, 3)), dtype=DT)
        p[:, 2] += 0.4
        g = h.sdf_gradient(p)
        step = 1e-4 * float(h.template.voxel_size.mean())
        ok = 0
        for axis in range(3):
            e = torch.zeros(3, dtype=DT)
            e[axis] = step
            fd = (h.sdf_mapped(p + e) - h.sdf_mapped(p - e)) / (2 * step)
            rel = (g[:, axis] - fd).abs() / fd.abs().clamp(min=1e-3)
            ok += int((rel < 1e-3).sum())
        assert ok >= 0.97 * 300  # a few points straddle cell boundaries

    def test_gradient_matches_autograd_reference(self):
        h = _hybrid(seed=5)
        with torch.no_grad():
            for prm in h.deform.layers[-1].parameters():
                prm.uniform_(-0.05, 0.05)
        rng = np.random.default_rng(6)
        p = torch.tensor(rng.uniform(-0.4, 0.4, (60, 3)), dtype=DT)
        p[:, 2] += 0.4
        diff = h.sdf_gradient(p) - h.sdf_gradient_autograd(p)
        assert float(diff.abs().max()) < 1e-12


class TestMlpJacobian:
    def test_matches_autograd(self):
        mlp = F.Mlp([3, 12, 12, 4], seed=9, dtype=DT)
        rng = np.random.default_rng(10)
        x = torch.tensor(rng.normal(0, 1, (25, 3)), dtype=DT)
        out, jac = mlp.forward_with_jacobian(x)
        x_req = x.clone().requires_grad_(True)
        out_ref = mlp(x_req)
        assert torch.allclose(out, out_ref, atol=1e-14)
        for o in range(4):
            (g,) = torch.autograd.grad(out_ref[:, o].sum(), x_req,
                                       retain_graph=True)
            assert float((jac[:, o] - g).abs().max()) < 1e-13


class TestObjectColor:
    def _field(self):
        return F.ObjectField(_probe(), grid_dims=(9, 9, 9), feat_channels=4,
                             color_hidden=(16, 16), deform_hidden=(8, 8),
                             pos_frequencies=3, dir_frequencies=2, seed=11,
                             dtype=DT)

    def test_output_in_unit_interval(self):
        f = self._field()
        rng = np.random.default_rng(12)
        p = torch.tensor(rng.uniform(-0.4, 0.4, (30, 3)), dtype=DT)
        p[:, 2] += 0.4
        d = torch.tensor(rng.normal(0, 1, (30, 3)), dtype=DT)
        d = d / d.norm(dim=-1, keepdim=True)
        c = f.color(p, d)
        assert float(c.min()) >= 0.0 and float(c.max()) <= 1.0

    def test_deterministic(self):
        f = self._field()
        p = torch.tensor([[0.1, 0.0, 0.45]], dtype=DT)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=DT)
        assert torch.equal(f.color(p, d), f.color(p, d))

    def test_batch_permutation_oracle(self):
        f = self._field()
        rng = np.random.default_rng(13)
        p = torch.tensor(rng.uniform(-0.3, 0.3, (16, 3)), dtype=DT)
        p[:, 2] += 0.4
        d = torch.tensor(rng.normal(0, 1, (16, 3)), dtype=DT)
        d = d / d.norm(dim=-1, keepdim=True)
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(3))
        full = f.color(p, d)
        assert torch.allclose(f.color(p[perm], d[perm]), full[perm], atol=1e-14)

    def test_degenerate_normal_counted(self):
        f = self._field()
        f.sdf.template.set_values(torch.zeros(1, 9, 9, 9, dtype=DT))
        p = torch.tensor([[0.0, 0.0, 0.4]], dtype=DT)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=DT)
        c = f.color(p, d)
        assert f.diagnostics.get("degenerate_normals", 0) >= 1
        assert torch.isfinite(c).all()


class TestCuboidSdf:
    def test_known_values(self):
        he = (1.0, 2.0, 3.0)
        assert F.cuboid_sdf(np.array([0, 0, 0]), (0, 0, 0), he) == pytest.approx(-1.0)
        assert F.cuboid_sdf(np.array([2, 0, 0]), (0, 0, 0), he) == pytest.approx(1.0)
        # outside a corner: Euclidean distance to it
        d = F.cuboid_sdf(np.array([2, 3, 4]), (0, 0, 0), he)
        assert d == pytest.approx(math.sqrt(3))

    def test_zero_on_faces(self):
        assert F.cuboid_sdf(np.array([1.0, 0.5, -2.0]), (0, 0, 0),
                            (1.0, 2.0, 3.0)) == pytest.approx(0.0, abs=1e-15)
