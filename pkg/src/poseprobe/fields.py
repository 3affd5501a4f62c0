"""Voxel grids, small MLPs, coarse-to-fine encoding and the hybrid SDF.

The object geometry is a non-learnable cuboid-initialized SDF voxel grid
("template") refined by an implicit deformation network predicting a
per-point offset vector and scalar correction, followed by a learnable
sigmoid scale mapping. Appearance comes from a feature voxel grid decoded
by a shallow MLP conditioned on the SDF normal. The scene branch is a
plain implicit density/color MLP.

All modules run in the dtype of their parameters; tests use float64,
training uses float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class ProbeConfig:
    """Placement and extent of the probe object in the optimization frame."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    @property
    def max_radius(self) -> float:
        # half diagonal: every ray hitting the probe passes within this
        # distance of the center
        return float(np.linalg.norm(self.half_extents))

    def bbox(self, inflate: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64) * (1.0 + inflate)
        return c - h, c + h


def cuboid_sdf(points: np.ndarray, center, half_extents) -> np.ndarray:
    """Exact signed distance to an axis-aligned cuboid (negative inside)."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    q = np.abs(p) - np.asarray(half_extents, dtype=np.float64)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


class VoxelGrid(nn.Module):
    """Dense C-channel grid over an axis-aligned box with trilinear sampling.

    dims counts lattice nodes per axis; node (i,j,k) sits at
    bbox_min + (i,j,k)/(dims-1) * (bbox_max - bbox_min). Sampling outside
    the box clamps to the boundary.
    """

    def __init__(self, dims, channels, bbox_min, bbox_max, learnable=True,
                 init=0.0, dtype=torch.float32):
        super().__init__()
        dims = tuple(int(d) for d in dims)
        if any(d < 2 for d in dims):
            raise ValueError(f"grid needs >= 2 nodes per axis, got {dims}")
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        if not np.all(bbox_min < bbox_max):
            raise ValueError("bbox min must be strictly below max componentwise")
        self.dims = dims
        self.channels = int(channels)
        self.register_buffer("bbox_min", torch.tensor(bbox_min, dtype=dtype))
        self.register_buffer("bbox_max", torch.tensor(bbox_max, dtype=dtype))
        values = torch.full((self.channels, *dims), float(init), dtype=dtype)
        if learnable:
            self.values = nn.Parameter(values)
        else:
            self.register_buffer("values", values)

    @property
    def voxel_size(self) -> torch.Tensor:
        n = torch.tensor([d - 1 for d in self.dims], dtype=self.bbox_min.dtype)
        return (self.bbox_max - self.bbox_min) / n

    def set_values(self, values: torch.Tensor) -> None:
        with torch.no_grad():
            self.values.copy_(values.reshape(self.values.shape))

    def inside(self, p: torch.Tensor) -> torch.Tensor:
        return ((p >= self.bbox_min) & (p <= self.bbox_max)).all(dim=-1)

    def sample(self, p: torch.Tensor) -> torch.Tensor:
        return grid_sample(self, p)


def _corner_setup(grid: VoxelGrid, p: torch.Tensor):
    """One fused gather of the 8 cell corners plus interpolation weights.

    Corner order is [000,100,010,110,001,101,011,111] (bit 0 = x).
    Returns (corners (C,B,8), f (B,3), active (B,3), dims (3,)).
    """
    dims = torch.tensor([d - 1 for d in grid.dims], dtype=p.dtype, device=p.device)
    u_raw = (p - grid.bbox_min) / (grid.bbox_max - grid.bbox_min) * dims
    u = torch.clamp(u_raw, torch.zeros_like(dims), dims)
    i0f = torch.clamp(torch.floor(u), max=dims - 1)
    f = u - i0f  # gradient w.r.t. p flows through here
    i0 = i0f.long()
    ny, nz = grid.dims[1], grid.dims[2]
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    dx, dy, dz = ny * nz, nz, 1
    offs = torch.tensor([0, dx, dy, dx + dy, dz, dx + dz, dy + dz,
                         dx + dy + dz], device=p.device)
    lin = (base.unsqueeze(-1) + offs).reshape(-1)
    corners = grid.values.reshape(grid.channels, -1)[:, lin].reshape(
        grid.channels, -1, 8)
    active = (u_raw >= 0) & (u_raw <= dims)
    return corners, f, active, dims


def _corner_weights(f: torch.Tensor) -> torch.Tensor:
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    wxy = torch.cat([(1 - fx) * (1 - fy), fx * (1 - fy),
                     (1 - fx) * fy, fx * fy], dim=-1)
    return torch.cat([wxy * (1 - fz), wxy * fz], dim=-1)  # (B,8)


def grid_sample(grid: VoxelGrid, p: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of grid values at world points (...,3) -> (...,C).

    Differentiable w.r.t. both p and the grid values.
    """
    shape = p.shape[:-1]
    p = p.reshape(-1, 3)
    corners, f, _, _ = _corner_setup(grid, p)
    w = _corner_weights(f)
    out = torch.einsum("cbk,bk->bc", corners, w)
    return out.reshape(*shape, grid.channels)


def grid_sample_with_grad(grid: VoxelGrid, p: torch.Tensor
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Trilinear sample plus its closed-form spatial gradient.

    Returns (values (...,C), dvalues/dp (...,C,3)); the gradient is built
    from ordinary tensor ops, so the outer autodiff pass still reaches the
    grid values and the query points. Clamped (outside-box) axes get zero
    gradient, matching the subgradient of the clamp.
    """
    shape = p.shape[:-1]
    p = p.reshape(-1, 3)
    corners, f, active, dims = _corner_setup(grid, p)
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    wxy = torch.cat([(1 - fx) * (1 - fy), fx * (1 - fy),
                     (1 - fx) * fy, fx * fy], dim=-1)
    w = torch.cat([wxy * (1 - fz), wxy * fz], dim=-1)
    out = torch.einsum("cbk,bk->bc", corners, w)

    gx = torch.cat([-(1 - fy), (1 - fy), -fy, fy], dim=-1)
    dwx = torch.cat([gx * (1 - fz), gx * fz], dim=-1)
    gy = torch.cat([-(1 - fx), -fx, (1 - fx), fx], dim=-1)
    dwy = torch.cat([gy * (1 - fz), gy * fz], dim=-1)
    dwz = torch.cat([-wxy, wxy], dim=-1)
    dw = torch.stack([dwx, dwy, dwz], dim=-1)  # (B,8,3)
    scale = (dims / (grid.bbox_max - grid.bbox_min)) * active.to(p.dtype)
    grad = torch.einsum("cbk,bkj->bcj", corners, dw) * scale.unsqueeze(1)
    return (out.reshape(*shape, grid.channels),
            grad.reshape(*shape, grid.channels, 3))


@dataclass
class EncodingSchedule:
    """Coarse-to-fine frequency window for sinusoidal encoding.

    The active band count alpha ramps from num_frequencies*alpha_start to
    num_frequencies*alpha_end as progress goes 0 -> 1, with a cosine ease
    on the fractional band.
    """

    num_frequencies: int
    alpha_start: float = 1.0
    alpha_end: float = 1.0
    progress: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.alpha_start <= self.alpha_end <= 1.0):
            raise ValueError("need 0 <= alpha_start <= alpha_end <= 1")

    @property
    def alpha(self) -> float:
        frac = self.alpha_start + self.progress * (self.alpha_end - self.alpha_start)
        return self.num_frequencies * frac

    def weights(self, dtype=torch.float64, device=None) -> torch.Tensor:
        k = torch.arange(1, self.num_frequencies + 1, dtype=dtype, device=device)
        x = torch.clamp(self.alpha - k + 1.0, 0.0, 1.0)
        return 0.5 * (1.0 - torch.cos(math.pi * x))

    def encoded_dim(self, d: int) -> int:
        return d * (1 + 2 * self.num_frequencies)


def positional_encode(p: torch.Tensor, schedule: EncodingSchedule) -> torch.Tensor:
    """[p, w_1 (sin, cos)(2^0 pi p), ..., w_K (sin, cos)(2^(K-1) pi p)]."""
    K = schedule.num_frequencies
    if K == 0:
        return p
    w = schedule.weights(dtype=p.dtype, device=p.device)
    freqs = 2.0 ** torch.arange(K, dtype=p.dtype, device=p.device) * math.pi
    ang = p.unsqueeze(-2) * freqs.unsqueeze(-1)  # (..., K, d)
    bands = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-2)  # (..., K, 2, d)
    bands = bands * w.unsqueeze(-1).unsqueeze(-1)
    return torch.cat([p, bands.reshape(*p.shape[:-1], -1)], dim=-1)


class Mlp(nn.Module):
    """Plain fully-connected network with ReLU hidden activations."""

    def __init__(self, widths, zero_init_last=False, seed=0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            lin = nn.Linear(a, b, dtype=dtype)
            bound = 1.0 / math.sqrt(a)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers.append(lin)
        if zero_init_last:
            with torch.no_grad():
                layers[-1].weight.zero_()
                layers[-1].bias.zero_()
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.relu(lin(x))
        return self.layers[-1](x)

    def forward_with_jacobian(self, x: torch.Tensor
                              ) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward pass plus the per-point input Jacobian (...,out,in).

        Chained ReLU-masked weight products; ordinary tensor ops, so the
        outer autodiff pass reaches the layer weights. relu'(0) = 0 as in
        the standard backward.
        """
        jac = self.layers[0].weight.expand(*x.shape[:-1], -1, -1)
        z = self.layers[0](x)
        for lin in self.layers[1:]:
            mask = (z > 0).to(x.dtype)
            z = torch.relu(z)
            jac = jac * mask.unsqueeze(-1)
            jac = lin.weight @ jac
            z = lin(z)
        return z, jac


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class MappingParams(nn.Module):
    """Learnable sigmoid rescaling of the raw SDF: S = beta * (sigmoid(gamma*s) - 0.5)."""

    def __init__(self, beta=10.0, gamma=2.0, dtype=torch.float32):
        super().__init__()
        self.beta_raw = nn.Parameter(torch.tensor(_inverse_softplus(beta), dtype=dtype))
        self.gamma_raw = nn.Parameter(torch.tensor(_inverse_softplus(gamma), dtype=dtype))

    @property
    def beta(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.beta_raw)

    @property
    def gamma(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.gamma_raw)

    def forward(self, sdf: torch.Tensor) -> torch.Tensor:
        return self.beta * (torch.sigmoid(self.gamma * sdf) - 0.5)


class HybridSdf(nn.Module):
    """Cuboid template grid + implicit deformation network + scale mapping.

    The template stores exact analytic cuboid SDF values at its lattice
    nodes and is never trained; only the deformation MLP and the mapping
    parameters are learnable.
    """

    def __init__(self, probe: ProbeConfig, grid_dims=(96, 96, 96),
                 deform_hidden=(128, 128, 128), bbox_inflate=0.3,
                 beta=10.0, gamma=2.0, deform_enabled=True, seed=0,
                 dtype=torch.float32):
        super().__init__()
        self.probe = probe
        bmin, bmax = probe.bbox(bbox_inflate)
        self.template = VoxelGrid(grid_dims, 1, bmin, bmax, learnable=False, dtype=dtype)
        xs = [np.linspace(bmin[a], bmax[a], grid_dims[a]) for a in range(3)]
        nodes = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1)
        sdf = cuboid_sdf(nodes, probe.center, probe.half_extents)
        self.template.values.copy_(torch.tensor(sdf[None], dtype=dtype))
        self.deform = Mlp([3, *deform_hidden, 4], zero_init_last=True,
                          seed=seed, dtype=dtype)
        self.mapping = MappingParams(beta, gamma, dtype=dtype)
        self.deform_enabled = deform_enabled
        c = 0.5 * (bmin + bmax)
        h = 0.5 * (bmax - bmin)
        self.register_buffer("_center", torch.tensor(c, dtype=dtype))
        self.register_buffer("_half", torch.tensor(h, dtype=dtype))

    def deform_out(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Deformation vector v (...,3) and correction ds (...,) at p."""
        out = self.deform((p - self._center) / self._half)
        return out[..., :3], out[..., 3]

    def deform_out_with_jacobian(self, p: torch.Tensor):
        """(v, ds, dv/dp (...,3,3), dds/dp (...,3)) with world-coordinate
        Jacobians."""
        out, jac = self.deform.forward_with_jacobian(
            (p - self._center) / self._half)
        jac = jac / self._half  # chain through the input normalization
        return out[..., :3], out[..., 3], jac[..., :3, :], jac[..., 3, :]

    def sdf_raw(self, p: torch.Tensor) -> torch.Tensor:
        if self.deform_enabled:
            v, ds = self.deform_out(p)
            return self.template.sample(p + v)[..., 0] + ds
        return self.template.sample(p)[..., 0]

    def sdf_raw_with_grad(self, p: torch.Tensor
                          ) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw SDF and its analytic spatial gradient (..., ), (...,3)."""
        if self.deform_enabled:
            v, ds, jv, jds = self.deform_out_with_jacobian(p)
            t, gt = grid_sample_with_grad(self.template, p + v)
            eye = torch.eye(3, dtype=p.dtype, device=p.device)
            grad = torch.einsum("...k,...kj->...j", gt[..., 0, :], eye + jv) + jds
            return t[..., 0] + ds, grad
        t, gt = grid_sample_with_grad(self.template, p)
        return t[..., 0], gt[..., 0, :]

    def sdf_mapped(self, p: torch.Tensor) -> torch.Tensor:
        return self.mapping(self.sdf_raw(p))

    def sdf_gradient(self, p: torch.Tensor) -> torch.Tensor:
        """Spatial gradient of the mapped SDF (hand-derived chain rule;
        differentiable w.r.t. the deformation, mapping and query points)."""
        s, gs = self.sdf_raw_with_grad(p)
        beta = self.mapping.beta
        gamma = self.mapping.gamma
        sig = torch.sigmoid(gamma * s)
        dm_ds = beta * gamma * sig * (1.0 - sig)
        return gs * dm_ds.unsqueeze(-1)

    def gradient_and_deform(self, p: torch.Tensor):
        """Fused pass for the field regularizers: mapped-SDF spatial
        gradient plus the deformation quantities, sharing one Jacobian
        evaluation. Returns (dS/dp (...,3), dv/dp (...,3,3) | None, ds)."""
        if self.deform_enabled:
            v, ds, jv, jds = self.deform_out_with_jacobian(p)
            t, gt = grid_sample_with_grad(self.template, p + v)
            eye = torch.eye(3, dtype=p.dtype, device=p.device)
            graw = torch.einsum("...k,...kj->...j", gt[..., 0, :], eye + jv) + jds
            s = t[..., 0] + ds
        else:
            s, graw = self.sdf_raw_with_grad(p)
            jv, ds = None, torch.zeros_like(s)
        sig = torch.sigmoid(self.mapping.gamma * s)
        dm_ds = self.mapping.beta * self.mapping.gamma * sig * (1.0 - sig)
        return graw * dm_ds.unsqueeze(-1), jv, ds

    def sdf_gradient_autograd(self, p: torch.Tensor,
                              create_graph=False) -> torch.Tensor:
        """Reverse-mode reference implementation of sdf_gradient."""
        with torch.enable_grad():
            q = p.detach().requires_grad_(True)
            s = self.sdf_mapped(q)
            (g,) = torch.autograd.grad(s.sum(), q, create_graph=create_graph)
        return g

    @property
    def bbox(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.template.bbox_min, self.template.bbox_max

    @property
    def step_size(self) -> float:
        """Default ray-marching step: 1.5x the (mean) voxel size."""
        return 1.5 * float(self.template.voxel_size.mean())


def sdf_raw(h: HybridSdf, p: torch.Tensor) -> torch.Tensor:
    return h.sdf_raw(p)


def sdf_mapped(h: HybridSdf, p: torch.Tensor) -> torch.Tensor:
    return h.sdf_mapped(p)


def sdf_gradient(h: HybridSdf, p: torch.Tensor) -> torch.Tensor:
    return h.sdf_gradient(p)


def object_color(h: HybridSdf, feat: VoxelGrid, mlp: Mlp, p: torch.Tensor,
                 d: torch.Tensor, schedule_p: EncodingSchedule,
                 schedule_d: EncodingSchedule | None = None,
                 diagnostics: dict | None = None) -> torch.Tensor:
    """Normals-conditioned color: MLP(feat(p), n, enc(p), enc(d)) -> rgb in [0,1]^3."""
    if schedule_d is None:
        schedule_d = schedule_p
    g = h.sdf_gradient(p)
    norm = torch.linalg.norm(g, dim=-1, keepdim=True)
    degenerate = norm[..., 0] < 1e-8
    if degenerate.any() and diagnostics is not None:
        diagnostics["degenerate_normals"] = (
            diagnostics.get("degenerate_normals", 0) + int(degenerate.sum())
        )
    n = torch.where(degenerate.unsqueeze(-1), torch.zeros_like(g),
                    g / torch.clamp(norm, min=1e-8))
    x = torch.cat(
        [feat.sample(p), n, positional_encode(p, schedule_p),
         positional_encode(d, schedule_d)],
        dim=-1,
    )
    return torch.sigmoid(mlp(x))


class ObjectField(nn.Module):
    """Full object branch: hybrid SDF geometry + feature grid + color MLP."""

    def __init__(self, probe: ProbeConfig, grid_dims=(96, 96, 96),
                 feat_channels=12, color_hidden=(128, 128, 128, 128),
                 deform_hidden=(128, 128, 128), pos_frequencies=6,
                 dir_frequencies=4, alpha_window=(0.5, 1.0), seed=0,
                 dtype=torch.float32):
        super().__init__()
        self.sdf = HybridSdf(probe, grid_dims=grid_dims,
                             deform_hidden=deform_hidden, seed=seed, dtype=dtype)
        bmin, bmax = self.sdf.probe.bbox()
        self.feat = VoxelGrid(grid_dims, feat_channels, bmin, bmax,
                              learnable=True, dtype=dtype)
        self.schedule_p = EncodingSchedule(pos_frequencies, *alpha_window)
        self.schedule_d = EncodingSchedule(dir_frequencies, *alpha_window)
        in_dim = (feat_channels + 3 + self.schedule_p.encoded_dim(3)
                  + self.schedule_d.encoded_dim(3))
        self.color_mlp = Mlp([in_dim, *color_hidden, 3], seed=seed + 1, dtype=dtype)
        self.diagnostics: dict = {}

    def set_progress(self, progress: float) -> None:
        self.schedule_p.progress = progress
        self.schedule_d.progress = progress

    def color(self, p: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        return object_color(self.sdf, self.feat, self.color_mlp, p, d,
                            self.schedule_p, self.schedule_d,
                            diagnostics=self.diagnostics)

    @property
    def bbox(self):
        return self.sdf.bbox

    @property
    def step_size(self) -> float:
        return self.sdf.step_size


class SceneField(nn.Module):
    """Implicit density + color field over the whole scene."""

    def __init__(self, bbox_min, bbox_max, hidden=128, depth=4,
                 pos_frequencies=6, dir_frequencies=4,
                 alpha_window=(0.4, 0.7), seed=0, dtype=torch.float32):
        super().__init__()
        self.register_buffer("bbox_min", torch.tensor(
            np.asarray(bbox_min, dtype=np.float64), dtype=dtype))
        self.register_buffer("bbox_max", torch.tensor(
            np.asarray(bbox_max, dtype=np.float64), dtype=dtype))
        self.schedule_p = EncodingSchedule(pos_frequencies, *alpha_window)
        self.schedule_d = EncodingSchedule(dir_frequencies, *alpha_window)
        trunk_in = self.schedule_p.encoded_dim(3)
        self.trunk = Mlp([trunk_in, *([hidden] * depth), hidden + 1],
                         seed=seed, dtype=dtype)
        with torch.no_grad():
            # start near-transparent so early geometry terms see an empty
            # field rather than confident fog
            self.trunk.layers[-1].bias[0] = -3.0
        head_in = hidden + self.schedule_d.encoded_dim(3)
        self.rgb_head = Mlp([head_in, hidden // 2, 3], seed=seed + 1, dtype=dtype)
        # normalize inputs to [-1, 1] so the encoding frequencies are meaningful
        c = 0.5 * (self.bbox_min + self.bbox_max)
        h = 0.5 * (self.bbox_max - self.bbox_min)
        self.register_buffer("_center", c.clone())
        self.register_buffer("_half", h.clone())

    def set_progress(self, progress: float) -> None:
        self.schedule_p.progress = progress
        self.schedule_d.progress = progress

    def density_color(self, p: torch.Tensor, d: torch.Tensor
                      ) -> tuple[torch.Tensor, torch.Tensor]:
        """sigma (...,) and rgb (...,3) at points p viewed along unit d."""
        pn = (p - self._center) / self._half
        out = self.trunk(positional_encode(pn, self.schedule_p))
        sigma = torch.nn.functional.softplus(out[..., 0])
        feat = out[..., 1:]
        rgb_in = torch.cat([feat, positional_encode(d, self.schedule_d)], dim=-1)
        rgb = torch.sigmoid(self.rgb_head(rgb_in))
        return sigma, rgb

    def density(self, p: torch.Tensor) -> torch.Tensor:
        pn = (p - self._center) / self._half
        out = self.trunk(positional_encode(pn, self.schedule_p))
        return torch.nn.functional.softplus(out[..., 0])

    @property
    def bbox(self):
        return self.bbox_min, self.bbox_max
