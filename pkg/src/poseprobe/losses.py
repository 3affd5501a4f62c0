"""Training objectives for the two rendering branches.

Object branch: photometric + mask + multi-view geometric consistency
(two-way Huber reprojection through ray-cast surface points, plus a
ray-to-probe distance hinge) + deformation smoothness + Eikonal.

Scene branch: photometric + the same geometric consistency driven by
rendered depth + multi-layer feature-metric consistency on a Gaussian
feature pyramid + compact distribution regularization.

Pair/point terms are averaged over contributing elements (surface misses
and out-of-view projections are excluded rather than zero-filled).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fields import HybridSdf, ProbeConfig, SceneField
from .geometry import huber_t, pixel_rays, project_points, safe_norm
from .rendering import RenderSample, cast_surface_points, compositing_weights


class TooSmallError(ValueError):
    """Image too small for the requested pyramid depth."""


@dataclass
class LossWeights:
    lambda_joint: float = 1.0   # object-branch weight in the combined total
    lambda1: float = 0.01       # object geometric consistency
    lambda2: float = 0.001      # deformation regularizer
    lambda3: float = 0.01       # Eikonal
    lambda4: float = 0.01       # scene geometric consistency
    lambda5: float = 0.001      # feature-metric consistency
    lambda6: float = 0.001      # distortion
    lambda_ray: float = 10.0    # ray-distance hinge inside the geo term

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


# ---------------------------------------------------------------------------
# Photometric / mask


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    return ((rendered - target) ** 2).mean()


def mask_loss(rendered_opacity: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    if rendered_opacity.shape != target_mask.shape:
        raise ValueError("shape mismatch")
    return (rendered_opacity - target_mask).abs().mean()


# ---------------------------------------------------------------------------
# Multi-view geometric consistency (object branch)


def projection_distance_batch(
    xs: torch.Tensor, ys: torch.Tensor,
    c2w_i: torch.Tensor, c2w_j: torch.Tensor,
    h: HybridSdf, k, delta: float = 1.0, step: float | None = None,
    rays: tuple | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-way Huber reprojection distance for matched pixel batches.

    xs (P,2) in views c2w_i (P,4,4), ys (P,2) in views c2w_j. Returns
    (distance (P,), contributed (P,)); pairs whose ray misses the probe
    surface, or whose surface point lands behind the other camera, do not
    contribute. Both directions run through one batched surface cast.
    """
    if rays is None:
        o, d = pixel_rays(torch.cat([xs, ys]), torch.cat([c2w_i, c2w_j]), k)
    else:
        o, d = rays
    n = xs.shape[0]
    s_pts, _, hits = cast_surface_points(h, o, d, step=step)
    px, _, ok = project_points(s_pts, torch.cat([c2w_j, c2w_i]), k)
    contributed = (hits[:n] & hits[n:]) & (ok[:n] & ok[n:])
    dist = huber_t(px[:n] - ys, delta) + huber_t(px[n:] - xs, delta)
    dist = torch.where(contributed, dist, torch.zeros_like(dist))
    return dist, contributed


def projection_distance(x, y, pose_i, pose_j, h: HybridSdf, k,
                        delta: float = 1.0) -> tuple[float, bool]:
    """Single-pair form of the two-way reprojection distance.

    pose_i/pose_j are geometry.Pose. Returns (value, contributed); a
    skipped pair reports (0.0, False).
    """
    dtype = h.template.values.dtype
    xs = torch.as_tensor(x, dtype=dtype).reshape(1, 2)
    ys = torch.as_tensor(y, dtype=dtype).reshape(1, 2)
    Ti = torch.as_tensor(pose_i.matrix, dtype=dtype).reshape(1, 4, 4)
    Tj = torch.as_tensor(pose_j.matrix, dtype=dtype).reshape(1, 4, 4)
    dist, contributed = projection_distance_batch(xs, ys, Ti, Tj, h, k, delta)
    return float(dist[0]), bool(contributed[0])


def ray_distance_loss(origins: torch.Tensor, dirs: torch.Tensor,
                      center: torch.Tensor, max_radius: float) -> torch.Tensor:
    """Hinge on the point-line distance from the probe center to each ray."""
    rel = center - origins
    along = (rel * dirs).sum(dim=-1, keepdim=True) * dirs
    dist = safe_norm(rel - along)
    return torch.clamp(dist - max_radius, min=0.0)


def geo_obj_loss(
    xs: torch.Tensor, ys: torch.Tensor, weights_x: torch.Tensor,
    c2w_i: torch.Tensor, c2w_j: torch.Tensor,
    h: HybridSdf, probe: ProbeConfig, k,
    lambda_ray: float = 10.0, delta: float = 1.0,
    step: float | None = None, ray_term_both: bool = True,
) -> tuple[torch.Tensor, dict]:
    """Confidence-weighted reprojection consistency plus ray-distance hinge.

    Means are taken over contributing pairs (reprojection) and over all
    correspondence rays (hinge). Returns (loss, stats).
    """
    if xs.shape[0] == 0:
        zero = torch.zeros((), dtype=c2w_i.dtype if c2w_i.ndim else torch.float64)
        return zero, {"pairs": 0, "contributed": 0}
    n = xs.shape[0]
    o, d = pixel_rays(torch.cat([xs, ys]), torch.cat([c2w_i, c2w_j]), k)
    dist, contributed = projection_distance_batch(xs, ys, c2w_i, c2w_j, h, k,
                                                  delta=delta, step=step,
                                                  rays=(o, d))
    n_c = contributed.sum()
    proj_term = (weights_x * dist).sum() / torch.clamp(n_c, min=1)

    center = torch.as_tensor(probe.center, dtype=xs.dtype)
    if ray_term_both:
        hinge = ray_distance_loss(o, d, center, probe.max_radius)
    else:
        hinge = ray_distance_loss(o[:n], d[:n], center, probe.max_radius)
    loss = proj_term + lambda_ray * hinge.mean()
    return loss, {"pairs": int(n), "contributed": int(n_c)}


# ---------------------------------------------------------------------------
# Scene-branch geometric consistency (surface from rendered depth)


def scene_expected_depth(field: SceneField, origins: torch.Tensor,
                         dirs: torch.Tensor, n_samples: int = 64
                         ) -> tuple[torch.Tensor, torch.Tensor]:
    """Opacity-normalized expected termination depth of scene rays."""
    from .rendering import scene_edges

    edges, hit = scene_edges(field, origins, dirs, n_samples)
    mids = 0.5 * (edges[..., :-1] + edges[..., 1:])
    p = origins.unsqueeze(-2) + mids.unsqueeze(-1) * dirs.unsqueeze(-2)
    sigma = field.density(p)
    sigma = torch.where(hit.unsqueeze(-1), sigma, torch.zeros_like(sigma))
    alphas = 1.0 - torch.exp(-sigma * (edges[..., 1:] - edges[..., :-1]))
    _, w = compositing_weights(alphas)
    acc = w.sum(dim=-1)
    depth = (w * mids).sum(dim=-1) / torch.clamp(acc, min=1e-8)
    return depth, acc


def geo_scene_loss(
    xs: torch.Tensor, ys: torch.Tensor, weights_x: torch.Tensor,
    c2w_i: torch.Tensor, c2w_j: torch.Tensor,
    field: SceneField, k, delta: float = 1.0, n_samples: int = 64,
    min_opacity: float = 0.05,
) -> tuple[torch.Tensor, dict]:
    """Two-way reprojection consistency with surface points taken from the
    scene field's expected depth."""
    if xs.shape[0] == 0:
        return torch.zeros(()), {"pairs": 0, "contributed": 0}
    n = xs.shape[0]
    o, d = pixel_rays(torch.cat([xs, ys]), torch.cat([c2w_i, c2w_j]), k)
    depth, acc = scene_expected_depth(field, o, d, n_samples)
    s_pts = o + depth.unsqueeze(-1) * d
    px, _, ok = project_points(s_pts, torch.cat([c2w_j, c2w_i]), k)
    contributed = (ok[:n] & ok[n:]) & (acc[:n] > min_opacity) & (acc[n:] > min_opacity)
    dist = huber_t(px[:n] - ys, delta) + huber_t(px[n:] - xs, delta)
    dist = torch.where(contributed, dist, torch.zeros_like(dist))
    n_c = contributed.sum()
    loss = (weights_x * dist).sum() / torch.clamp(n_c, min=1)
    return loss, {"pairs": int(n), "contributed": int(n_c)}


# ---------------------------------------------------------------------------
# Feature pyramid + feature-metric consistency


@dataclass
class FeaturePyramid:
    """Per-level (h,w,3) maps of [luminance, x-gradient, y-gradient]."""

    levels: list

    def sample(self, pixels: torch.Tensor, level: int) -> torch.Tensor:
        """Bilinear feature lookup at full-resolution pixel coordinates."""
        return _bilinear(self.levels[level], pixels / float(2**level))


_BINOMIAL5 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_downsample(img: torch.Tensor) -> torch.Tensor:
    """5-tap binomial blur (replicate padding) then 2x decimation."""
    x = img.permute(2, 0, 1).unsqueeze(0)
    c = x.shape[1]
    kern = _BINOMIAL5.to(img.dtype)
    kx = kern.view(1, 1, 1, 5).expand(c, 1, 1, 5)
    ky = kern.view(1, 1, 5, 1).expand(c, 1, 5, 1)
    x = F.conv2d(F.pad(x, (2, 2, 0, 0), mode="replicate"), kx, groups=c)
    x = F.conv2d(F.pad(x, (0, 0, 2, 2), mode="replicate"), ky, groups=c)
    return x.squeeze(0).permute(1, 2, 0)[::2, ::2]


def _central_gradients(lum: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel image gradients, central inside and one-sided at borders."""
    gx = torch.empty_like(lum)
    gx[:, 1:-1] = 0.5 * (lum[:, 2:] - lum[:, :-2])
    gx[:, 0] = lum[:, 1] - lum[:, 0]
    gx[:, -1] = lum[:, -1] - lum[:, -2]
    gy = torch.empty_like(lum)
    gy[1:-1, :] = 0.5 * (lum[2:, :] - lum[:-2, :])
    gy[0, :] = lum[1, :] - lum[0, :]
    gy[-1, :] = lum[-1, :] - lum[-2, :]
    return gx, gy


def build_pyramid(image, num_levels: int = 3) -> FeaturePyramid:
    """Gaussian pyramid of luminance + gradient features.

    Level 0 is full resolution; each further level is a blurred 2x
    decimation (dims halve, rounded up).
    """
    img = torch.as_tensor(image, dtype=torch.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) rgb image")
    if min(img.shape[0], img.shape[1]) < 2 ** (num_levels - 1):
        raise TooSmallError(
            f"image {tuple(img.shape[:2])} too small for {num_levels} levels")
    levels = []
    cur = img
    for lvl in range(num_levels):
        lum = 0.299 * cur[..., 0] + 0.587 * cur[..., 1] + 0.114 * cur[..., 2]
        gx, gy = _central_gradients(lum)
        levels.append(torch.stack([lum, gx, gy], dim=-1))
        if lvl < num_levels - 1:
            cur = _blur_downsample(cur)
    return FeaturePyramid(levels)


def _bilinear(grid: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Sample an (h,w,C) map at (N,2) xy pixel coordinates, clamped to bounds."""
    h, w = grid.shape[0], grid.shape[1]
    x = torch.clamp(pixels[..., 0], 0.0, w - 1.0)
    y = torch.clamp(pixels[..., 1], 0.0, h - 1.0)
    x0 = torch.clamp(torch.floor(x), max=w - 2) if w > 1 else torch.zeros_like(x)
    y0 = torch.clamp(torch.floor(y), max=h - 2) if h > 1 else torch.zeros_like(y)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    x0l, y0l = x0.long(), y0.long()
    x1l = torch.clamp(x0l + 1, max=w - 1)
    y1l = torch.clamp(y0l + 1, max=h - 1)
    v00 = grid[y0l, x0l]
    v10 = grid[y0l, x1l]
    v01 = grid[y1l, x0l]
    v11 = grid[y1l, x1l]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def _bilinear_indexed(grid: torch.Tensor, idx: torch.Tensor,
                      pixels: torch.Tensor) -> torch.Tensor:
    """Sample a stacked (V,h,w,C) map set at per-point (view, xy) locations."""
    h, w = grid.shape[1], grid.shape[2]
    x = torch.clamp(pixels[..., 0], 0.0, w - 1.0)
    y = torch.clamp(pixels[..., 1], 0.0, h - 1.0)
    x0 = torch.clamp(torch.floor(x), max=w - 2) if w > 1 else torch.zeros_like(x)
    y0 = torch.clamp(torch.floor(y), max=h - 2) if h > 1 else torch.zeros_like(y)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    x0l, y0l = x0.long(), y0.long()
    x1l = torch.clamp(x0l + 1, max=w - 1)
    y1l = torch.clamp(y0l + 1, max=h - 1)
    v00 = grid[idx, y0l, x0l]
    v10 = grid[idx, y0l, x1l]
    v01 = grid[idx, y1l, x0l]
    v11 = grid[idx, y1l, x1l]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def feature_metric_loss_multi(
    pix_i: torch.Tensor, view_i: torch.Tensor, surface_points: torch.Tensor,
    c2w_j: torch.Tensor, view_j: torch.Tensor, stacked_levels: list, k,
    visibility: torch.Tensor, eps: float = 1e-8,
) -> torch.Tensor:
    """Batched multi-view form of the feature-metric loss: pyramids of all
    views are stacked per level and indexed per point."""
    px_j, _, in_front = project_points(surface_points, c2w_j, k)
    u, v = px_j[..., 0], px_j[..., 1]
    in_bounds = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    gate = visibility.to(px_j.dtype) * (in_front & in_bounds).to(px_j.dtype)
    e = torch.zeros_like(gate)
    for lvl, grid in enumerate(stacked_levels):
        with torch.no_grad():  # source pixels and pyramids are constants
            fi = _bilinear_indexed(grid, view_i, pix_i / float(2**lvl))
        fj = _bilinear_indexed(grid, view_j, px_j / float(2**lvl))
        denom = torch.linalg.norm(fi, dim=-1) * torch.linalg.norm(fj, dim=-1)
        cos = (fi * fj).sum(dim=-1) / torch.clamp(denom, min=eps)
        e = e + torch.where(denom > eps, 1.0 - cos, torch.zeros_like(cos))
    n_vis = gate.sum()
    return (gate * e).sum() / torch.clamp(n_vis, min=1.0)


def feature_metric_loss(
    pix_i: torch.Tensor, surface_points: torch.Tensor, c2w_j: torch.Tensor,
    pyramid_i: FeaturePyramid, pyramid_j: FeaturePyramid, k,
    visibility: torch.Tensor, eps: float = 1e-8,
) -> torch.Tensor:
    """Multi-level cosine feature difference between pixels in view i and the
    projections of their surface points into view j, gated by visibility.

    Mean over visible pixels; zero when nothing is visible.
    """
    px_j, _, in_front = project_points(surface_points, c2w_j, k)
    u, v = px_j[..., 0], px_j[..., 1]
    in_bounds = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    gate = visibility.to(px_j.dtype) * (in_front & in_bounds).to(px_j.dtype)

    e = torch.zeros_like(gate)
    for lvl in range(len(pyramid_i.levels)):
        fi = pyramid_i.sample(pix_i, lvl).to(px_j.dtype)
        fj = pyramid_j.sample(px_j, lvl)
        denom = torch.linalg.norm(fi, dim=-1) * torch.linalg.norm(fj, dim=-1)
        cos = (fi * fj).sum(dim=-1) / torch.clamp(denom, min=eps)
        e = e + torch.where(denom > eps, 1.0 - cos, torch.zeros_like(cos))
    n_vis = gate.sum()
    return (gate * e).sum() / torch.clamp(n_vis, min=1.0)


# ---------------------------------------------------------------------------
# Distribution / field regularizers


def distortion_loss(samples: RenderSample) -> torch.Tensor:
    """Compactness of the per-ray weight distribution over depth.

    Pairwise midpoint spread plus the in-bin term; returns a per-ray value
    (reduce outside). Exact evaluation of the double sum.
    """
    w = samples.weights
    mids = samples.depths
    pair = torch.abs(mids.unsqueeze(-1) - mids.unsqueeze(-2))
    bilateral = (w.unsqueeze(-1) * w.unsqueeze(-2) * pair).sum(dim=(-2, -1))
    gaps = samples.edges[..., 1:] - samples.edges[..., :-1]
    unilateral = (w**2 * gaps).sum(dim=-1) / 3.0
    return bilateral + unilateral


def deform_regularizer(h: HybridSdf, points: torch.Tensor) -> torch.Tensor:
    """Mean Jacobian-row norm of the deformation field plus mean |correction|."""
    _, ds, jv, _ = h.deform_out_with_jacobian(points)
    jac_term = safe_norm(jv, dim=-1).sum(dim=-1)
    return jac_term.mean() + ds.abs().mean()


def eikonal_loss(h: HybridSdf, points: torch.Tensor) -> torch.Tensor:
    """Mean deviation of the mapped-SDF gradient norm from unit speed."""
    g = h.sdf_gradient(points)
    return (safe_norm(g) - 1.0).abs().mean()


def field_regularizers(h: HybridSdf, points: torch.Tensor
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """(eikonal, deform regularizer) sharing one fused field evaluation.

    Values equal eikonal_loss / deform_regularizer on the same points.
    """
    g, jv, ds = h.gradient_and_deform(points)
    eik = (safe_norm(g) - 1.0).abs().mean()
    if jv is None:
        return eik, torch.zeros((), dtype=points.dtype)
    deform = safe_norm(jv, dim=-1).sum(dim=-1).mean() + ds.abs().mean()
    return eik, deform
