"""Ray sampling, opacity conversion, compositing and surface extraction.

Rays are marched through axis-aligned boxes with uniform depth ladders.
Depth samples act as bin edges: the object branch converts consecutive
mapped-SDF values into per-bin opacity, the scene branch integrates
density over each bin. Colors are queried at bin midpoints.

Sample depths are treated as constants by autodiff; gradients flow into
poses through the ray origin/direction and into field parameters through
the queried values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fields import HybridSdf, ObjectField, SceneField

_FAR_SDF = 1e9


def ray_box_intersection(origins: torch.Tensor, dirs: torch.Tensor,
                         bbox_min: torch.Tensor, bbox_max: torch.Tensor
                         ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test. Returns (t_entry, t_exit, hit) with t_entry clamped >= 0."""
    inv = 1.0 / torch.where(dirs.abs() < 1e-12,
                            torch.full_like(dirs, 1e-12).copysign(dirs + 1e-30), dirs)
    ta = (bbox_min - origins) * inv
    tb = (bbox_max - origins) * inv
    t0 = torch.minimum(ta, tb).amax(dim=-1)
    t1 = torch.maximum(ta, tb).amin(dim=-1)
    t0 = torch.clamp(t0, min=0.0)
    hit = t1 > t0
    return t0, t1, hit


def sample_ray(origin, direction, bbox_min, bbox_max, step: float,
               rng: torch.Generator | None = None) -> torch.Tensor:
    """Uniform depths through the box at the given spacing, starting at entry.

    Returns an empty tensor when the ray misses. With rng, each depth gets
    an independent jitter in [0, step), clamped to the exit depth.
    """
    origin = torch.as_tensor(origin, dtype=torch.float64).reshape(1, 3)
    direction = torch.as_tensor(direction, dtype=torch.float64).reshape(1, 3)
    bbox_min = torch.as_tensor(bbox_min, dtype=torch.float64)
    bbox_max = torch.as_tensor(bbox_max, dtype=torch.float64)
    t0, t1, hit = ray_box_intersection(origin, direction, bbox_min, bbox_max)
    if not bool(hit[0]):
        return torch.empty(0, dtype=torch.float64)
    n = int(torch.floor((t1[0] - t0[0]) / step).item()) + 1
    t = t0[0] + step * torch.arange(n, dtype=torch.float64)
    if rng is not None:
        jitter = torch.rand(n, generator=rng, dtype=torch.float64) * step
        t = torch.clamp(t + jitter, max=t1[0])
    return t


def sample_rays_batch(origins: torch.Tensor, dirs: torch.Tensor,
                      bbox_min: torch.Tensor, bbox_max: torch.Tensor,
                      step: float, max_samples: int = 512,
                      rng: torch.Generator | None = None
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Shared-ladder depth sampling for a ray batch.

    Returns (t (R,S), valid (R,S)); invalid entries lie beyond the ray's
    exit depth (or the ray missed entirely). The entry depth keeps its
    dependence on the ray (the samples move with the pose); sample count
    and validity are discrete.
    """
    t0, t1, hit = ray_box_intersection(origins, dirs, bbox_min, bbox_max)
    with torch.no_grad():
        span = torch.where(hit, t1 - t0, torch.zeros_like(t0))
        n = min(max_samples, int(torch.floor(span.max() / step).item()) + 1) \
            if bool(hit.any()) else 1
        ladder = step * torch.arange(n, dtype=origins.dtype)
        jitter = (torch.rand((origins.shape[0], n), generator=rng,
                             dtype=origins.dtype) * step
                  if rng is not None else None)
    t = t0.unsqueeze(-1) + ladder
    if jitter is not None:
        t = t + jitter
    with torch.no_grad():
        valid = hit.unsqueeze(-1) & (t <= t1.unsqueeze(-1))
    t = torch.minimum(t, t1.unsqueeze(-1))
    return t, valid


def sdf_to_alpha(m_near: torch.Tensor, m_far: torch.Tensor) -> torch.Tensor:
    """Opacity of the bin between two consecutive mapped SDF values.

    alpha = max((sig(m_near) - sig(m_far)) / sig(m_near), 0): positive only
    where the field crosses from outside toward inside along the ray.
    """
    s_near = torch.sigmoid(m_near)
    s_far = torch.sigmoid(m_far)
    return torch.clamp((s_near - s_far) / torch.clamp(s_near, min=1e-12), 0.0, 1.0)


def compositing_weights(alphas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Transmittance T_i = prod_{j<i}(1 - alpha_j) and weights w_i = T_i alpha_i."""
    one = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([one, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    return trans, trans * alphas


@dataclass
class RenderSample:
    """Per-ray compositing state: bin edges, opacities, colors and weights."""

    edges: torch.Tensor   # (..., n+1) ascending depths
    alphas: torch.Tensor  # (..., n)
    colors: torch.Tensor  # (..., n, 3)
    transmittances: torch.Tensor
    weights: torch.Tensor

    @classmethod
    def from_alphas(cls, edges, alphas, colors) -> "RenderSample":
        trans, weights = compositing_weights(alphas)
        return cls(edges, alphas, colors, trans, weights)

    @property
    def depths(self) -> torch.Tensor:
        return 0.5 * (self.edges[..., :-1] + self.edges[..., 1:])


def composite(samples: RenderSample, background: torch.Tensor
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Alpha-composite a RenderSample over a constant background color.

    Returns (rgb (...,3), depth (...), opacity (...)).
    """
    w = samples.weights
    opacity = w.sum(dim=-1)
    rgb = (w.unsqueeze(-1) * samples.colors).sum(dim=-2)
    rgb = rgb + (1.0 - opacity).unsqueeze(-1) * background
    depth = (w * samples.depths).sum(dim=-1) / torch.clamp(opacity, min=1e-8)
    return rgb, depth, opacity


def render_object(field: ObjectField, origins: torch.Tensor, dirs: torch.Tensor,
                  background: torch.Tensor, step: float | None = None,
                  max_samples: int = 192, rng: torch.Generator | None = None
                  ) -> dict:
    """Volume-render the object branch for a ray batch.

    Returns rgb/depth/opacity plus the RenderSample for loss terms.
    """
    bmin, bmax = field.bbox
    step = field.step_size if step is None else step
    t, valid = sample_rays_batch(origins, dirs, bmin, bmax, step,
                                 max_samples=max_samples, rng=rng)
    p = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)
    m = field.sdf.sdf_mapped(p)
    m = torch.where(valid, m, torch.full_like(m, _FAR_SDF))
    alphas = sdf_to_alpha(m[..., :-1], m[..., 1:])
    mids = origins.unsqueeze(-2) + (
        0.5 * (t[..., :-1] + t[..., 1:])
    ).unsqueeze(-1) * dirs.unsqueeze(-2)
    d = dirs.unsqueeze(-2).expand(mids.shape)
    colors = field.color(mids, d)
    samples = RenderSample.from_alphas(t, alphas, colors)
    rgb, depth, opacity = composite(samples, background)
    return {"rgb": rgb, "depth": depth, "opacity": opacity, "samples": samples}


def scene_edges(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor,
                n_samples: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-ray uniform bin edges spanning the scene box (pose-differentiable)."""
    bmin, bmax = field.bbox
    t0, t1, hit = ray_box_intersection(origins, dirs, bmin, bmax)
    t1 = torch.where(hit, t1, t0 + 1e-6)
    u = torch.linspace(0.0, 1.0, n_samples + 1, dtype=origins.dtype)
    edges = t0.unsqueeze(-1) + (t1 - t0).unsqueeze(-1) * u
    return edges, hit


def render_scene(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor,
                 background: torch.Tensor, n_samples: int = 64,
                 rng: torch.Generator | None = None) -> dict:
    """Volume-render the scene branch with a fixed per-ray sample count."""
    edges, hit = scene_edges(field, origins, dirs, n_samples)
    if rng is not None:
        mid_jitter = torch.rand(edges[..., 1:].shape, generator=rng,
                                dtype=edges.dtype)
    else:
        mid_jitter = 0.5
    mids_t = edges[..., :-1] + (edges[..., 1:] - edges[..., :-1]) * mid_jitter
    p = origins.unsqueeze(-2) + mids_t.unsqueeze(-1) * dirs.unsqueeze(-2)
    d = dirs.unsqueeze(-2).expand(p.shape)
    sigma, colors = field.density_color(p, d)
    sigma = torch.where(hit.unsqueeze(-1), sigma, torch.zeros_like(sigma))
    delta = edges[..., 1:] - edges[..., :-1]
    alphas = 1.0 - torch.exp(-sigma * delta)
    samples = RenderSample.from_alphas(edges, alphas, colors)
    rgb, depth, opacity = composite(samples, background)
    return {"rgb": rgb, "depth": depth, "opacity": opacity, "samples": samples}


def cast_surface_points(h: HybridSdf, origins: torch.Tensor, dirs: torch.Tensor,
                        step: float | None = None, max_samples: int = 192
                        ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Occlusion-aware surface points for a ray batch.

    Finds the first outside->inside sign change of the mapped SDF along
    each ray and secant-interpolates the crossing depth. Returns
    (points (R,3), t_hat (R,), hit (R,)); entries of missed rays are
    zero-filled. Differentiable w.r.t. rays and field parameters.
    """
    bmin, bmax = h.bbox
    step = h.step_size if step is None else step
    t, valid = sample_rays_batch(origins, dirs, bmin, bmax, step,
                                 max_samples=max_samples)
    if t.shape[-1] < 2:  # no ray collected two samples: all miss
        zero_t = torch.zeros(origins.shape[:-1], dtype=origins.dtype)
        return (torch.zeros_like(origins), zero_t,
                torch.zeros(origins.shape[:-1], dtype=torch.bool))
    p = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)
    m = h.sdf_mapped(p)
    m = torch.where(valid, m, torch.full_like(m, _FAR_SDF))

    m0, m1 = m[..., :-1], m[..., 1:]
    cross = (m0 >= 0) & (m1 <= 0) & (m0 - m1 > 0)
    hit = cross.any(dim=-1)
    idx = torch.argmax(cross.long(), dim=-1)

    mi = torch.gather(m0, -1, idx.unsqueeze(-1)).squeeze(-1)
    mj = torch.gather(m1, -1, idx.unsqueeze(-1)).squeeze(-1)
    ti = torch.gather(t[..., :-1], -1, idx.unsqueeze(-1)).squeeze(-1)
    tj = torch.gather(t[..., 1:], -1, idx.unsqueeze(-1)).squeeze(-1)
    denom = mi - mj
    t_hat = (mi * tj - mj * ti) / torch.clamp(denom, min=1e-12)
    t_hat = torch.where(hit, t_hat, torch.zeros_like(t_hat))
    points = origins + t_hat.unsqueeze(-1) * dirs
    points = torch.where(hit.unsqueeze(-1), points, torch.zeros_like(points))
    return points, t_hat, hit


def cast_surface_point(h: HybridSdf, origin, direction, step: float | None = None,
                       max_samples: int = 512):
    """Single-ray surface cast. Returns (point, depth) or None on a miss."""
    dtype = h.template.values.dtype
    o = torch.as_tensor(origin, dtype=dtype).reshape(1, 3)
    d = torch.as_tensor(direction, dtype=dtype).reshape(1, 3)
    pts, t_hat, hit = cast_surface_points(h, o, d, step=step,
                                          max_samples=max_samples)
    if not bool(hit[0]):
        return None
    return pts[0], t_hat[0]


IN_VIEW = 0
OUT_OF_VIEW = 1
OCCLUDED = 2


def accumulated_opacity(field, origins: torch.Tensor, dirs: torch.Tensor,
                        t_end: torch.Tensor, step: float,
                        max_samples: int = 192) -> torch.Tensor:
    """Opacity accumulated from each ray origin up to per-ray depth t_end."""
    if hasattr(field, "sdf"):
        field = field.sdf
    with torch.no_grad():
        bmin, bmax = field.bbox
        t0, t1, hit = ray_box_intersection(origins, dirs, bmin, bmax)
        t1 = torch.minimum(t1, t_end)
        span = torch.clamp(t1 - t0, min=0.0)
        ok = hit & (span > 0)
        if not ok.any():
            return torch.zeros_like(t_end)
        n = min(max_samples, int(torch.floor(span.max() / step).item()) + 2)
        ladder = torch.arange(n, dtype=origins.dtype) * step
        t = t0.unsqueeze(-1) + ladder
        valid = ok.unsqueeze(-1) & (t <= t1.unsqueeze(-1))
        t = torch.minimum(t, t1.unsqueeze(-1))
        p = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)
        if isinstance(field, HybridSdf):
            m = field.sdf_mapped(p)
            m = torch.where(valid, m, torch.full_like(m, _FAR_SDF))
            alphas = sdf_to_alpha(m[..., :-1], m[..., 1:])
        else:
            sigma = field.density(p)
            sigma = torch.where(valid, sigma, torch.zeros_like(sigma))
            delta = t[..., 1:] - t[..., :-1]
            alphas = 1.0 - torch.exp(-sigma[..., :-1] * delta)
        return 1.0 - torch.prod(1.0 - alphas, dim=-1)


def batch_visibility(points: torch.Tensor, c2w: torch.Tensor, k, field,
                     threshold: float = 0.5, step: float | None = None
                     ) -> torch.Tensor:
    """Visibility of each point from its own camera (c2w batched (N,4,4))."""
    from .geometry import project_points

    if step is None:
        step = float((field.bbox[1] - field.bbox[0]).max() / 64.0)
    pix, _, in_front = project_points(points, c2w, k)
    u, v = pix[..., 0], pix[..., 1]
    in_bounds = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    centers = c2w[..., :3, 3]
    rays = points - centers
    dist = torch.linalg.norm(rays, dim=-1)
    dirs = rays / torch.clamp(dist.unsqueeze(-1), min=1e-12)
    t_end = torch.clamp(dist - step, min=0.0)
    occ = accumulated_opacity(field, centers, dirs, t_end, step) > threshold
    return in_front & in_bounds & ~occ


def check_visibility(points: torch.Tensor, c2w: torch.Tensor, k, field,
                     threshold: float = 0.5, step: float | None = None
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Classify world points as visible / out-of-view / occluded from a camera.

    A point is occluded when the opacity accumulated along the camera ray,
    stopped one sampling step short of the point, exceeds the threshold.
    Returns (visible (N,) bool, reason (N,) int codes).
    """
    from .geometry import project_points  # local import avoids cycle at import time

    if step is None:
        step = field.step_size if hasattr(field, "step_size") else float(
            (field.bbox[1] - field.bbox[0]).max() / 64.0)
    pix, depth, in_front = project_points(points, c2w, k)
    u, v = pix[..., 0], pix[..., 1]
    in_bounds = (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    out_of_view = ~(in_front & in_bounds)

    center = c2w[:3, 3]
    rays = points - center
    dist = torch.linalg.norm(rays, dim=-1)
    dirs = rays / torch.clamp(dist.unsqueeze(-1), min=1e-12)
    origins = center.expand_as(points)
    t_end = torch.clamp(dist - step, min=0.0)
    occ = accumulated_opacity(field, origins, dirs, t_end, step) > threshold

    reason = torch.full(points.shape[:-1], IN_VIEW, dtype=torch.long)
    reason[occ] = OCCLUDED
    reason[out_of_view] = OUT_OF_VIEW
    visible = reason == IN_VIEW
    return visible, reason
