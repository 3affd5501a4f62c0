"""Training engine: Adam schedules, incremental view addition, pose
initialization (silhouette alignment + PnP) and joint dual-branch
optimization.

One global iteration corresponds to one scene-branch step; object-branch
steps are interleaved at the ratio iters_object / iters_scene. Views
enter the loop incrementally; the deformation network stays frozen until
every view has joined. Poses are parameterized by per-view local twists
composed onto a base transform and re-orthonormalized after each step.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .fields import ObjectField, ProbeConfig, SceneField, cuboid_sdf
from .geometry import (
    DegenerateError,
    Intrinsics,
    Pose,
    RansacConfig,
    align_pose_sets,
    pixel_rays,
    pnp_ransac,
    se3_exp,
)
from .losses import (
    LossWeights,
    build_pyramid,
    distortion_loss,
    feature_metric_loss_multi,
    field_regularizers,
    geo_obj_loss,
    geo_scene_loss,
    mask_loss,
    photometric_loss,
)
from .rendering import batch_visibility, cast_surface_points, render_object, render_scene


class NoOverlapError(RuntimeError):
    """No candidate silhouette overlaps the first-view mask."""


class InsufficientLiftError(RuntimeError):
    """Too few matches lift onto the probe surface for PnP."""


class NonFiniteGradientError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iters_object: int = 15000
    iters_scene: int = 66000
    batch_rays: int = 1024
    add_frame_every: int = 2000
    pose_lr_start: float = 1e-3
    pose_lr_end: float = 1e-4
    grid_lr: float = 0.1
    mlp_lr: float = 1e-3
    mapping_lr: float = 0.01
    pose_freeze_fraction: float = 0.3
    seed: int = 0

    # engine sizing
    grid_dims: int = 96
    feat_channels: int = 12
    color_hidden: tuple = (128, 128, 128, 128)
    deform_hidden: tuple = (128, 128, 128)
    scene_hidden: int = 128
    scene_depth: int = 4
    scene_samples: int = 64
    object_max_samples: int = 96
    geo_pairs: int = 64
    geo_samples: int = 48
    feature_pixels: int = 48
    visibility_samples: int = 32
    reg_points: int = 1024
    pos_freq_obj: int = 6
    dir_freq_obj: int = 4
    obj_alpha_window: tuple = (0.5, 1.0)
    pos_freq_scene: int = 6
    dir_freq_scene: int = 4
    scene_alpha_window: tuple = (0.4, 0.7)
    first_view_candidates: int = 400
    first_view_max_angle_deg: float = 30.0
    background: tuple = (1.0, 1.0, 1.0)
    log_every: int = 25

    # ablation switches
    use_pnp_init: bool = True
    incremental: bool = True
    use_geo_obj: bool = True
    use_geo_scene: bool = True
    use_feature: bool = True
    use_distortion: bool = True
    use_deform: bool = True

    def validate(self) -> None:
        positive = ["iters_object", "iters_scene", "batch_rays", "add_frame_every",
                    "pose_lr_start", "pose_lr_end", "grid_lr", "mlp_lr",
                    "mapping_lr"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.pose_freeze_fraction <= 1.0):
            raise ValueError("pose_freeze_fraction must lie in (0, 1]")
        if self.iters_scene < self.iters_object:
            raise ValueError("iters_scene must be >= iters_object")


def desk_preset(**overrides) -> TrainConfig:
    """CPU-friendly configuration: 32^3 grids, small MLPs, short schedule
    with the same add-frame / pose-freeze ratios as the full setup."""
    cfg = TrainConfig(
        iters_object=3000, iters_scene=6000, batch_rays=192,
        add_frame_every=500, grid_dims=32,
        color_hidden=(64, 64), deform_hidden=(48, 48),
        scene_hidden=64, scene_depth=3, scene_samples=36,
        object_max_samples=48, geo_pairs=32, geo_samples=32,
        feature_pixels=24, visibility_samples=24,
        reg_points=192, first_view_candidates=400,
    )
    return replace(cfg, **overrides)


def paper_preset(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def exp_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Exponential interpolation from lr_start (step 0) to lr_end (step total)."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (step / total)


class AdamGroup:
    """Adam wrapper with per-step learning rate and a finite-gradient gate."""

    def __init__(self, params, lr: float, name: str):
        self.params = [p for p in params]
        self.name = name
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=(0.9, 0.999),
                                    eps=1e-8)

    def step(self, lr: float | None = None) -> None:
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter group '{self.name}'")
        if lr is not None:
            for g in self.opt.param_groups:
                g["lr"] = lr
        self.opt.step()

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)


def _orthonormalize_t(R: torch.Tensor) -> torch.Tensor:
    U, _, Vt = torch.linalg.svd(R)
    det = torch.linalg.det(U @ Vt)
    D = torch.diag_embed(torch.stack(
        [torch.ones_like(det), torch.ones_like(det), det], dim=-1))
    return U @ D @ Vt


class CameraPoses(nn.Module):
    """Per-view camera-to-world transforms with local-twist optimization.

    forward() returns exp(delta_v) @ base_v for every view; fold() bakes
    the current deltas into the float64 base (re-orthonormalized) and
    zeroes them, so Adam always works in the local tangent frame.
    """

    def __init__(self, n_views: int, dtype=torch.float32):
        super().__init__()
        self.register_buffer("base", torch.eye(4, dtype=torch.float64
                                               ).expand(n_views, 4, 4).clone())
        self.delta = nn.Parameter(torch.zeros(n_views, 6, dtype=dtype))

    def forward(self) -> torch.Tensor:
        return se3_exp(self.delta) @ self.base.to(self.delta.dtype)

    @torch.no_grad()
    def set_pose(self, view: int, pose: Pose) -> None:
        self.base[view] = torch.tensor(pose.matrix, dtype=torch.float64)
        self.delta[view].zero_()

    @torch.no_grad()
    def fold(self) -> None:
        T = se3_exp(self.delta.detach().double()) @ self.base
        T[:, :3, :3] = _orthonormalize_t(T[:, :3, :3])
        self.base.copy_(T)
        self.delta.zero_()

    def pose(self, view: int) -> Pose:
        T = (se3_exp(self.delta.detach().double()) @ self.base)[view].numpy()
        return Pose.from_matrix(T)

    def poses(self) -> list:
        return [self.pose(v) for v in range(self.base.shape[0])]


# ---------------------------------------------------------------------------
# First-view initialization by silhouette alignment


def render_silhouette(pose: Pose, probe: ProbeConfig, k: Intrinsics) -> np.ndarray:
    """Exact ray-box hit mask of the probe cuboid from a camera pose."""
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64),
                       np.arange(k.height, dtype=np.float64))
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)],
                     axis=-1)
    d = d_cam @ pose.rotation.T
    o = pose.translation - np.asarray(probe.center)
    he = np.asarray(probe.half_extents)
    inv = 1.0 / np.where(np.abs(d) < 1e-15, 1e-15, d)
    ta = (-he - o) * inv
    tb = (he - o) * inv
    t0 = np.minimum(ta, tb).max(axis=-1)
    t1 = np.maximum(ta, tb).min(axis=-1)
    return (t1 > np.maximum(t0, 0.0)) & (t0 > 0.0)


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _euler_rotation(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _aim_at_pixel(pose: Pose, target_pix: np.ndarray, k: Intrinsics) -> Pose:
    """Rotate the camera so the probe-center ray exits through target_pix."""
    dx = math.atan2(float(target_pix[0]) - k.cx, k.fx)
    dy = math.atan2(float(target_pix[1]) - k.cy, k.fy)
    corr = _euler_rotation(-dy, dx, 0.0)
    return Pose(pose.rotation @ corr, pose.translation)


def _orbit_sweep(mask0: np.ndarray, probe: ProbeConfig, k: Intrinsics
                 ) -> list[tuple[float, Pose]]:
    """Score a full azimuth ring x elevation x distance grid of orbit poses
    by silhouette IoU against the mask (descending)."""
    mask0 = np.asarray(mask0).astype(bool)
    area = float(mask0.sum())
    if area <= 0:
        raise NoOverlapError("first-view mask is empty")
    r_pix = math.sqrt(area / math.pi)
    r_obj = float(np.mean(probe.half_extents))
    dist0 = max(k.fx * r_obj / r_pix, 1.5 * probe.max_radius)
    ys, xs = np.nonzero(mask0)
    centroid = np.array([xs.mean(), ys.mean()])
    center0 = np.asarray(probe.center, dtype=np.float64)
    from .synthdata import look_at_pose

    scored = []
    for az_deg in range(0, 360, 10):
        for el_deg in (-15, 0, 15, 30, 45):
            for scale in (0.75, 1.0, 1.3):
                az, el = math.radians(az_deg), math.radians(el_deg)
                offset = dist0 * scale * np.array(
                    [math.cos(az) * math.cos(el),
                     math.sin(az) * math.cos(el), math.sin(el)])
                cand = _aim_at_pixel(
                    look_at_pose(center0 + offset, center0), centroid, k)
                iou = _mask_iou(render_silhouette(cand, probe, k), mask0)
                scored.append((iou, cand))
    scored.sort(key=lambda c: -c[0])
    return scored


def _diverse_top(scored: list, n: int, min_sep_deg: float, center) -> list:
    """Best-IoU candidates whose viewing directions differ pairwise."""
    kept = []
    for iou, pose in scored:
        d = pose.translation - center
        d = d / np.linalg.norm(d)
        if all(np.dot(d, kd) < math.cos(math.radians(min_sep_deg))
               for kd, _ in kept):
            kept.append((d, (iou, pose)))
            if len(kept) == n:
                break
    return [item for _, item in kept]


def default_first_guess(mask0: np.ndarray, probe: ProbeConfig,
                        k: Intrinsics) -> Pose:
    """Best orbit cell of a coarse full-ring silhouette sweep."""
    return _orbit_sweep(mask0, probe, k)[0][1]


def init_first_view(mask0: np.ndarray, probe: ProbeConfig, k: Intrinsics,
                    guess: Pose, n_candidates: int = 400,
                    max_angle_deg: float = 30.0, seed: int = 0,
                    min_iou: float = 0.05, stages: int = 3
                    ) -> tuple[Pose, float]:
    """Orbit-perturbed silhouette alignment around a guess pose.

    The candidate budget is spent in annealed stages: uniform rotations
    within +-max_angle_deg of the incumbent first, then progressively
    narrower rings around the running best-IoU pose (the unperturbed guess
    is always candidate 0). Returns the IoU argmax.
    """
    mask0 = np.asarray(mask0).astype(bool)
    if not mask0.any():
        raise NoOverlapError("first-view mask is empty")
    ys, xs = np.nonzero(mask0)
    centroid = np.array([xs.mean(), ys.mean()])
    rng = np.random.default_rng(seed)
    center0 = np.asarray(probe.center, dtype=np.float64)
    from .synthdata import look_at_pose

    best_pose = guess
    best_iou = _mask_iou(render_silhouette(guess, probe, k), mask0)
    budget = max(n_candidates - 1, 0)
    counts = [budget // 2] + [budget // (2 * max(stages - 1, 1))] * (stages - 1)
    angle = math.radians(max_angle_deg)
    for stage_count in counts:
        offset = best_pose.translation - center0
        for _ in range(stage_count):
            angles = rng.uniform(-angle, angle, size=3)
            R = _euler_rotation(*angles)
            cand = look_at_pose(center0 + R @ offset, center0)
            cand = _aim_at_pixel(cand, centroid, k)
            iou = _mask_iou(render_silhouette(cand, probe, k), mask0)
            if iou > best_iou:
                best_pose, best_iou = cand, iou
        angle /= 3.0
    if best_iou < min_iou:
        raise NoOverlapError(f"best silhouette IoU {best_iou:.3f} < {min_iou}")
    return best_pose, best_iou


def _refine_distance(pose: Pose, mask0: np.ndarray, probe: ProbeConfig,
                     k: Intrinsics) -> Pose:
    """Deterministic 1-D IoU sweep over the camera-to-probe distance."""
    center = np.asarray(probe.center, dtype=np.float64)
    offset = pose.translation - center
    best, best_iou = pose, -1.0
    for scale in np.linspace(0.8, 1.3, 21):
        cand = Pose(pose.rotation, center + scale * offset)
        iou = _mask_iou(render_silhouette(cand, probe, k), mask0)
        if iou > best_iou:
            best, best_iou = cand, iou
    return best


def lift_to_surface(xs: np.ndarray, pose: Pose, h, k: Intrinsics
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Cast pixel rays of a posed view onto the probe SDF surface.

    Returns (points (N,3), hit (N,) bool)."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 2)
    dtype = h.template.values.dtype
    pix = torch.tensor(xs, dtype=dtype)
    c2w = torch.tensor(pose.matrix, dtype=dtype)
    o, d = pixel_rays(pix, c2w, k)
    with torch.no_grad():
        pts, _, hit = cast_surface_points(h, o, d)
    return pts.numpy().astype(np.float64), hit.numpy()


def init_new_view(xs_prev: np.ndarray, ys_new: np.ndarray, prev_pose: Pose,
                  h, k: Intrinsics, ransac: RansacConfig = RansacConfig(),
                  use_prior: bool = True) -> Pose:
    """PnP pose of a new view from matches against the previous view, whose
    pixels are lifted to 3D through the current probe SDF.

    The previous pose doubles as a robust-refinement prior: neighboring
    views make it a usable starting point when the lifted cloud is noisy.
    """
    ys_new = np.asarray(ys_new, dtype=np.float64).reshape(-1, 2)
    pts, hit = lift_to_surface(xs_prev, prev_pose, h, k)
    if int(hit.sum()) < 6:
        raise InsufficientLiftError(
            f"only {int(hit.sum())} of {len(ys_new)} matches hit the probe")
    return pnp_ransac(ys_new[hit], pts[hit], k, ransac,
                      initial=prev_pose if use_prior else None)


def _pnp_consistency(xs: np.ndarray, ys: np.ndarray, pose0: Pose, h,
                     k: Intrinsics, seed: int, threshold: float = 5.0
                     ) -> tuple[Pose, int, float] | None:
    """PnP the second view against lifts from pose0 and score the fit:
    (pose1, inliers at threshold, mean inlier error), or None on failure."""
    from .geometry import project

    ys = np.asarray(ys, dtype=np.float64).reshape(-1, 2)
    try:
        pose1 = init_new_view(xs, ys, pose0, h, k,
                              RansacConfig(seed=seed, threshold=threshold,
                                           max_iters=500, sample_size=10))
    except (InsufficientLiftError, DegenerateError):
        return None
    pts, hit = lift_to_surface(xs, pose0, h, k)
    errs = []
    for p, y in zip(pts[hit], ys[hit]):
        try:
            errs.append(float(np.linalg.norm(project(p, pose1, k) - y)))
        except Exception:
            errs.append(float("inf"))
    errs = np.array(errs)
    inl = errs < threshold
    if int(inl.sum()) < 6:
        return None
    return pose1, int(inl.sum()), float(errs[inl].mean())


def init_first_pair(mask0: np.ndarray, xs01: np.ndarray, ys01: np.ndarray,
                    probe: ProbeConfig, h, k: Intrinsics,
                    n_candidates: int = 200, max_angle_deg: float = 30.0,
                    seed: int = 0, n_basins: int = 6
                    ) -> tuple[Pose, Pose, dict]:
    """Joint initialization of the first two views.

    A cuboid silhouette is centrally symmetric, so mask IoU alone leaves a
    near-flip ambiguity for view 0. Each of the best diverse IoU basins is
    locally refined, then scored by how consistently the 0->1 matches PnP
    onto the template; the most consistent basin wins.
    """
    scored = _orbit_sweep(mask0, probe, k)
    basins = _diverse_top(scored, n_basins, 25.0, np.asarray(probe.center))
    best = None
    best_key = (-1, float("inf"))
    info = {"basins": len(basins)}
    for bi, (_, guess) in enumerate(basins):
        pose0, iou = init_first_view(mask0, probe, k, guess,
                                     n_candidates=n_candidates,
                                     max_angle_deg=max_angle_deg,
                                     seed=seed + 131 * bi)
        pose0 = _refine_distance(pose0, mask0, probe, k)
        fit = _pnp_consistency(xs01, ys01, pose0, h, k, seed=seed + 13 * bi)
        if fit is None:
            continue
        pose1, inliers, mean_err = fit
        key = (inliers, -mean_err)
        if key > best_key:
            best_key = key
            best = (pose0, pose1)
            info.update({"first_view_iou": iou, "pnp_inliers": inliers,
                         "pnp_mean_err_px": mean_err})
    if best is None:
        raise NoOverlapError(
            "no silhouette basin produced a PnP-consistent first view pair")
    return best[0], best[1], info


# ---------------------------------------------------------------------------
# Training driver


@dataclass
class TrainResult:
    poses: list
    object_field: ObjectField
    scene_field: SceneField
    probe: ProbeConfig
    log: list
    init_poses: list
    init_pose_errors: dict | None
    final_pose_errors: dict | None
    wall_time: float
    diagnostics: dict
    config: TrainConfig
    weights: LossWeights
    pose_state_at_freeze: torch.Tensor | None = None


def _pose_errors(cam: CameraPoses, gt_poses) -> dict | None:
    if gt_poses is None:
        return None
    try:
        _, rot, trans = align_pose_sets(cam.poses(), list(gt_poses))
    except DegenerateError:
        return None
    return {"rot_deg": rot, "trans_x100": trans}


class _ViewData:
    """Per-view tensors and sampling pools."""

    def __init__(self, image: np.ndarray, mask: np.ndarray, background,
                 dtype=torch.float32):
        self.image = torch.tensor(image, dtype=dtype)
        self.mask = torch.tensor(mask.astype(np.float32), dtype=dtype)
        bg = torch.tensor(background, dtype=dtype)
        self.object_target = (self.image * self.mask.unsqueeze(-1)
                              + bg * (1.0 - self.mask).unsqueeze(-1))
        h, w = mask.shape
        ys, xs = np.nonzero(mask)
        if len(ys):
            my = max(8, int(ys.max() - ys.min()) // 4)
            mx = max(8, int(xs.max() - xs.min()) // 4)
            y0, y1 = max(int(ys.min()) - my, 0), min(int(ys.max()) + my + 1, h)
            x0, x1 = max(int(xs.min()) - mx, 0), min(int(xs.max()) + mx + 1, w)
        else:
            y0, y1, x0, x1 = 0, h, 0, w
        yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
        self.object_pool = torch.tensor(
            np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1), dtype=torch.long)
        pyr = build_pyramid(image)
        pyr.levels = [lvl.to(dtype) for lvl in pyr.levels]
        self.pyramid = pyr


def _estimate_probe_center(bundle, init_poses, k) -> np.ndarray:
    """Triangulate mask-centroid rays (midpoint of closest approach, averaged)."""
    origins, dirs = [], []
    for i, pose in enumerate(init_poses):
        ys, xs = np.nonzero(bundle.masks[i])
        if len(xs) == 0:
            continue
        d_cam = np.array([(xs.mean() - k.cx) / k.fx, (ys.mean() - k.cy) / k.fy, 1.0])
        d = pose.rotation @ d_cam
        dirs.append(d / np.linalg.norm(d))
        origins.append(pose.translation)
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    return np.linalg.solve(A + 1e-9 * np.eye(3), b)


def train(bundle, cfg: TrainConfig, weights: LossWeights = LossWeights(),
          probe: ProbeConfig | None = None, init_mode: str = "pnp",
          init_poses: list | None = None, log_path=None) -> TrainResult:
    """Run the full joint optimization on a scene bundle.

    init_mode: 'pnp' (silhouette + incremental PnP), 'identity' (each new
    view starts at the previous view's pose) or 'given' (init_poses
    supplies a start pose per view, e.g. noisy ground truth).
    """
    cfg.validate()
    n_views = bundle.n_views
    if n_views < 2:
        raise ValueError("need at least 2 views with masks")
    if init_mode == "given" and (init_poses is None or len(init_poses) != n_views):
        raise ValueError("init_mode 'given' requires one init pose per view")
    if not cfg.use_pnp_init and init_mode == "pnp":
        init_mode = "identity"

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + 13)
    t_start = time.perf_counter()
    k = bundle.intrinsics
    dtype = torch.float32

    if probe is None:
        if init_mode == "given":
            center = _estimate_probe_center(bundle, init_poses, k)
            probe = ProbeConfig(tuple(center), tuple(bundle.probe_half_extents))
        else:
            probe = ProbeConfig(tuple(bundle.probe_center),
                                tuple(bundle.probe_half_extents))

    obj = ObjectField(
        probe, grid_dims=(cfg.grid_dims,) * 3, feat_channels=cfg.feat_channels,
        color_hidden=cfg.color_hidden, deform_hidden=cfg.deform_hidden,
        pos_frequencies=cfg.pos_freq_obj, dir_frequencies=cfg.dir_freq_obj,
        alpha_window=cfg.obj_alpha_window, seed=cfg.seed, dtype=dtype)
    obj.sdf.deform_enabled = cfg.use_deform
    scene = SceneField(
        bundle.scene_bbox[0], bundle.scene_bbox[1], hidden=cfg.scene_hidden,
        depth=cfg.scene_depth, pos_frequencies=cfg.pos_freq_scene,
        dir_frequencies=cfg.dir_freq_scene, alpha_window=cfg.scene_alpha_window,
        seed=cfg.seed + 91, dtype=dtype)

    background = torch.tensor(cfg.background, dtype=dtype)
    views = [_ViewData(bundle.images[i], bundle.masks[i], cfg.background, dtype)
             for i in range(n_views)]
    pyramid_stack = [torch.stack([vd.pyramid.levels[l] for vd in views])
                     for l in range(len(views[0].pyramid.levels))]
    cam = CameraPoses(n_views, dtype=dtype)

    # match arrays
    m_vi = np.array([c.view_i for c in bundle.matches], dtype=np.int64)
    m_vj = np.array([c.view_j for c in bundle.matches], dtype=np.int64)
    m_x = np.array([c.x for c in bundle.matches], dtype=np.float64).reshape(-1, 2)
    m_y = np.array([c.y for c in bundle.matches], dtype=np.float64).reshape(-1, 2)
    m_w = np.array([c.w for c in bundle.matches], dtype=np.float64)
    if cfg.use_pnp_init and init_mode == "pnp":
        for a in range(n_views - 1):
            if not np.any((m_vi == a) & (m_vj == a + 1)):
                raise ValueError(f"missing correspondences for pair ({a},{a + 1})")
    t_vi = torch.tensor(m_vi)
    t_vj = torch.tensor(m_vj)
    t_x = torch.tensor(m_x, dtype=dtype)
    t_y = torch.tensor(m_y, dtype=dtype)
    t_w = torch.tensor(m_w, dtype=dtype)

    diagnostics: dict = {"skipped_pairs": 0, "init_mode": init_mode}

    def _matches_between(a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        fwd = (m_vi == a) & (m_vj == b)
        rev = (m_vi == b) & (m_vj == a)
        xs = np.concatenate([m_x[fwd], m_y[rev]])
        ys = np.concatenate([m_y[fwd], m_x[rev]])
        return xs, ys

    init_snapshot: dict = {}

    def _init_view(v: int) -> None:
        if init_mode == "given":
            cam.set_pose(v, init_poses[v])
            init_snapshot[v] = cam.pose(v)
            return
        if v == 0:
            guess = default_first_guess(bundle.masks[0], probe, k)
            pose0, iou = init_first_view(
                bundle.masks[0], probe, k, guess,
                n_candidates=cfg.first_view_candidates,
                max_angle_deg=cfg.first_view_max_angle_deg, seed=cfg.seed)
            pose0 = _refine_distance(pose0, bundle.masks[0], probe, k)
            diagnostics["first_view_iou"] = iou
            cam.set_pose(0, pose0)
            init_snapshot[0] = cam.pose(0)
            return
        if init_mode == "identity" or not cfg.use_pnp_init:
            cam.set_pose(v, cam.pose(v - 1))
            init_snapshot[v] = cam.pose(v)
            return
        xs, ys = _matches_between(v - 1, v)
        pose = init_new_view(xs, ys, cam.pose(v - 1), obj.sdf, k,
                             RansacConfig(seed=cfg.seed + v, threshold=3.0,
                                          max_iters=500, sample_size=10))
        cam.set_pose(v, pose)
        init_snapshot[v] = cam.pose(v)

    def _init_pair01() -> None:
        xs, ys = _matches_between(0, 1)
        pose0, pose1, info = init_first_pair(
            bundle.masks[0], xs, ys, probe, obj.sdf, k,
            n_candidates=cfg.first_view_candidates,
            max_angle_deg=cfg.first_view_max_angle_deg, seed=cfg.seed)
        diagnostics.update(info)
        cam.set_pose(0, pose0)
        cam.set_pose(1, pose1)
        init_snapshot[0] = cam.pose(0)
        init_snapshot[1] = cam.pose(1)

    # ----- initialization schedule
    pnp_mode = init_mode == "pnp" and cfg.use_pnp_init
    if cfg.incremental:
        active = [0, 1]
        if pnp_mode:
            _init_pair01()
        else:
            _init_view(0)
            _init_view(1)
    else:
        active = list(range(n_views))
        if pnp_mode:
            _init_pair01()
            for v in range(2, n_views):
                _init_view(v)
        else:
            for v in range(n_views):
                _init_view(v)

    # ----- optimizers
    opt_pose = AdamGroup(cam.parameters(), cfg.pose_lr_start, "poses")
    opt_grid = AdamGroup(obj.feat.parameters(), cfg.grid_lr, "feature-grid")
    obj_mlp_params = list(obj.color_mlp.parameters()) + list(
        obj.sdf.deform.parameters())
    opt_obj_mlp = AdamGroup(obj_mlp_params, cfg.mlp_lr, "object-mlps")
    opt_mapping = AdamGroup(obj.sdf.mapping.parameters(), cfg.mapping_lr,
                            "sdf-mapping")
    opt_scene = AdamGroup(scene.parameters(), cfg.mlp_lr, "scene-mlp")

    def _set_deform_frozen(frozen: bool) -> None:
        for p in obj.sdf.deform.parameters():
            p.requires_grad_(not frozen)

    incremental_phase = cfg.incremental and len(active) < n_views
    _set_deform_frozen(incremental_phase)

    total = cfg.iters_scene
    pose_total = max(int(round(cfg.pose_freeze_fraction * total)), 1)
    bg = background
    log: list = []
    log_file = open(log_path, "w") if log_path else None

    def _sample_pixels(pool_kind: str, count: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Random (view_id (B,), xy (B,2)) over active views."""
        vsel = torch.tensor(active)[torch.randint(len(active), (count,), generator=gen)]
        if pool_kind == "object":
            xy = torch.empty((count, 2), dtype=torch.long)
            for v in active:
                rows = vsel == v
                n_rows = int(rows.sum())
                if n_rows:
                    pool = views[v].object_pool
                    xy[rows] = pool[torch.randint(len(pool), (n_rows,), generator=gen)]
        else:
            H, W = views[0].mask.shape
            xy = torch.stack([
                torch.randint(W, (count,), generator=gen),
                torch.randint(H, (count,), generator=gen)], dim=1)
        return vsel, xy

    def _gather_targets(vsel, xy, what: str) -> torch.Tensor:
        out = []
        for v in active:
            rows = (vsel == v).nonzero(as_tuple=True)[0]
            if len(rows) == 0:
                continue
            xs, ys = xy[rows, 0], xy[rows, 1]
            src = views[v].object_target if what == "object" else (
                views[v].mask if what == "mask" else views[v].image)
            out.append((rows, src[ys, xs]))
        first = out[0][1]
        res = torch.empty((len(vsel),) + first.shape[1:], dtype=first.dtype)
        for rows, vals in out:
            res[rows] = vals
        return res

    eligible_rows = torch.empty(0, dtype=torch.long)

    def _refresh_eligible() -> torch.Tensor:
        act = np.array(active)
        ok = np.isin(m_vi, act) & np.isin(m_vj, act)
        return torch.tensor(np.nonzero(ok)[0], dtype=torch.long)

    def _sample_match_rows(count: int) -> torch.Tensor:
        if len(eligible_rows) <= count:
            return eligible_rows
        sel = torch.randint(len(eligible_rows), (count,), generator=gen)
        return eligible_rows[sel]

    obj_steps_done = 0
    freeze_snapshot = None
    bbox_min, bbox_max = obj.bbox
    reg_span = (bbox_max - bbox_min).unsqueeze(0)
    eligible_rows = _refresh_eligible()

    for it in range(total):
        # incremental view addition
        if cfg.incremental and len(active) < n_views and it > 0 \
                and it % cfg.add_frame_every == 0:
            v = len(active)
            _init_view(v)
            active.append(v)
            eligible_rows = _refresh_eligible()
            if len(active) == n_views:
                _set_deform_frozen(False)
                incremental_phase = False

        do_obj = ((it + 1) * cfg.iters_object) // total > \
                 (it * cfg.iters_object) // total
        pose_frozen = it >= pose_total
        if pose_frozen and freeze_snapshot is None:
            freeze_snapshot = cam.base.detach().clone()
        pose_lr = exp_lr(min(it, pose_total), pose_total,
                         cfg.pose_lr_start, cfg.pose_lr_end)

        obj.set_progress(min(obj_steps_done / max(cfg.iters_object, 1), 1.0))
        scene.set_progress(min(it / max(cfg.iters_scene, 1), 1.0))

        poses_now = cam()
        losses: dict = {}
        total_loss = torch.zeros((), dtype=dtype)

        if do_obj:
            vsel, xy = _sample_pixels("object", cfg.batch_rays)
            pix = xy.to(dtype)
            o, d = pixel_rays(pix, poses_now[vsel], k)
            out = render_object(obj, o, d, bg, max_samples=cfg.object_max_samples,
                                rng=gen)
            target_rgb = _gather_targets(vsel, xy, "object")
            target_mask = _gather_targets(vsel, xy, "mask")
            l_rgb = photometric_loss(out["rgb"], target_rgb)
            l_mask = mask_loss(out["opacity"], target_mask)
            losses["obj_rgb"] = _f(l_rgb)
            losses["obj_mask"] = _f(l_mask)
            l_obj = l_rgb + l_mask

            if cfg.use_geo_obj:
                rows = _sample_match_rows(cfg.geo_pairs)
                if len(rows) > 0:
                    l_geo, stats = geo_obj_loss(
                        t_x[rows], t_y[rows], t_w[rows],
                        poses_now[t_vi[rows]], poses_now[t_vj[rows]],
                        obj.sdf, probe, k, lambda_ray=weights.lambda_ray)
                    diagnostics["skipped_pairs"] += stats["pairs"] - stats["contributed"]
                    losses["obj_geo"] = _f(l_geo)
                    # per-pair mean scaled back to the full-set sum of the
                    # geometric objective (unbiased subsampling estimator)
                    l_obj = l_obj + weights.lambda1 * len(eligible_rows) * l_geo

            reg_pts = bbox_min + torch.rand((cfg.reg_points, 3), generator=gen,
                                            dtype=dtype) * reg_span
            l_eik, l_def = field_regularizers(obj.sdf, reg_pts)
            if cfg.use_deform and not incremental_phase:
                losses["obj_deform"] = _f(l_def)
                l_obj = l_obj + weights.lambda2 * cfg.reg_points * l_def
            losses["obj_eikonal"] = _f(l_eik)
            l_obj = l_obj + weights.lambda3 * cfg.reg_points * l_eik
            total_loss = total_loss + weights.lambda_joint * l_obj

        # scene branch (every global iteration)
        vsel_s, xy_s = _sample_pixels("scene", cfg.batch_rays)
        pix_s = xy_s.to(dtype)
        o_s, d_s = pixel_rays(pix_s, poses_now[vsel_s], k)
        out_s = render_scene(scene, o_s, d_s, bg, n_samples=cfg.scene_samples,
                             rng=gen)
        target_s = _gather_targets(vsel_s, xy_s, "image")
        l_rgb_s = photometric_loss(out_s["rgb"], target_s)
        losses["sce_rgb"] = _f(l_rgb_s)
        l_sce = l_rgb_s

        if cfg.use_geo_scene:
            rows = _sample_match_rows(cfg.geo_pairs)
            if len(rows) > 0:
                l_geo_s, _ = geo_scene_loss(
                    t_x[rows], t_y[rows], t_w[rows],
                    poses_now[t_vi[rows]], poses_now[t_vj[rows]],
                    scene, k, n_samples=cfg.geo_samples)
                losses["sce_geo"] = _f(l_geo_s)
                l_sce = l_sce + weights.lambda4 * len(eligible_rows) * l_geo_s

        if cfg.use_feature and len(active) > 1:
            nf = min(cfg.feature_pixels, cfg.batch_rays)
            sub = torch.arange(nf)
            surf = o_s[sub] + out_s["depth"][sub].unsqueeze(-1) * d_s[sub]
            src = vsel_s[sub]
            # pick a different active view per pixel to compare against
            shift = 1 + torch.randint(len(active) - 1, (nf,), generator=gen)
            act_t = torch.tensor(active)
            pos_in_active = torch.searchsorted(act_t, src)
            other = act_t[(pos_in_active + shift) % len(active)]
            vis_step = float((scene.bbox_max - scene.bbox_min).max()
                             / cfg.visibility_samples)
            vis = batch_visibility(surf.detach(), poses_now[other].detach(),
                                   k, scene, step=vis_step)
            l_fea = feature_metric_loss_multi(
                pix_s[sub], src, surf, poses_now[other], other,
                pyramid_stack, k, vis)
            losses["sce_feature"] = _f(l_fea)
            # visible-pixel mean scaled to the batch sum of the
            # feature-metric objective
            l_sce = l_sce + weights.lambda5 * nf * l_fea

        if cfg.use_distortion:
            l_dist = distortion_loss(out_s["samples"]).mean()
            losses["sce_distortion"] = _f(l_dist)
            l_sce = l_sce + weights.lambda6 * cfg.batch_rays * l_dist

        total_loss = total_loss + l_sce
        if not torch.isfinite(total_loss):
            _close(log_file)
            raise NonFiniteLossError(
                f"non-finite total loss at iteration {it}: {losses}")

        for g in (opt_pose, opt_grid, opt_obj_mlp, opt_mapping, opt_scene):
            g.zero_grad()
        total_loss.backward()

        if not pose_frozen:
            opt_pose.step(lr=pose_lr)
            cam.fold()
        if do_obj:
            opt_grid.step()
            opt_obj_mlp.step()
            opt_mapping.step()
            obj_steps_done += 1
        opt_scene.step()

        if it % cfg.log_every == 0 or it == total - 1:
            rec = {
                "iter": it,
                "phase": "incremental" if incremental_phase else "joint",
                "losses": {k_: round(v_, 6) for k_, v_ in losses.items()},
                "total": _f(total_loss),
                "lr": {"pose": pose_lr if not pose_frozen else 0.0},
                "active_views": len(active),
            }
            err = _pose_errors(cam, bundle.poses_gt)
            if err is not None:
                rec["pose_err"] = {kk: round(vv, 5) for kk, vv in err.items()}
            log.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")

    _close(log_file)
    final_errors = _pose_errors(cam, bundle.poses_gt)
    snapshot = [init_snapshot.get(v, cam.pose(v)) for v in range(n_views)]
    init_errors = None
    if bundle.poses_gt is not None:
        try:
            _, rot_i, trans_i = align_pose_sets(snapshot, list(bundle.poses_gt))
            init_errors = {"rot_deg": rot_i, "trans_x100": trans_i}
        except DegenerateError:
            pass
    diagnostics.update(obj.diagnostics)
    return TrainResult(
        poses=cam.poses(), object_field=obj, scene_field=scene, probe=probe,
        log=log, init_poses=snapshot, init_pose_errors=init_errors,
        final_pose_errors=final_errors,
        wall_time=time.perf_counter() - t_start, diagnostics=diagnostics,
        config=cfg, weights=weights, pose_state_at_freeze=freeze_snapshot)


def _close(f):
    if f is not None:
        f.close()
