"""Synthetic capture generation and dataset ingestion.

Ground truth comes from a self-contained analytic ray tracer (ray-box and
ray-plane intersections with procedural shading) that shares no code with
the trainable renderer, so end-to-end tests have a genuinely external
oracle. The scene is a closed textured room with a cuboid probe inside
and a camera ring around the probe.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import ppmio
from .fields import cuboid_sdf
from .geometry import (
    Correspondence,
    CorrespondenceSet,
    Intrinsics,
    Pose,
    load_matches_jsonl,
    load_poses_jsonl,
    save_matches_jsonl,
    save_poses_jsonl,
    scene_scale,
)
from .ppmio import FormatError, MissingFileError

DATASET_VERSION = 1


class InvalidSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    probe_center: tuple = (0.0, 0.0, 0.38)
    probe_half_extents: tuple = (0.30, 0.22, 0.38)
    probe_yaw_deg: float = 0.0
    room_half: float = 1.6
    room_height: float = 2.2
    n_views: int = 3
    ring_radius: float = 1.25
    elevation_deg: float = 22.0
    azimuth_start_deg: float = -35.0
    azimuth_span_deg: float = 70.0
    width: int = 64
    height: int = 64
    fov_deg: float = 55.0
    checker_period_room: float = 0.42
    checker_period_probe: float = 0.11
    noise_scale: float = 3.0
    matches_per_pair: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.n_views < 2:
            raise InvalidSpecError("need at least 2 views")
        if self.azimuth_span_deg <= 0:
            raise InvalidSpecError("angular span must be positive")
        if min(self.probe_half_extents) <= 0 or self.room_half <= 0:
            raise InvalidSpecError("degenerate probe or room size")
        he = np.asarray(self.probe_half_extents)
        c = np.asarray(self.probe_center)
        if np.any(np.abs(c[:2]) + he.max() > self.room_half) or \
                c[2] + he[2] > self.room_height or c[2] - he[2] < -1e-9:
            raise InvalidSpecError("probe must fit inside the room")
        if self.ring_radius <= float(np.linalg.norm(he)):
            raise InvalidSpecError("camera ring must be outside the probe")
        if self.width < 8 or self.height < 8:
            raise InvalidSpecError("image too small")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: (tuple(v) if isinstance(v, list) else v)
                  for k, v in d.items() if k in known}
        return cls(**kwargs)


@dataclass
class SceneBundle:
    images: np.ndarray           # (V,H,W,3) float64 in [0,1]
    masks: np.ndarray            # (V,H,W) bool
    intrinsics: Intrinsics
    poses_gt: list | None
    matches: CorrespondenceSet
    scene_bbox: tuple            # (min (3,), max (3,))
    probe_center: tuple
    probe_half_extents: tuple
    probe_yaw_deg: float = 0.0
    spec: SceneSpec | None = None

    @property
    def n_views(self) -> int:
        return int(self.images.shape[0])

    def gt_probe_sdf(self, points: np.ndarray) -> np.ndarray:
        """Analytic signed distance of the ground-truth probe."""
        local = _to_probe_local(np.asarray(points, dtype=np.float64),
                                self.probe_center, self.probe_yaw_deg)
        return cuboid_sdf(local, (0, 0, 0), self.probe_half_extents)


# ---------------------------------------------------------------------------
# Camera ring


def look_at_pose(center: np.ndarray, target: np.ndarray,
                 up=(0.0, 0.0, 1.0)) -> Pose:
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(fwd, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick any orthogonal axis
        x = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd], axis=1)
    return Pose(R, np.asarray(center, dtype=np.float64))


def ring_poses(spec: SceneSpec) -> list:
    target = np.asarray(spec.probe_center, dtype=np.float64)
    phi = np.radians(spec.elevation_deg)
    poses = []
    for i in range(spec.n_views):
        frac = i / max(spec.n_views - 1, 1)
        theta = np.radians(spec.azimuth_start_deg + frac * spec.azimuth_span_deg)
        offset = spec.ring_radius * np.array(
            [np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)])
        poses.append(look_at_pose(target + offset, target))
    return poses


def spec_intrinsics(spec: SceneSpec) -> Intrinsics:
    f = 0.5 * spec.width / np.tan(0.5 * np.radians(spec.fov_deg))
    return Intrinsics(f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                      spec.width, spec.height)


# ---------------------------------------------------------------------------
# Analytic tracing


def _yaw_matrix(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _to_probe_local(points, center, yaw_deg):
    return (np.asarray(points) - np.asarray(center)) @ _yaw_matrix(yaw_deg)


def _ray_box_np(origins, dirs, bmin, bmax):
    """Slab test. Returns (t_entry, t_exit, hit, entry_axis) vectorized."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    ta = (bmin - origins) * inv
    tb = (bmax - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t0 = tmin.max(axis=-1)
    t1 = tmax.min(axis=-1)
    hit = (t1 > np.maximum(t0, 0.0)) & (t0 > 0.0)
    axis = tmin.argmax(axis=-1)
    return t0, t1, hit, axis


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    seed_mix = np.uint64((seed * 0x165667B19E3779F9) % (1 << 64))
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         + seed_mix)
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Smooth deterministic lattice noise in [0,1]."""
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    iu = iu.astype(np.int64)
    iv = iv.astype(np.int64)
    n00 = _hash01(iu, iv, seed)
    n10 = _hash01(iu + 1, iv, seed)
    n01 = _hash01(iu, iv + 1, seed)
    n11 = _hash01(iu + 1, iv + 1, seed)
    return (n00 * (1 - fu) * (1 - fv) + n10 * fu * (1 - fv)
            + n01 * (1 - fu) * fv + n11 * fu * fv)


_LIGHT = np.array([0.32, -0.42, 0.85])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

# surface id -> (checker color A, checker color B)
_PALETTE = {
    0: (np.array([0.85, 0.33, 0.25]), np.array([0.95, 0.82, 0.35])),  # probe
    1: (np.array([0.42, 0.48, 0.62]), np.array([0.76, 0.78, 0.82])),  # floor
    2: (np.array([0.38, 0.62, 0.48]), np.array([0.88, 0.86, 0.78])),  # walls x
    3: (np.array([0.60, 0.45, 0.60]), np.array([0.85, 0.83, 0.72])),  # walls y
    4: (np.array([0.50, 0.55, 0.58]), np.array([0.80, 0.80, 0.84])),  # ceiling
}


def _shade(surface_id, uu, vv, normal_dot_light, period, noise_scale, seed):
    ca, cb = _PALETTE[surface_id]
    checker = ((np.floor(uu / period) + np.floor(vv / period)) % 2.0)[..., None]
    base = ca * (1.0 - checker) + cb * checker
    noise = _value_noise(uu * noise_scale, vv * noise_scale,
                         seed * 31 + surface_id)[..., None]
    brightness = 0.45 + 0.55 * np.maximum(normal_dot_light, 0.0)[..., None]
    return np.clip(base * (0.78 + 0.22 * noise) * brightness, 0.0, 1.0)


def _trace_view(spec: SceneSpec, pose: Pose, k: Intrinsics
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one view analytically: (rgb (H,W,3), probe mask, depth)."""
    H, W = spec.height, spec.width
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = pose.translation

    # probe (in its local frame)
    yaw = _yaw_matrix(spec.probe_yaw_deg)
    o_local = (origin - np.asarray(spec.probe_center)) @ yaw
    d_local = d_world @ yaw
    he = np.asarray(spec.probe_half_extents)
    t_probe, _, hit_probe, axis_probe = _ray_box_np(
        o_local, d_local, -he, he)

    # room interior: exit depth of the enclosing box
    room_min = np.array([-spec.room_half, -spec.room_half, 0.0])
    room_max = np.array([spec.room_half, spec.room_half, spec.room_height])
    inv = 1.0 / np.where(np.abs(d_world) < 1e-15, 1e-15, d_world)
    ta = (room_min - origin) * inv
    tb = (room_max - origin) * inv
    tmax = np.maximum(ta, tb)
    t_room = tmax.min(axis=-1)
    axis_room = tmax.argmin(axis=-1)

    probe_first = hit_probe & (t_probe < t_room)
    depth = np.where(probe_first, t_probe, t_room)
    hits = origin + depth[..., None] * d_world

    rgb = np.zeros((H, W, 3))

    # probe shading (local-frame checker so texture follows the object)
    if probe_first.any():
        pl = (hits[probe_first] - np.asarray(spec.probe_center)) @ yaw
        ax = axis_probe[probe_first]
        sign = np.sign(d_local[probe_first, ax])
        n_local = np.zeros_like(pl)
        n_local[np.arange(len(ax)), ax] = -sign
        n_world = n_local @ yaw.T
        uv_axes = np.array([[1, 2], [0, 2], [0, 1]])
        uu = pl[np.arange(len(ax)), uv_axes[ax, 0]] + 3.0 * ax
        vv = pl[np.arange(len(ax)), uv_axes[ax, 1]]
        ndl = n_world @ _LIGHT
        rgb[probe_first] = _shade(0, uu, vv, ndl, spec.checker_period_probe,
                                  spec.noise_scale * 2.0, spec.seed)

    # room shading
    room_px = ~probe_first
    if room_px.any():
        ph = hits[room_px]
        ax = axis_room[room_px]
        sign = np.sign(d_world[room_px, ax])
        n = np.zeros_like(ph)
        n[np.arange(len(ax)), ax] = -sign
        ndl = n @ _LIGHT
        uv_axes = np.array([[1, 2], [0, 2], [0, 1]])
        uu = ph[np.arange(len(ax)), uv_axes[ax, 0]]
        vv = ph[np.arange(len(ax)), uv_axes[ax, 1]]
        surf = np.where(ax == 2, np.where(sign > 0, 4, 1), np.where(ax == 0, 2, 3))
        shaded = np.zeros((len(ax), 3))
        for s_id in (1, 2, 3, 4):
            sel = surf == s_id
            if sel.any():
                shaded[sel] = _shade(s_id, uu[sel], vv[sel], ndl[sel],
                                     spec.checker_period_room,
                                     spec.noise_scale, spec.seed)
        rgb[room_px] = shaded

    return rgb, probe_first, depth


def _probe_point_visible(spec: SceneSpec, point: np.ndarray, pose: Pose,
                         k: Intrinsics) -> bool:
    """Convex-probe visibility: the camera ray must first hit the box at
    the point itself, and the projection must land inside the image."""
    center = pose.translation
    rel = point - center
    dist = np.linalg.norm(rel)
    d = rel / dist
    yaw = _yaw_matrix(spec.probe_yaw_deg)
    he = np.asarray(spec.probe_half_extents)
    t0, _, hit, _ = _ray_box_np((center - np.asarray(spec.probe_center)) @ yaw,
                                d @ yaw, -he, he)
    if not bool(hit) or abs(float(t0) - dist) > 1e-6 * max(dist, 1.0):
        return False
    pc = pose.rotation.T @ rel
    if pc[2] <= 1e-9:
        return False
    u = k.fx * pc[0] / pc[2] + k.cx
    v = k.fy * pc[1] / pc[2] + k.cy
    margin = 1.0
    return margin <= u <= k.width - 1 - margin and margin <= v <= k.height - 1 - margin


def _sample_probe_surface(spec: SceneSpec, n: int, rng: np.random.Generator
                          ) -> np.ndarray:
    """Uniform points on the probe faces (area-weighted), in world frame."""
    he = np.asarray(spec.probe_half_extents)
    areas = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
    weights = np.repeat(areas, 2)
    weights = weights / weights.sum()
    face = rng.choice(6, size=n, p=weights)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    uv = rng.uniform(-0.96, 0.96, size=(n, 2))
    pts = np.zeros((n, 3))
    uv_axes = np.array([[1, 2], [0, 2], [0, 1]])
    rows = np.arange(n)
    pts[rows, axis] = sign * he[axis]
    pts[rows, uv_axes[axis, 0]] = uv[:, 0] * he[uv_axes[axis, 0]]
    pts[rows, uv_axes[axis, 1]] = uv[:, 1] * he[uv_axes[axis, 1]]
    return pts @ _yaw_matrix(spec.probe_yaw_deg).T + np.asarray(spec.probe_center)


def _project_np(point, pose: Pose, k: Intrinsics) -> np.ndarray:
    pc = pose.rotation.T @ (point - pose.translation)
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Render ground-truth images, masks, poses and oracle correspondences."""
    spec.validate()
    k = spec_intrinsics(spec)
    poses = ring_poses(spec)

    for i, p in enumerate(poses):
        pix = _project_np(np.asarray(spec.probe_center, dtype=np.float64), p, k)
        if not (0 <= pix[0] < spec.width and 0 <= pix[1] < spec.height):
            raise InvalidSpecError(f"probe center not visible from view {i}")

    images = np.zeros((spec.n_views, spec.height, spec.width, 3))
    masks = np.zeros((spec.n_views, spec.height, spec.width), dtype=bool)
    for i, p in enumerate(poses):
        rgb, mask, _ = _trace_view(spec, p, k)
        images[i] = np.rint(rgb * 255.0) / 255.0  # match on-disk quantization
        masks[i] = mask
        if not mask.any():
            raise InvalidSpecError(f"probe mask empty in view {i}")

    pairs = []
    for i in range(spec.n_views - 1):
        rng = np.random.default_rng([spec.seed, 7919, i])
        kept = 0
        attempts = 0
        while kept < spec.matches_per_pair and attempts < 40:
            attempts += 1
            cand = _sample_probe_surface(spec, 4 * spec.matches_per_pair, rng)
            for pt in cand:
                if kept >= spec.matches_per_pair:
                    break
                if _probe_point_visible(spec, pt, poses[i], k) and \
                        _probe_point_visible(spec, pt, poses[i + 1], k):
                    pairs.append(Correspondence(
                        i, i + 1,
                        _project_np(pt, poses[i], k),
                        _project_np(pt, poses[i + 1], k), 1.0))
                    kept += 1
        if kept < 6:
            raise InvalidSpecError(
                f"views {i},{i + 1} share too little of the probe ({kept} matches)")

    room_min = np.array([-spec.room_half, -spec.room_half, 0.0])
    room_max = np.array([spec.room_half, spec.room_half, spec.room_height])
    return SceneBundle(
        images=images, masks=masks, intrinsics=k, poses_gt=poses,
        matches=CorrespondenceSet(pairs),
        scene_bbox=(room_min, room_max),
        probe_center=tuple(spec.probe_center),
        probe_half_extents=tuple(spec.probe_half_extents),
        probe_yaw_deg=spec.probe_yaw_deg,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Perturbations


def perturb_masks(masks: np.ndarray, mode: str, fraction: float) -> np.ndarray:
    """Morphological dilation/erosion sized to change each mask's area by
    the requested fraction.

    Boundary pixels are added/removed in distance-transform order (a
    fractional-radius structuring element), so the realized area matches
    the target within one pixel. Deterministic: ties break in raster order.
    """
    if mode not in ("dilate", "erode"):
        raise ValueError(f"mode must be dilate|erode, got {mode!r}")
    if not (0.0 <= fraction <= 0.5):
        raise ValueError("fraction must lie in [0, 0.5]")
    if fraction == 0.0:
        return masks.copy()
    out = np.zeros_like(masks)
    for i in range(masks.shape[0]):
        m = masks[i].astype(bool)
        area = int(m.sum())
        need = int(round(area * fraction))
        result = m.copy()
        if mode == "dilate":
            dist = ndimage.distance_transform_edt(~m)
            candidates = np.flatnonzero(~m.reshape(-1))
            order = np.lexsort((candidates, dist.reshape(-1)[candidates]))
            chosen = candidates[order[:need]]
            result.reshape(-1)[chosen] = True
        else:
            dist = ndimage.distance_transform_edt(m)
            candidates = np.flatnonzero(m.reshape(-1))
            order = np.lexsort((candidates, dist.reshape(-1)[candidates]))
            chosen = candidates[order[:need]]
            result.reshape(-1)[chosen] = False
        out[i] = result
    return out


def perturb_poses(poses: list, rot_noise_deg: float, trans_noise_frac: float,
                  seed: int) -> tuple[list, dict]:
    """Seeded Gaussian pose noise calibrated so the mean realized rotation
    angle is rot_noise_deg and the mean center shift is trans_noise_frac of
    the scene scale. Returns (poses, realized-error stats)."""
    if rot_noise_deg < 0 or trans_noise_frac < 0:
        raise ValueError("noise magnitudes must be >= 0")
    from .geometry import exp_se3

    rng = np.random.default_rng(seed)
    scale = scene_scale(poses) if len(poses) >= 2 else 1.0
    # E||N(0, I3)|| = sqrt(2) * Gamma(2) / Gamma(3/2)
    mean_chi3 = float(np.sqrt(2.0)) * 1.0 / float(np.sqrt(np.pi) / 2.0)
    sigma_r = np.radians(rot_noise_deg) / mean_chi3
    sigma_t = trans_noise_frac * scale / mean_chi3

    out = []
    rot_errs = []
    trans_errs = []
    for p in poses:
        w = rng.normal(0.0, sigma_r, size=3) if sigma_r > 0 else np.zeros(3)
        dt = rng.normal(0.0, sigma_t, size=3) if sigma_t > 0 else np.zeros(3)
        dR, _ = exp_se3(np.concatenate([w, np.zeros(3)]))
        out.append(Pose(dR @ p.rotation, p.translation + dt))
        rot_errs.append(np.degrees(np.linalg.norm(w)))
        trans_errs.append(np.linalg.norm(dt))
    stats = {
        "mean_rot_err_deg": float(np.mean(rot_errs)),
        "mean_trans_err": float(np.mean(trans_errs)),
        "scene_scale": float(scale),
    }
    return out, stats


# ---------------------------------------------------------------------------
# Dataset directory layout


def save_dataset(bundle: SceneBundle, path) -> None:
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    meta = {
        "version": DATASET_VERSION,
        "intrinsics": bundle.intrinsics.to_dict(),
        "scene_bbox": [list(map(float, bundle.scene_bbox[0])),
                       list(map(float, bundle.scene_bbox[1]))],
        "probe_center": list(map(float, bundle.probe_center)),
        "probe_half_extents": list(map(float, bundle.probe_half_extents)),
        "probe_yaw_deg": float(bundle.probe_yaw_deg),
        "n_views": bundle.n_views,
    }
    if bundle.spec is not None:
        meta["spec"] = bundle.spec.to_dict()
    with open(os.path.join(path, "scene.json"), "w") as f:
        json.dump(meta, f, indent=1)
    for i in range(bundle.n_views):
        ppmio.write_ppm(os.path.join(path, "images", f"{i:03d}.ppm"),
                        bundle.images[i])
        ppmio.write_mask_ppm(os.path.join(path, "masks", f"{i:03d}.ppm"),
                             bundle.masks[i])
    if bundle.poses_gt is not None:
        save_poses_jsonl(os.path.join(path, "poses_gt.jsonl"), bundle.poses_gt)
    save_matches_jsonl(os.path.join(path, "matches.jsonl"), bundle.matches)


def load_dataset(path) -> SceneBundle:
    scene_json = os.path.join(path, "scene.json")
    if not os.path.exists(scene_json):
        raise MissingFileError(scene_json)
    with open(scene_json) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{scene_json}: invalid JSON at byte {e.pos}") from e
    k = Intrinsics.from_dict(meta["intrinsics"])
    n = int(meta["n_views"])
    images = np.zeros((n, k.height, k.width, 3))
    masks = np.zeros((n, k.height, k.width), dtype=bool)
    for i in range(n):
        img_path = os.path.join(path, "images", f"{i:03d}.ppm")
        img = ppmio.read_ppm(img_path)
        if img.shape[:2] != (k.height, k.width):
            raise FormatError(
                f"{img_path}: image dims {img.shape[:2]} do not match"
                f" intrinsics {(k.height, k.width)}")
        images[i] = img
        mask_path = os.path.join(path, "masks", f"{i:03d}.ppm")
        mask = ppmio.read_mask_ppm(mask_path)
        if mask.shape != (k.height, k.width):
            raise FormatError(f"{mask_path}: mask dims do not match intrinsics")
        masks[i] = mask
    poses_path = os.path.join(path, "poses_gt.jsonl")
    poses = None
    if os.path.exists(poses_path):
        by_id = load_poses_jsonl(poses_path)
        poses = [by_id[i] for i in range(n)]
    matches_path = os.path.join(path, "matches.jsonl")
    matches = (load_matches_jsonl(matches_path)
               if os.path.exists(matches_path) else CorrespondenceSet([]))
    spec = SceneSpec.from_dict(meta["spec"]) if "spec" in meta else None
    return SceneBundle(
        images=images, masks=masks, intrinsics=k, poses_gt=poses,
        matches=matches,
        scene_bbox=(np.array(meta["scene_bbox"][0]),
                    np.array(meta["scene_bbox"][1])),
        probe_center=tuple(meta["probe_center"]),
        probe_half_extents=tuple(meta["probe_half_extents"]),
        probe_yaw_deg=float(meta.get("probe_yaw_deg", 0.0)),
        spec=spec,
    )
