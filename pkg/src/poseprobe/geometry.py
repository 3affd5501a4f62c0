"""Camera models, rigid transforms, projection, robust losses and pose solvers.

Conventions:
    - Pose is camera-to-world: X_world = R @ X_cam + t, camera center = t.
    - Camera looks down +z of its own frame; pixel u = fx * x/z + cx.
    - se(3) twists are 6-vectors [wx, wy, wz, vx, vy, vz] (rotation first).

The numpy API (Pose, project, pnp_ransac, ...) is for the classical
initialization/evaluation path. The torch functions at the bottom
(se3_exp, project_points, huber_t) are the differentiable counterparts
used inside the training losses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import least_squares


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class OutOfBoundsError(ValueError):
    """Pixel coordinate outside the image."""


class DegenerateError(RuntimeError):
    """Pose estimation problem is degenerate (too few / unstable points)."""


# ---------------------------------------------------------------------------
# Basic types


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def exp_se3(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """se(3) exponential: twist [w, v] -> (R, t)."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = _hat(w)
    W2 = W @ W
    I = np.eye(3)
    if theta < 1e-8:
        # fourth-order Taylor keeps exp/log inverses tight near zero
        R = I + W + 0.5 * W2
        V = I + 0.5 * W + W2 / 6.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta**2
        c = (theta - math.sin(theta)) / theta**3
        R = I + a * W + b * W2
        V = I + b * W + c * W2
    return R, V @ v


def log_se3(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """se(3) logarithm, inverse of exp_se3 for rotation angle < pi."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-8:
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    else:
        w = (
            theta
            / (2.0 * math.sin(theta))
            * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        )
    W = _hat(w)
    W2 = W @ W
    if theta < 1e-8:
        V_inv = np.eye(3) - 0.5 * W + W2 / 12.0
    else:
        V_inv = (
            np.eye(3)
            - 0.5 * W
            + (1.0 - theta * math.cos(theta / 2.0) / (2.0 * math.sin(theta / 2.0)))
            / theta**2
            * W2
        )
    return np.concatenate([w, V_inv @ t])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix by SVD (det fixed to +1)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_twist(cls, xi: np.ndarray) -> "Pose":
        R, t = exp_se3(xi)
        return cls(R, t)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def twist(self) -> np.ndarray:
        return log_se3(self.rotation, self.translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as transforms."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Correspondence:
    view_i: int
    view_j: int
    x: np.ndarray  # pixel in view_i
    y: np.ndarray  # pixel in view_j
    w: float = 1.0


@dataclass
class CorrespondenceSet:
    pairs: list[Correspondence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def between(self, view_i: int, view_j: int) -> "CorrespondenceSet":
        """Matches between the two views, oriented as (view_i, view_j)."""
        out = []
        for c in self.pairs:
            if c.view_i == view_i and c.view_j == view_j:
                out.append(c)
            elif c.view_i == view_j and c.view_j == view_i:
                out.append(Correspondence(view_i, view_j, c.y, c.x, c.w))
        return CorrespondenceSet(out)

    def involving(self, views: set[int]) -> "CorrespondenceSet":
        return CorrespondenceSet(
            [c for c in self.pairs if c.view_i in views and c.view_j in views]
        )


# ---------------------------------------------------------------------------
# Projection


def project(point: np.ndarray, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Perspective projection of a world point into pixel coordinates."""
    pc = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)
    if pc[2] <= 1e-9:
        raise BehindCameraError(f"camera-frame depth {pc[2]:.3e} <= 1e-9")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def pixel_to_ray(x: np.ndarray, pose: Pose, k: Intrinsics) -> Ray:
    """World-space ray through a pixel; origin is the camera center."""
    u, v = float(x[0]), float(x[1])
    if not k.contains(u, v):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d_world = pose.rotation @ d_cam
    return Ray(pose.translation.copy(), d_world / np.linalg.norm(d_world))


def huber(residual: np.ndarray, delta: float) -> float:
    """Huber loss of the residual norm: quadratic below delta, linear above."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = float(np.linalg.norm(np.atleast_1d(residual)))
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


# ---------------------------------------------------------------------------
# PnP-RANSAC


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    threshold: float = 2.0  # px
    seed: int = 0
    confidence: float = 0.999
    refine: bool = True
    # 6 = minimal DLT; larger samples trade RANSAC draws for stability of
    # the least-squares solve when inliers themselves carry noise
    sample_size: int = 6


def _dlt_pnp(points3d: np.ndarray, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Direct linear transform for [R|t] (world-to-camera) from >= 6 points.

    xn are normalized camera coordinates (K^-1 applied). Returns None for
    numerically degenerate configurations.
    """
    n = points3d.shape[0]
    centroid = points3d.mean(axis=0)
    scale = np.sqrt((np.sum((points3d - centroid) ** 2, axis=1)).mean())
    if scale < 1e-12:
        return None
    Xn = (points3d - centroid) / scale

    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = Xn
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -xn[:, 0:1] * Xn
    A[0::2, 11] = -xn[:, 0]
    A[1::2, 4:7] = Xn
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -xn[:, 1:2] * Xn
    A[1::2, 11] = -xn[:, 1]

    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-9:  # null space dim > 1: coplanar / collinear sample
        return None
    P = Vt[-1].reshape(3, 4)

    # undo 3D normalization: P' = P @ [[I/scale, -centroid/scale],[0,1]]
    M = np.eye(4)
    M[:3, :3] = np.eye(3) / scale
    M[:3, 3] = -centroid / scale
    P = P @ M

    Rraw = P[:, :3]
    det = np.linalg.det(Rraw)
    if abs(det) < 1e-12:
        return None
    if det < 0:
        P = -P
        Rraw = P[:, :3]
    U, sv, Vt2 = np.linalg.svd(Rraw)
    if sv[-1] < 1e-9 * sv[0]:
        return None
    R = U @ Vt2
    s_mean = sv.mean()
    t = P[:, 3] / s_mean

    # cheirality: the majority of points must land in front of the camera
    z = points3d @ R[2] + t[2]
    if np.median(z) < 0:
        R = -R  # not a rotation anymore; reject
        return None
    return R, t


def _reproj_errors(
    points3d: np.ndarray, points2d: np.ndarray, R: np.ndarray, t: np.ndarray, k: Intrinsics
) -> np.ndarray:
    pc = points3d @ R.T + t
    z = pc[:, 2]
    bad = z <= 1e-9
    z_safe = np.where(bad, 1.0, z)
    u = k.fx * pc[:, 0] / z_safe + k.cx
    v = k.fy * pc[:, 1] / z_safe + k.cy
    err = np.hypot(u - points2d[:, 0], v - points2d[:, 1])
    err[bad] = np.inf
    return err


def _refine_pnp(
    points3d: np.ndarray, points2d: np.ndarray, R: np.ndarray, t: np.ndarray, k: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Levenberg-Marquardt reprojection refinement over a w2c twist."""

    def residuals(xi):
        Ri, ti = exp_se3(xi)
        pc = points3d @ Ri.T + ti
        z = np.maximum(pc[:, 2], 1e-9)
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        return np.concatenate([u - points2d[:, 0], v - points2d[:, 1]])

    x0 = log_se3(R, t)
    sol = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return exp_se3(sol.x)


def _robust_refine(points3d, points2d, R, t, k: Intrinsics, f_scale: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Huber-loss reprojection refinement (for noisy inlier sets)."""

    def residuals(xi):
        Ri, ti = exp_se3(xi)
        pc = points3d @ Ri.T + ti
        z = np.maximum(pc[:, 2], 1e-9)
        u = k.fx * pc[:, 0] / z + k.cx
        v = k.fy * pc[:, 1] / z + k.cy
        return np.concatenate([u - points2d[:, 0], v - points2d[:, 1]])

    sol = least_squares(residuals, log_se3(R, t), method="trf", loss="huber",
                        f_scale=f_scale, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return exp_se3(sol.x)


def pnp_ransac(
    points2d: np.ndarray,
    points3d: np.ndarray,
    k: Intrinsics,
    cfg: RansacConfig = RansacConfig(),
    initial: Pose | None = None,
) -> Pose:
    """Robust camera pose from 2D-3D correspondences.

    RANSAC over DLT samples (cfg.sample_size points), scored by inlier
    count at cfg.threshold pixels, followed by LM refinement on all
    inliers. When an initial pose is supplied, a Huber-refined candidate
    seeded from it competes with the RANSAC winner on inlier count (the
    DLT solver degrades when the points are noisy and quasi-planar).
    Deterministic for a fixed cfg.seed.
    """
    points2d = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    n = points2d.shape[0]
    if n < 6 or points3d.shape[0] != n:
        raise DegenerateError(f"need >= 6 matched correspondences, got {n}")

    Kinv = np.linalg.inv(k.matrix)
    xh = np.concatenate([points2d, np.ones((n, 1))], axis=1)
    xn = (xh @ Kinv.T)[:, :2]

    rng = np.random.default_rng(cfg.seed)
    sample_size = max(6, min(cfg.sample_size, n))
    best_inliers: np.ndarray | None = None
    best_count = 0
    best_Rt: tuple[np.ndarray, np.ndarray] | None = None
    max_iters = cfg.max_iters
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=sample_size, replace=False)
        sol = _dlt_pnp(points3d[idx], xn[idx])
        if sol is None:
            continue
        R, t = sol
        # a healthy sample solve must fit its own sample
        if _reproj_errors(points3d[idx], points2d[idx], R, t, k).max() > max(
            cfg.threshold, 1.0
        ):
            continue
        err = _reproj_errors(points3d, points2d, R, t, k)
        inliers = err < cfg.threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            best_Rt = (R, t)
            ratio = count / n
            if 0 < ratio < 1:
                denom = math.log(max(1.0 - ratio**sample_size, 1e-12))
                needed = math.log(max(1.0 - cfg.confidence, 1e-12)) / denom
                max_iters = min(cfg.max_iters, max(it, int(math.ceil(needed))))
            elif ratio >= 1:
                break

    if initial is not None:
        Rw = initial.rotation.T
        tw = -Rw @ initial.translation
        R2, t2 = _robust_refine(points3d, points2d, Rw, tw, k,
                                f_scale=cfg.threshold)
        inl2 = _reproj_errors(points3d, points2d, R2, t2, k) < cfg.threshold
        if int(inl2.sum()) > best_count:
            best_count = int(inl2.sum())
            best_inliers = inl2
            best_Rt = (R2, t2)

    if best_Rt is None or best_count < 6:
        raise DegenerateError(
            f"RANSAC found no stable pose ({best_count} inliers of {n})"
        )

    R, t = best_Rt
    if cfg.refine:
        assert best_inliers is not None
        R, t = _refine_pnp(points3d[best_inliers], points2d[best_inliers], R, t, k)
    # w2c -> c2w
    return Pose(R.T, -R.T @ t)


# ---------------------------------------------------------------------------
# Trajectory alignment (Umeyama) and pose error metrics


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        return Pose(self.rotation @ pose.rotation, self.apply_points(pose.translation))

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(
            1.0 / self.scale, Rt, -Rt @ self.translation / self.scale
        )

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def umeyama(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity aligning source points onto target points."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    src_c, tgt_c = src - mu_s, tgt - mu_t
    var_s = (src_c**2).sum(axis=1).mean()
    if var_s < 1e-18:
        raise DegenerateError("all source points coincide")
    C = tgt_c.T @ src_c / src.shape[0]
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / var_s
    t = mu_t - s * R @ mu_s
    return SimilarityTransform(float(s), R, t)


def rotation_geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = np.clip((np.trace(Ra.T @ Rb) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(cos))


def scene_scale(poses: list[Pose]) -> float:
    """RMS distance of camera centers from their centroid."""
    centers = np.stack([p.center for p in poses])
    return float(np.sqrt(((centers - centers.mean(axis=0)) ** 2).sum(axis=1).mean()))


def align_pose_sets(
    estimated: list[Pose], ground_truth: list[Pose]
) -> tuple[SimilarityTransform, float, float]:
    """Umeyama-align estimated camera centers onto ground truth, then report
    mean geodesic rotation error (deg) and mean aligned center distance,
    scaled by 100 / ground-truth scene scale."""
    if len(estimated) != len(ground_truth) or len(estimated) < 2:
        raise ValueError("pose lists must have equal length >= 2")
    est_c = np.stack([p.center for p in estimated])
    gt_c = np.stack([p.center for p in ground_truth])
    sim = umeyama(est_c, gt_c)
    rot_errs = [
        rotation_geodesic_deg(sim.rotation @ e.rotation, g.rotation)
        for e, g in zip(estimated, ground_truth)
    ]
    center_errs = np.linalg.norm(sim.apply_points(est_c) - gt_c, axis=1)
    scale = scene_scale(ground_truth)
    if scale < 1e-12:
        raise DegenerateError("ground-truth camera centers coincide")
    trans_err = float(center_errs.mean() * 100.0 / scale)
    return sim, float(np.mean(rot_errs)), trans_err


# ---------------------------------------------------------------------------
# JSONL pose / correspondence files


def save_poses_jsonl(path, poses: dict[int, Pose] | list[Pose]) -> None:
    if isinstance(poses, list):
        poses = dict(enumerate(poses))
    with open(path, "w") as f:
        for view_id in sorted(poses):
            p = poses[view_id]
            rec = {
                "view_id": int(view_id),
                "R": [float(v) for v in p.rotation.reshape(-1)],
                "t": [float(v) for v in p.translation],
            }
            f.write(json.dumps(rec) + "\n")


def load_poses_jsonl(path) -> dict[int, Pose]:
    poses = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            poses[int(rec["view_id"])] = Pose(
                np.array(rec["R"], dtype=np.float64).reshape(3, 3),
                np.array(rec["t"], dtype=np.float64),
            )
    return poses


def save_matches_jsonl(path, matches: CorrespondenceSet) -> None:
    with open(path, "w") as f:
        for c in matches:
            rec = {
                "view_i": int(c.view_i),
                "view_j": int(c.view_j),
                "x": [float(c.x[0]), float(c.x[1])],
                "y": [float(c.y[0]), float(c.y[1])],
                "w": float(c.w),
            }
            f.write(json.dumps(rec) + "\n")


def load_matches_jsonl(path) -> CorrespondenceSet:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pairs.append(
                Correspondence(
                    int(rec["view_i"]),
                    int(rec["view_j"]),
                    np.array(rec["x"], dtype=np.float64),
                    np.array(rec["y"], dtype=np.float64),
                    float(rec["w"]),
                )
            )
    return CorrespondenceSet(pairs)


# ---------------------------------------------------------------------------
# Torch counterparts (differentiable, batched)


def se3_exp(xi: torch.Tensor) -> torch.Tensor:
    """Batched se(3) exponential map, twist (...,6) -> transform (...,4,4).

    Differentiable everywhere including the zero twist (Taylor branch with
    NaN-safe masking).
    """
    w, v = xi[..., :3], xi[..., 3:]
    theta = torch.linalg.norm(w, dim=-1, keepdim=True).unsqueeze(-1)  # (...,1,1)
    small = theta < 1e-6
    theta_safe = torch.where(small, torch.ones_like(theta), theta)

    zero = torch.zeros_like(w[..., 0])
    W = torch.stack(
        [
            torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
            torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
            torch.stack([-w[..., 1], w[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )
    W2 = W @ W
    I = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(W.shape)

    a = torch.where(small, 1.0 - theta**2 / 6.0, torch.sin(theta_safe) / theta_safe)
    b = torch.where(
        small, 0.5 - theta**2 / 24.0, (1.0 - torch.cos(theta_safe)) / theta_safe**2
    )
    c = torch.where(
        small,
        1.0 / 6.0 - theta**2 / 120.0,
        (theta_safe - torch.sin(theta_safe)) / theta_safe**3,
    )
    R = I + a * W + b * W2
    V = I + b * W + c * W2
    t = (V @ v.unsqueeze(-1)).squeeze(-1)

    T = torch.zeros(*xi.shape[:-1], 4, 4, dtype=xi.dtype, device=xi.device)
    T[..., :3, :3] = R
    T[..., :3, 3] = t
    T[..., 3, 3] = 1.0
    return T


def world_to_cam(points: torch.Tensor, c2w: torch.Tensor) -> torch.Tensor:
    """Transform world points (...,3) into the camera frame of c2w (...,4,4)."""
    R = c2w[..., :3, :3]
    t = c2w[..., :3, 3]
    return torch.einsum("...ji,...j->...i", R, points - t)


def project_points(
    points: torch.Tensor, c2w: torch.Tensor, k: Intrinsics, eps: float = 1e-9
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable pinhole projection.

    Returns (pixels (...,2), depth (...,), valid (...,)) where valid marks
    points in front of the camera. Pixels of invalid points are computed
    against a clamped depth so gradients stay finite.
    """
    pc = world_to_cam(points, c2w)
    z = pc[..., 2]
    valid = z > eps
    z_safe = torch.clamp(z, min=eps)
    u = k.fx * pc[..., 0] / z_safe + k.cx
    v = k.fy * pc[..., 1] / z_safe + k.cy
    return torch.stack([u, v], dim=-1), z, valid


def pixel_rays(pixels: torch.Tensor, c2w: torch.Tensor, k: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """World rays through pixels (...,2): returns (origins (...,3), unit dirs (...,3))."""
    d_cam = torch.stack(
        [
            (pixels[..., 0] - k.cx) / k.fx,
            (pixels[..., 1] - k.cy) / k.fy,
            torch.ones_like(pixels[..., 0]),
        ],
        dim=-1,
    )
    R = c2w[..., :3, :3]
    t = c2w[..., :3, 3]
    d_world = torch.einsum("...ij,...j->...i", R, d_cam)
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    return t.expand(d_world.shape[:-1] + (3,)), d_world


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm with an exact 0 value and a 0 subgradient at x = 0
    (plain sqrt backward emits NaN there)."""
    s = (x**2).sum(dim=dim)
    positive = s > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, s, torch.ones_like(s))),
                       torch.zeros_like(s))


def huber_t(residual: torch.Tensor, delta: float) -> torch.Tensor:
    """Batched Huber loss of the residual norm over the last axis."""
    r = safe_norm(residual)
    return torch.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta))
