"""Command-line pipeline driver: generate, train, eval, render.

Exit codes: 0 success, 2 input error (bad spec/paths/incompatible files),
3 runtime abort (initialization failure or non-finite training state).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np
import torch

from . import checkpoint as ckpt
from . import metrics as image_metrics
from . import ppmio
from .fields import SceneField
from .geometry import (
    DegenerateError,
    Pose,
    SimilarityTransform,
    load_poses_jsonl,
    rotation_geodesic_deg,
    scene_scale,
    umeyama,
)
from .losses import LossWeights
from .optimizer import (
    InsufficientLiftError,
    NonFiniteGradientError,
    NonFiniteLossError,
    NoOverlapError,
    TrainConfig,
    desk_preset,
    paper_preset,
    train,
)
from .rendering import render_scene
from .synthdata import (
    CorrespondenceSet,
    InvalidSpecError,
    SceneBundle,
    SceneSpec,
    generate_scene,
    load_dataset,
    perturb_masks,
    perturb_poses,
    save_dataset,
)

DEVIATIONS = [
    "multi-layer features come from an analytic Gaussian pyramid"
    " (luminance + gradients), not a pretrained CNN",
    "LPIPS unavailable (pretrained network out of scope); Average uses the"
    " remaining two terms",
    "translation error is computed on camera centers after similarity"
    " alignment",
]


def _setup_threads() -> None:
    env = os.environ.get("POSEPROBE_THREADS")
    n = int(env) if env else min(4, os.cpu_count() or 1)
    torch.set_num_threads(max(n, 1))


def _config_hash(cfg: TrainConfig, weights: LossWeights) -> str:
    blob = json.dumps(
        {"config": dataclasses.asdict(cfg), "weights": dataclasses.asdict(weights)},
        sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Shared rendering / evaluation helpers


def render_full_view(scene_field: SceneField, pose: Pose, k, background,
                     n_samples: int, chunk: int = 2048
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Render one full image + depth map from the scene field (deterministic)."""
    dtype = scene_field.bbox_min.dtype
    H, W = k.height, k.width
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    pix = torch.tensor(np.stack([u.reshape(-1), v.reshape(-1)], axis=1), dtype=dtype)
    from .geometry import pixel_rays

    c2w = torch.tensor(pose.matrix, dtype=dtype)
    bg = torch.tensor(background, dtype=dtype)
    rgb = torch.empty((H * W, 3), dtype=dtype)
    depth = torch.empty(H * W, dtype=dtype)
    with torch.no_grad():
        for s in range(0, H * W, chunk):
            e = min(s + chunk, H * W)
            o, d = pixel_rays(pix[s:e], c2w, k)
            out = render_scene(scene_field, o, d, bg, n_samples=n_samples)
            rgb[s:e] = out["rgb"]
            depth[s:e] = out["depth"]
    return (rgb.numpy().reshape(H, W, 3).astype(np.float64),
            depth.numpy().reshape(H, W).astype(np.float64))


def per_view_pose_errors(estimated: list, ground_truth: list
                         ) -> tuple[SimilarityTransform, list, list]:
    """Umeyama-align, then per-view rotation (deg) and center errors (x100/scale)."""
    est_c = np.stack([p.center for p in estimated])
    gt_c = np.stack([p.center for p in ground_truth])
    sim = umeyama(est_c, gt_c)
    scale = scene_scale(ground_truth)
    rot = [rotation_geodesic_deg(sim.rotation @ e.rotation, g.rotation)
           for e, g in zip(estimated, ground_truth)]
    trans = list(np.linalg.norm(sim.apply_points(est_c) - gt_c, axis=1)
                 * 100.0 / scale)
    return sim, rot, [float(t) for t in trans]


def subset_bundle(bundle: SceneBundle, view_ids: list) -> SceneBundle:
    """Restrict a bundle to the given views, remapping correspondence ids."""
    remap = {int(v): i for i, v in enumerate(view_ids)}
    matches = []
    for c in bundle.matches:
        if c.view_i in remap and c.view_j in remap:
            matches.append(dataclasses.replace(
                c, view_i=remap[c.view_i], view_j=remap[c.view_j]))
    return SceneBundle(
        images=bundle.images[view_ids], masks=bundle.masks[view_ids],
        intrinsics=bundle.intrinsics,
        poses_gt=None if bundle.poses_gt is None else
        [bundle.poses_gt[v] for v in view_ids],
        matches=CorrespondenceSet(matches), scene_bbox=bundle.scene_bbox,
        probe_center=bundle.probe_center,
        probe_half_extents=bundle.probe_half_extents,
        probe_yaw_deg=bundle.probe_yaw_deg, spec=bundle.spec)


def _build_report(result, bundle, cfg, weights, args, train_view_ids) -> dict:
    per_view = []
    metrics: dict = {}
    if bundle.poses_gt is not None:
        _, rot_f, trans_f = per_view_pose_errors(result.poses, bundle.poses_gt)
        metrics["rot_err_deg"] = float(np.mean(rot_f))
        metrics["trans_err_x100"] = float(np.mean(trans_f))
        if result.init_pose_errors is not None:
            metrics["init_rot_err_deg"] = result.init_pose_errors["rot_deg"]
            metrics["init_trans_err_x100"] = result.init_pose_errors["trans_x100"]
        for i, vid in enumerate(train_view_ids):
            per_view.append({"view": int(vid), "rot_deg": rot_f[i],
                             "trans_x100": trans_f[i]})

    psnrs, ssims = [], []
    for i, vid in enumerate(train_view_ids):
        rgb, _ = render_full_view(result.scene_field, result.poses[i],
                                  bundle.intrinsics, cfg.background,
                                  cfg.scene_samples)
        psnrs.append(image_metrics.psnr(rgb, bundle.images[i]))
        ssims.append(image_metrics.ssim(rgb, bundle.images[i]))
        if per_view:
            per_view[i]["psnr"] = psnrs[-1]
            per_view[i]["ssim"] = ssims[-1]
    metrics["psnr"] = float(np.mean(psnrs))
    metrics["ssim"] = float(np.mean(ssims))
    metrics["average"] = image_metrics.average_metric(metrics["psnr"],
                                                      metrics["ssim"])
    metrics["lpips"] = "n/a (pretrained network out of scope)"
    metrics["per_view"] = per_view

    curve = [[rec["iter"], rec["total"]] for rec in result.log]
    return {
        "version": 1,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "weights": dataclasses.asdict(weights),
        "config_hash": _config_hash(cfg, weights),
        "dataset": os.path.abspath(args.scene),
        "init": args.init,
        "train_view_ids": [int(v) for v in train_view_ids],
        "deviations": DEVIATIONS,
        "diagnostics": result.diagnostics,
        "metrics": metrics,
        "loss_curve": curve,
        "log_file": "train_log.jsonl",
        "wall_clock_sec": result.wall_time,
    }


def _report_text(report: dict) -> str:
    m = report["metrics"]
    lines = [
        f"seed {report['seed']}  config {report['config_hash']}"
        f"  views {report['train_view_ids']}",
        "",
        f"{'':10s}{'Rot.':>8s}{'Trans.':>8s}{'PSNR':>8s}{'SSIM':>8s}"
        f"{'LPIPS':>8s}{'Average':>9s}",
    ]
    if "init_rot_err_deg" in m:
        lines.append(f"{'initial':10s}{m['init_rot_err_deg']:8.2f}"
                     f"{m['init_trans_err_x100']:8.2f}"
                     f"{'-':>8s}{'-':>8s}{'-':>8s}{'-':>9s}")
    rot = m.get("rot_err_deg", float("nan"))
    trans = m.get("trans_err_x100", float("nan"))
    lines.append(f"{'final':10s}{rot:8.2f}{trans:8.2f}{m['psnr']:8.2f}"
                 f"{m['ssim']:8.3f}{'n/a':>8s}{m['average']:9.3f}")
    lines.append("")
    lines.append("deviations:")
    for d in report["deviations"]:
        lines.append(f"  - {d}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    try:
        if args.spec:
            with open(args.spec) as f:
                spec = SceneSpec.from_dict(json.load(f))
        else:
            spec = SceneSpec()
        if args.seed is not None:
            spec.seed = args.seed
        if args.views is not None:
            spec.n_views = args.views
        bundle = generate_scene(spec)
        save_dataset(bundle, args.out)
    except (InvalidSpecError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {bundle.n_views}-view dataset to {args.out}")
    return 0


def _parse_init(text: str):
    if text in ("pnp", "identity"):
        return text, None
    if text.startswith("noisy:"):
        try:
            r, t = text[len("noisy:"):].split(",")
            return "noisy", (float(r), float(t))
        except ValueError:
            pass
    raise ValueError(f"bad --init value {text!r} (pnp | identity | noisy:R,T)")


def cmd_train(args) -> int:
    try:
        bundle = load_dataset(args.scene)
        init_kind, noise = _parse_init(args.init)
    except (ppmio.FormatError, ppmio.MissingFileError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    n_total = bundle.n_views
    n_train = args.views if args.views is not None else n_total
    train_view_ids = list(range(min(n_train, n_total)))
    sub = subset_bundle(bundle, train_view_ids) if n_train < n_total else bundle

    preset = desk_preset if args.preset == "desk" else paper_preset
    cfg = preset(seed=args.seed,
                 use_pnp_init=not args.no_pnp_init,
                 incremental=not args.no_incremental,
                 use_geo_obj=not args.no_geo_obj,
                 use_geo_scene=not args.no_geo_scene,
                 use_feature=not args.no_feature,
                 use_distortion=not args.no_dist,
                 use_deform=not args.no_deform)
    weights = LossWeights()
    if args.mask_noise:
        mode, frac = args.mask_noise.split(":")
        sub = dataclasses.replace(
            sub, masks=perturb_masks(sub.masks, mode, float(frac)))

    init_mode = "pnp"
    init_poses = None
    if init_kind == "identity" or args.no_pnp_init:
        init_mode = "identity"
    if init_kind == "noisy":
        if sub.poses_gt is None:
            print("error: noisy init requires ground-truth poses", file=sys.stderr)
            return 2
        init_poses, stats = perturb_poses(
            sub.poses_gt, noise[0], noise[1] / 100.0, seed=args.seed + 1)
        init_mode = "given"

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    try:
        result = train(sub, cfg, weights, init_mode=init_mode,
                       init_poses=init_poses, log_path=log_path)
    except (NoOverlapError, InsufficientLiftError, NonFiniteLossError,
            NonFiniteGradientError, DegenerateError, ValueError) as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3

    ckpt_path = os.path.join(args.out, "checkpoint.npz")
    ckpt.save_checkpoint(
        ckpt_path, object_field=result.object_field,
        scene_field=result.scene_field, poses=result.poses, probe=result.probe,
        intrinsics=sub.intrinsics, config=cfg, weights=weights,
        scene_bbox=sub.scene_bbox, train_view_ids=train_view_ids,
        extra={"init": args.init})
    report = _build_report(result, sub, cfg, weights, args, train_view_ids)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(_report_text(report))
    print(_report_text(report))
    return 0


def cmd_eval(args) -> int:
    try:
        state = ckpt.load_checkpoint(args.checkpoint)
        bundle = load_dataset(args.scene)
        if state["intrinsics"].to_dict() != bundle.intrinsics.to_dict():
            raise ckpt.IncompatibleCheckpointError(
                "checkpoint intrinsics do not match the dataset")
        if bundle.poses_gt is None:
            raise ckpt.IncompatibleCheckpointError(
                "evaluation requires ground-truth poses in the dataset")
    except (ckpt.IncompatibleCheckpointError, ppmio.FormatError,
            ppmio.MissingFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    train_ids = state["train_view_ids"]
    if args.views:
        heldout = [int(v) for v in args.views.split(",")]
    else:
        heldout = [v for v in range(bundle.n_views) if v not in train_ids]
    if not heldout:
        print("error: no held-out views", file=sys.stderr)
        return 2

    gt_train = [bundle.poses_gt[v] for v in train_ids]
    sim, _, _ = per_view_pose_errors(state["poses"], gt_train)
    inv = sim.inverse()
    os.makedirs(args.out, exist_ok=True)
    cfg = state["config"]
    rows = []
    for vid in heldout:
        pose = inv.apply_pose(bundle.poses_gt[vid])
        rgb, depth = render_full_view(state["scene_field"], pose,
                                      bundle.intrinsics, cfg.background,
                                      cfg.scene_samples)
        ppmio.write_ppm(os.path.join(args.out, f"eval_{vid:03d}.ppm"), rgb)
        ppmio.write_depth(os.path.join(args.out, f"eval_{vid:03d}.depth"), depth)
        p = image_metrics.psnr(rgb, bundle.images[vid])
        s = image_metrics.ssim(rgb, bundle.images[vid])
        rows.append({"view": vid, "psnr": p, "ssim": s,
                     "average": image_metrics.average_metric(p, s)})
    out = {
        "heldout": rows,
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "lpips": "n/a (pretrained network out of scope)",
    }
    out["average"] = image_metrics.average_metric(out["psnr"], out["ssim"])
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(out, f, indent=1)
    print(json.dumps(out, indent=1))
    return 0


def cmd_render(args) -> int:
    try:
        state = ckpt.load_checkpoint(args.checkpoint)
        poses = load_poses_jsonl(args.poses)
    except (ckpt.IncompatibleCheckpointError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    cfg = state["config"]
    for vid in sorted(poses):
        rgb, depth = render_full_view(state["scene_field"], poses[vid],
                                      state["intrinsics"], cfg.background,
                                      cfg.scene_samples)
        ppmio.write_ppm(os.path.join(args.out, f"render_{vid:03d}.ppm"), rgb)
        ppmio.write_depth(os.path.join(args.out, f"render_{vid:03d}.depth"),
                          depth)
    print(f"rendered {len(poses)} views to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="poseprobe",
        description="Joint pose + radiance field optimization around an"
                    " in-scene probe object")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--spec", default=None, help="scene spec JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--views", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize poses and fields on a dataset")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--views", type=int, default=None,
                   help="train on the first N views")
    t.add_argument("--init", default="pnp",
                   help="pnp | identity | noisy:R,T (degrees, x100 units)")
    t.add_argument("--mask-noise", default=None,
                   help="dilate:F | erode:F mask perturbation")
    t.add_argument("--no-pnp-init", action="store_true")
    t.add_argument("--no-incremental", action="store_true")
    t.add_argument("--no-geo-obj", action="store_true")
    t.add_argument("--no-geo-scene", action="store_true")
    t.add_argument("--no-feature", action="store_true")
    t.add_argument("--no-dist", action="store_true")
    t.add_argument("--no-deform", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="render + score held-out views")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--views", default=None, help="comma-separated view ids")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a pose path from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True, help="pose JSONL file")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    _setup_threads()
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    code = args.func(args)
    if code == 0:
        print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
