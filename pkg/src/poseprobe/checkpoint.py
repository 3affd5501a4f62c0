"""Versioned checkpoint container: fields, mapping, schedules and poses.

A single .npz archive holds every tensor bit-exactly plus a JSON metadata
blob (construction config, intrinsics, probe placement, view ids), so a
checkpoint plus its dataset is enough to reproduce any reported number.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np
import torch

from .fields import ObjectField, ProbeConfig, SceneField
from .geometry import Intrinsics, Pose
from .losses import LossWeights
from .optimizer import TrainConfig

CHECKPOINT_VERSION = 1


class IncompatibleCheckpointError(RuntimeError):
    pass


def save_checkpoint(path, *, object_field: ObjectField, scene_field: SceneField,
                    poses: list, probe: ProbeConfig, intrinsics: Intrinsics,
                    config: TrainConfig, weights: LossWeights,
                    scene_bbox, train_view_ids: list, extra: dict | None = None
                    ) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "intrinsics": intrinsics.to_dict(),
        "probe": {"center": list(probe.center),
                  "half_extents": list(probe.half_extents)},
        "scene_bbox": [list(map(float, scene_bbox[0])),
                       list(map(float, scene_bbox[1]))],
        "config": dataclasses.asdict(config),
        "weights": dataclasses.asdict(weights),
        "train_view_ids": [int(v) for v in train_view_ids],
        "schedules": {
            "obj_p": object_field.schedule_p.progress,
            "obj_d": object_field.schedule_d.progress,
            "sce_p": scene_field.schedule_p.progress,
            "sce_d": scene_field.schedule_d.progress,
        },
        "extra": extra or {},
    }
    arrays: dict = {"meta_json": np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)}
    for prefix, module in (("obj", object_field), ("scene", scene_field)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().numpy()
    arrays["poses"] = np.stack([p.matrix for p in poses])
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    if not os.path.exists(path):
        raise IncompatibleCheckpointError(f"checkpoint not found: {path}")
    data = np.load(path)
    if "meta_json" not in data:
        raise IncompatibleCheckpointError(f"{path}: missing metadata")
    meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: version {meta.get('version')} != {CHECKPOINT_VERSION}")
    cfg = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in meta["config"].items()})
    weights = LossWeights(**meta["weights"])
    probe = ProbeConfig(tuple(meta["probe"]["center"]),
                        tuple(meta["probe"]["half_extents"]))
    k = Intrinsics.from_dict(meta["intrinsics"])

    obj = ObjectField(
        probe, grid_dims=(cfg.grid_dims,) * 3, feat_channels=cfg.feat_channels,
        color_hidden=cfg.color_hidden, deform_hidden=cfg.deform_hidden,
        pos_frequencies=cfg.pos_freq_obj, dir_frequencies=cfg.dir_freq_obj,
        alpha_window=cfg.obj_alpha_window, seed=cfg.seed)
    obj.sdf.deform_enabled = cfg.use_deform
    bmin = np.array(meta["scene_bbox"][0])
    bmax = np.array(meta["scene_bbox"][1])
    scene = SceneField(
        bmin, bmax, hidden=cfg.scene_hidden, depth=cfg.scene_depth,
        pos_frequencies=cfg.pos_freq_scene, dir_frequencies=cfg.dir_freq_scene,
        alpha_window=cfg.scene_alpha_window, seed=cfg.seed + 91)

    def _load(module, prefix):
        state = {}
        for key in data.files:
            if key.startswith(prefix + "/"):
                state[key[len(prefix) + 1:]] = torch.tensor(data[key])
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise IncompatibleCheckpointError(f"{path}: {e}") from e

    _load(obj, "obj")
    _load(scene, "scene")
    obj.schedule_p.progress = meta["schedules"]["obj_p"]
    obj.schedule_d.progress = meta["schedules"]["obj_d"]
    scene.schedule_p.progress = meta["schedules"]["sce_p"]
    scene.schedule_d.progress = meta["schedules"]["sce_d"]
    poses = [Pose.from_matrix(T) for T in data["poses"]]
    return {
        "object_field": obj, "scene_field": scene, "poses": poses,
        "probe": probe, "intrinsics": k, "config": cfg, "weights": weights,
        "scene_bbox": (bmin, bmax), "train_view_ids": meta["train_view_ids"],
        "meta": meta,
    }
