"""Run configuration: strict JSON parsing and model/dataset construction.

Configs are flat JSON trees validated against an explicit schema; unknown
keys are rejected with their path, since silent config drift is the main
reproducibility hazard.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .data import Dataset, load_dataset, load_grid_images, make_toy
from .errors import ConfigError
from .flows import build_image_flow, build_vector_flow
from .knowledge import KnowledgeHead, derive_seed
from .objective import TzkModel
from .training import TrainConfig

_SCHEMA = {
    "seed": int,
    "model": {
        "dim": int,
        "image_shape": list,
        "flow": {"steps": int, "hidden": list, "levels": int},
        "heads": list,
    },
    "train": {
        "lr_max": float,
        "warmup_steps": int,
        "batch_size": int,
        "adam_beta1": float,
        "adam_beta2": float,
        "adam_eps": float,
        "max_steps": int,
        "seed": int,
        "freeze_tflow": bool,
        "grad_clip_norm": float,
        "checkpoint_every": int,
    },
    "data": {
        "kind": str,
        "n": int,
        "noise": float,
        "seed": int,
        "centers": int,
        "components": int,
        "radius": float,
        "path": str,
        "side": int,
        "rgb": bool,
    },
    "eval": {"seed": int, "draws": int},
    "io": {"checkpoint_dir": str, "log_path": str},
}

_HEAD_SCHEMA = {"id": str, "code_dim": int, "hidden": list,
                "cflow_steps": int, "cflow_hidden": list}


def load_config(path) -> dict:
    try:
        with open(path) as fp:
            raw = json.load(fp)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}: {err.msg}") from None
    validate_config(raw, path=str(path))
    return raw


def validate_config(cfg: dict, path: str = "config") -> None:
    _validate_tree(cfg, _SCHEMA, path)
    heads = cfg.get("model", {}).get("heads", [])
    seen = set()
    for i, head in enumerate(heads):
        where = f"{path}: model.heads[{i}]"
        if not isinstance(head, dict):
            raise ConfigError(f"{where} must be an object")
        _validate_tree(head, _HEAD_SCHEMA, where)
        if "id" not in head:
            raise ConfigError(f"{where} is missing 'id'")
        if head["id"] in seen:
            raise ConfigError(f"{where}: duplicate head id {head['id']!r}")
        seen.add(head["id"])
    model = cfg.get("model", {})
    if "dim" in model and "image_shape" in model:
        raise ConfigError(f"{path}: model.dim and model.image_shape are exclusive")


def _validate_tree(node, schema, path: str) -> None:
    if not isinstance(node, dict):
        raise ConfigError(f"{path} must be an object")
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"{path}: unknown key {key!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate_tree(value, expected, f"{path}.{key}")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key} must be an integer")
        elif not isinstance(value, expected):
            raise ConfigError(f"{path}.{key} must be {expected.__name__}")


def build_dataset(cfg: dict) -> Dataset:
    data = dict(cfg.get("data", {}))
    if "path" in data:
        path = data.pop("path")
        side = data.pop("side", None)
        rgb = data.pop("rgb", False)
        if data:
            raise ConfigError(f"data: unexpected keys with 'path': {sorted(data)}")
        if side is not None:
            return load_grid_images(path, side, rgb=rgb)
        return load_dataset(path)
    if "kind" not in data:
        raise ConfigError("data needs either 'kind' or 'path'")
    kind = data.pop("kind")
    n = data.pop("n", 1000)
    noise = data.pop("noise", 0.1)
    seed = data.pop("seed", 0)
    return make_toy(kind, n, noise, seed, **data)


def build_model(cfg: dict, dataset: Optional[Dataset] = None) -> TzkModel:
    seed = cfg.get("seed", 0)
    model_cfg = cfg.get("model", {})
    flow_cfg = dict(model_cfg.get("flow", {}))
    hidden = tuple(flow_cfg.get("hidden", (64, 64)))
    steps = flow_cfg.get("steps", 8)
    levels = flow_cfg.get("levels", 1)
    rng = np.random.default_rng(derive_seed(seed, "tflow"))

    image_shape = model_cfg.get("image_shape")
    if image_shape is None and dataset is not None and dataset.image_shape:
        image_shape = list(dataset.image_shape)
    if image_shape is not None:
        tflow = build_image_flow(image_shape, levels, steps, hidden, rng)
        dim = int(np.prod(image_shape))
    else:
        dim = model_cfg.get("dim")
        if dim is None:
            if dataset is None:
                raise ConfigError("model.dim is required without a dataset")
            dim = dataset.dim
        tflow = build_vector_flow(int(dim), steps, hidden, rng)
    if dataset is not None and dataset.dim != dim:
        raise ConfigError(
            f"model dimension {dim} disagrees with dataset dimension {dataset.dim}"
        )

    model = TzkModel(tflow, seed=seed)
    for head_cfg in model_cfg.get("heads", []):
        spec = dict(head_cfg)
        head_id = spec.pop("id")
        spec = {k: tuple(v) if k in ("hidden", "cflow_hidden") else v
                for k, v in spec.items()}
        model.add_head(KnowledgeHead(head_id, obs_dim=dim, seed=seed, **spec))
    return model


def build_train_config(cfg: dict) -> TrainConfig:
    train = dict(cfg.get("train", {}))
    if "seed" not in train:
        train["seed"] = cfg.get("seed", 0)
    return TrainConfig(**train)
