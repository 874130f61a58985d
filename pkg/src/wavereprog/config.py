"""Declarative run configuration: defaults, JSON schema, YAML load and echo."""
import copy
import json
from pathlib import Path

import jsonschema
import yaml

from .backbone import Res12Config
from .degradations import KINDS
from .errors import ConfigError, DataIOError
from .init import INIT_METHODS
from .losses import EXTRACTOR_KINDS, LossConfig
from .model import WAVE_COMPONENTS
from .output_transform import GATE_SOURCES
from .training import TrainConfig

RESOLVED_NAME = "resolved_config.yaml"

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "mode": "reprogram",
    "data": {
        "manifest": None,
        "clean_dir": None,
        "protocol": 1,
        "kinds": ["rain"],
        "toy_images": 16,
        "toy_size": 128,
    },
    "train": {
        "batch_size": 8,
        "patch": 120,
        "lr0": 1e-3,
        "lr_halve_every": 20,
        "epochs": 300,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "frozen_backbone": True,
        "checkpoint_every": 0,
        "hflip": False,
        "single_stream": True,
    },
    "loss": {
        "lambda_p": 0.04,
        "extractor_kind": "fixed-random",
        "perceptual_layers": None,
        "loss_normalization": "pixels",
        "vgg_weights": None,
        "extractor_seed": 0,
    },
    "backbone": {
        "name": "res12",
        "checkpoint": None,
        "init": "kaiming-uniform",
        "seed": 0,
        "config": {
            "trunk_width": 64,
            "n_blocks": 12,
            "block_width": 32,
            "head_tail_widths": None,
            "global_residual": True,
        },
    },
    "model": {
        "n_mlp": 2,
        "wave_components": "both",
        "transform_init": "kaiming-uniform",
        "bias": True,
        "gate_source": "fused",
    },
    "inference": {
        "tiling": True,
        "overlap": 16,
        "metric_space": "rgb",
    },
    "synth": {
        "clean_dir": None,
        "specs": [],
    },
    "eval": {
        "checkpoints": [],
        "tests": {},
        "test_manifest": None,
        "train_kinds": None,
        "protocol": None,
        "per_image_log": False,
    },
    "restore": {
        "checkpoint": None,
        "inputs": [],
    },
}


def _obj(properties):
    return {"type": "object", "additionalProperties": False, "properties": properties}


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}
_PATH = {"type": ["string", "null"]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "wavereprog run configuration",
    **_obj({
        "seed": _INT,
        "out": {"type": "string"},
        "mode": {"enum": ["reprogram", "backbone"]},
        "data": _obj({
            "manifest": _PATH,
            "clean_dir": _PATH,
            "protocol": {"enum": [1, 2]},
            "kinds": {"type": "array", "items": {"enum": list(KINDS)}, "uniqueItems": True},
            "toy_images": _POS_INT,
            "toy_size": {"type": "integer", "minimum": 8},
        }),
        "train": _obj({
            "batch_size": _POS_INT,
            "patch": {"type": "integer", "minimum": 8},
            "lr0": {"type": "number", "exclusiveMinimum": 0},
            "lr_halve_every": _POS_INT,
            "epochs": {"type": "integer", "minimum": 0},
            "betas": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "frozen_backbone": _BOOL,
            "checkpoint_every": {"type": "integer", "minimum": 0},
            "hflip": _BOOL,
            "single_stream": _BOOL,
        }),
        "loss": _obj({
            "lambda_p": {"type": "number", "minimum": 0},
            "extractor_kind": {"enum": list(EXTRACTOR_KINDS)},
            "perceptual_layers": {"type": ["array", "null"], "items": {"type": "string"},
                                  "minItems": 3, "maxItems": 3},
            "loss_normalization": {"enum": ["pixels", "elements"]},
            "vgg_weights": _PATH,
            "extractor_seed": _INT,
        }),
        "backbone": _obj({
            "name": {"type": "string"},
            "checkpoint": _PATH,
            "init": {"enum": list(INIT_METHODS)},
            "seed": _INT,
            "config": _obj({
                "trunk_width": _POS_INT,
                "n_blocks": _POS_INT,
                "block_width": _POS_INT,
                "head_tail_widths": {"type": ["array", "null"], "items": _POS_INT,
                                     "minItems": 6, "maxItems": 6},
                "global_residual": _BOOL,
            }),
        }),
        "model": _obj({
            "n_mlp": _POS_INT,
            "wave_components": {"enum": list(WAVE_COMPONENTS)},
            "transform_init": {"enum": list(INIT_METHODS)},
            "bias": _BOOL,
            "gate_source": {"enum": list(GATE_SOURCES)},
        }),
        "inference": _obj({
            "tiling": _BOOL,
            "overlap": {"type": "integer", "minimum": 0},
            "metric_space": {"enum": ["rgb", "y"]},
        }),
        "synth": _obj({
            "clean_dir": _PATH,
            "specs": {"type": "array", "items": {"type": "string"}},
        }),
        "eval": _obj({
            "checkpoints": {"type": "array", "items": {"type": "string"}},
            "tests": {"type": "object", "additionalProperties": False,
                      "properties": {k: {"type": "string"} for k in KINDS}},
            "test_manifest": _PATH,
            "train_kinds": {"type": ["array", "null"], "items": {"enum": list(KINDS)}},
            "protocol": {"enum": [1, 2, None]},
            "per_image_log": _BOOL,
        }),
        "restore": _obj({
            "checkpoint": _PATH,
            "inputs": {"type": "array", "items": {"type": "string"}},
        }),
    }),
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_schema(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def validate(cfg):
    """Check ``cfg`` against the schema and the cross-field rules."""
    _check_schema(cfg)
    data = cfg.get("data", {})
    if "kinds" in data and "protocol" in data and len(data["kinds"]) != data["protocol"]:
        raise ConfigError(f"protocol {data['protocol']} needs exactly {data['protocol']} "
                          f"train kind(s), got {data['kinds']}")
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the YAML file at ``path``, then ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        # checked before merging so typos are not hidden behind defaults
        _check_schema(loaded)
        cfg = deep_merge(cfg, loaded)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return validate(cfg)


def write_resolved(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def schema_json():
    return json.dumps(SCHEMA, indent=2)


def train_config(cfg):
    t = dict(cfg["train"])
    t.pop("single_stream")
    return TrainConfig(seed=cfg["seed"], train_kinds=tuple(cfg["data"]["kinds"]), **t)


def loss_config(cfg):
    return LossConfig(**cfg["loss"])


def res12_config(cfg):
    return Res12Config(**cfg["backbone"]["config"])
