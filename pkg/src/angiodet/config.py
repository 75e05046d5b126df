"""Run configuration: a versioned JSON file with strict key checking.

All constants default to the operating values used throughout the pipeline
(15 px link radius, 25 px judge radius, 0.01 confidence floor, 0.005 base lr,
0.9 momentum, 5e-4 weight decay, window of 3 frames, 640 px model input).
Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json

from .data import SynthConfig
from .evaluation import JudgeConfig
from .model import ModelConfig
from .pipeline import PipelineConfig
from .trajectory import LinkConfig
from .training import OptimizerConfig

CONFIG_FORMAT = 1

DEFAULTS = {
    "format": CONFIG_FORMAT,
    "seed": 0,
    "model": {
        "variant": "occlunet1",
        "channels": 32,
        "heads": 4,
        "blocks": 1,
        "classes": 1,
        "window": 3,
    },
    "synth": {
        "n_sequences": 200,
        "image_size": 128,
        "frames": 8,
        "branch_depth": 2,
        "bolus_speed": 24.0,
        "washout_frames": 2.0,
        "occlusion_prob": 0.8,
        "ambiguous_prob": 0.5,
        "noise": 0.02,
        "class_labels": ["occlusion"],
    },
    "preprocess": {
        "model_input": 640,
        "normalize": "minmax",
        "flip_prob": 0.5,
    },
    "detect": {
        "decode_floor": 0.01,
        "nms_iou": 0.65,
    },
    "link": {
        "radius_px": 15.0,
        "max_gap": 0,
    },
    "judge": {
        "center_radius_px": 25.0,
        "conf_floor": 0.01,
    },
    "optimizer": {
        "momentum": 0.9,
        "base_lr": 0.005,
        "weight_decay": 5e-4,
        "batch_train": 4,
        "batch_val": 1,
        "epochs": 20,
        "warmup_epochs": 2.0,
        "final_epochs": 2.0,
        "min_lr_factor": 0.001,
        "clip_norm": 10.0,
    },
    "train": {
        "windows_per_seq": 2,
        "val_fraction": 0.15,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Load, validate and default-fill a run configuration."""
    given = {}
    if path is not None:
        with open(path) as f:
            given = json.load(f)
    cfg = _merge(DEFAULTS, given)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                if section not in cfg or key not in cfg[section]:
                    raise ConfigError(f"unknown override {section}.{key}")
                cfg[section][key] = value
    if cfg["format"] != CONFIG_FORMAT:
        raise ConfigError(f"unsupported config format {cfg['format']!r}")
    return cfg


def model_config(cfg: dict, variant: str | None = None) -> ModelConfig:
    m = cfg["model"]
    v = variant or m["variant"]
    arch = "occlunet2" if v == "occlunet2" else "occlunet1"
    return ModelConfig(variant=arch, channels=m["channels"], n_heads=m["heads"],
                       n_blocks=m["blocks"], num_classes=m["classes"],
                       window=m["window"])


def pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig(
        model_input=cfg["preprocess"]["model_input"],
        normalize_method=cfg["preprocess"]["normalize"],
        decode_floor=cfg["detect"]["decode_floor"],
        nms_iou=cfg["detect"]["nms_iou"],
        link=LinkConfig(**cfg["link"]),
        judge=JudgeConfig(**cfg["judge"]),
    )


def synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(
        n_sequences=s["n_sequences"], image_size=s["image_size"],
        frames=s["frames"], branch_depth=s["branch_depth"],
        bolus_speed=s["bolus_speed"], washout_frames=s["washout_frames"],
        occlusion_prob=s["occlusion_prob"], ambiguous_prob=s["ambiguous_prob"],
        noise=s["noise"], seed=cfg["seed"], classes=list(s["class_labels"]),
    )


def optimizer_config(cfg: dict) -> OptimizerConfig:
    return OptimizerConfig(**cfg["optimizer"])
