"""Run configuration: one JSON object describing model, variant, task, training.

Shape (keys optional unless a subcommand needs them):

    {
      "seed": 0,
      "out_dir": "runs/demo",
      "backbone": "runs/pretrain/checkpoint",   // finetune/eval/analyze input
      "model":  { ... ModelConfig fields ... },
      "perft":  { "variant": "R", "d_b": 8, "m": 2, "k_peft": 2, ... },
      "train":  { ... TrainConfig fields ... },
      "task":   { ... TaskSpec fields ... },
      "data":   { "train_jsonl": "...", "eval_jsonl": "..." },
      "n_train": 4096, "n_eval": 256,
      "dims":   { ... BackboneDims fields ... },   // count-params only
      "sweep":  { "perft.d_b": [4, 8], ... }       // sweep only
    }

Dotted --set overrides (e.g. train.lr=0.001) are applied before validation;
values parse as JSON with bare-string fallback.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .data import TaskSpec
from .model import ModelConfig
from .numerics import ConfigError, ParseError
from .peft import OLMOE_1B_7B, BackboneDims, PerftConfig
from .training import TrainConfig

DIMS_PRESETS = {"olmoe-1b-7b": OLMOE_1B_7B}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: Optional[str] = None
    backbone: Optional[str] = None
    model: Optional[ModelConfig] = None
    perft: Optional[PerftConfig] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    task: Optional[TaskSpec] = None
    data: dict = field(default_factory=dict)
    dims: BackboneDims = field(default_factory=lambda: copy.copy(OLMOE_1B_7B))
    n_train: int = 4096
    n_eval: int = 256
    sweep: dict = field(default_factory=dict)


def _build_section(name: str, cls, payload: Any):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    try:
        return cls(**payload)
    except TypeError as e:
        raise ConfigError(f"config section {name!r}: {e}") from e
    except ConfigError as e:
        raise ConfigError(f"config section {name!r}: {e}") from e


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = copy.deepcopy(raw)
    cfg = RunConfig()
    plain = {"seed": int, "out_dir": str, "backbone": str, "n_train": int, "n_eval": int}
    for key, value in raw.items():
        if key in plain:
            setattr(cfg, key, plain[key](value) if value is not None else None)
        elif key == "model":
            cfg.model = _build_section("model", ModelConfig, value)
        elif key == "perft":
            cfg.perft = None if value is None else _build_section("perft", PerftConfig, value)
        elif key == "train":
            if isinstance(value, dict) and isinstance(value.get("betas"), list):
                value["betas"] = tuple(value["betas"])
            cfg.train = _build_section("train", TrainConfig, value)
        elif key == "task":
            cfg.task = _build_section("task", TaskSpec, value)
        elif key == "dims":
            if isinstance(value, str):
                if value not in DIMS_PRESETS:
                    raise ConfigError(f"unknown dims preset {value!r}; have {sorted(DIMS_PRESETS)}")
                cfg.dims = copy.copy(DIMS_PRESETS[value])
            else:
                cfg.dims = _build_section("dims", BackboneDims, value)
        elif key == "data":
            if not isinstance(value, dict):
                raise ConfigError("config section 'data' must be an object")
            cfg.data = value
        elif key == "sweep":
            if not isinstance(value, dict):
                raise ConfigError("config section 'sweep' must be an object of lists")
            cfg.sweep = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def load_config(path, overrides: Optional[list[str]] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    for ov in overrides or []:
        raw = apply_override(raw, ov)
    return from_dict(raw)


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one dotted key=value override onto the raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, _, text = assignment.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"--set expects a non-empty key, got {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {key}: {part!r} is not an object")
        node = nxt
    node[parts[-1]] = value
    return raw
