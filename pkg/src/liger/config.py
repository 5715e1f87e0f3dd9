"""Structured run configuration: strict schema, explicit defaults, echoable.

A run config is a JSON document with sections {model, train, linearize, bench}.
Unknown sections or keys are rejected; every absent key is filled with its
default so the echoed config reproduces the run exactly when fed back.
"""

from __future__ import annotations

import copy
import json

from .data import VOCAB_SIZE
from .errors import ConfigError
from .kernels import AttentionConfig, GATE_VARIANTS
from .model import ModelSpec
from .pipeline import LinearizeConfig, TrainConfig

DEFAULTS: dict = {
    "model": {
        "vocab_size": VOCAB_SIZE,
        "model_dim": 256,
        "num_layers": 8,
        "num_heads": 4,
        "window_w": 64,
        "dtype": "f32",
    },
    "train": {
        "corpus": "",
        "val_fraction": 0.1,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.01,
        "epochs": 2,
        "seq_len": 256,
        "micro_batch": 1,
        "grad_accum": 8,
        "seed": 0,
        "lora_rank": 8,
        "lora_alpha": 8.0,
        "warmup_frac": 0.03,
        "max_steps": 0,
        "eval_windows": 0,
    },
    "linearize": {
        "gate": "gla",
        "hybrid_every": 7,
        "alpha": 0.5,
        "beta": 0.5,
        "feature_map": "softmax",
        "gate_source": "pooling",
        "swa_rope": True,
        "gsa_slots_m": 4,
        "hgrn2_gamma": 0.5,
    },
    "bench": {
        "lengths": [256, 512, 1024, 2048, 4096],
        "prefix_len": 16,
        "repeats": 5,
    },
}

_ENUMS = {
    ("model", "dtype"): ("f32", "f64"),
    ("linearize", "gate"): GATE_VARIANTS,
    ("linearize", "feature_map"): ("softmax", "identity", "trainable"),
    ("linearize", "gate_source"): ("pooling", "proj"),
}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(v, int) for v in value)
    return isinstance(value, type(default))


def resolve_config(raw: dict | None) -> dict:
    """Merge `raw` over the defaults, rejecting unknown keys and bad types."""
    resolved = copy.deepcopy(DEFAULTS)
    if raw is None:
        return resolved
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in raw.items():
        if section not in resolved:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in body.items():
            if key not in resolved[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            default = DEFAULTS[section][key]
            if not _type_ok(value, default):
                raise ConfigError(
                    f"{section}.{key} expects {type(default).__name__}, got {type(value).__name__}"
                )
            allowed = _ENUMS.get((section, key))
            if allowed and value not in allowed:
                raise ConfigError(f"{section}.{key} must be one of {allowed}, got {value!r}")
            if isinstance(default, float) and isinstance(value, int):
                value = float(value)
            resolved[section][key] = value
    return resolved


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    return resolve_config(raw)


def echo_config(resolved: dict) -> str:
    return json.dumps(resolved, indent=2, sort_keys=True)


def model_spec_from(resolved: dict) -> ModelSpec:
    m = resolved["model"]
    lin = resolved["linearize"]
    head = m["model_dim"] // max(1, m["num_heads"])
    return ModelSpec(
        vocab_size=m["vocab_size"],
        model_dim=m["model_dim"],
        num_layers=m["num_layers"],
        pattern="softmax",
        hybrid_every=max(1, lin["hybrid_every"]),
        attention=AttentionConfig(
            num_heads=m["num_heads"],
            head_dim_k=head,
            head_dim_v=head,
            window_w=m["window_w"],
        ),
        dtype=m["dtype"],
    ).validate()


def train_config_from(resolved: dict) -> TrainConfig:
    t = resolved["train"]
    keys = (
        "lr", "beta1", "beta2", "weight_decay", "epochs", "seq_len", "micro_batch",
        "grad_accum", "seed", "lora_rank", "lora_alpha", "warmup_frac", "max_steps",
        "eval_windows",
    )
    return TrainConfig(**{k: t[k] for k in keys}).validate()


def linearize_config_from(resolved: dict) -> LinearizeConfig:
    lin = resolved["linearize"]
    return LinearizeConfig(
        gate=lin["gate"],
        hybrid_every=lin["hybrid_every"],
        alpha=lin["alpha"],
        beta=lin["beta"],
        window_w=resolved["model"]["window_w"],
        feature_map=lin["feature_map"],
        gate_source=lin["gate_source"],
        swa_rope=lin["swa_rope"],
        gsa_slots_m=lin["gsa_slots_m"],
        hgrn2_gamma=lin["hgrn2_gamma"],
    )
