"""Run configuration: defaulted sections, strict validation, stable hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Dict, Iterable, Optional

from .synth import FAMILIES


class ConfigError(ValueError):
    """Schema violation; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "data": {
        "paths": [],
        "format": "class-folders",
        "families": list(FAMILIES),
        "classes": 10,
        "per_class": 60,
        "image_size": 32,
        "seed": 0,
    },
    "backbone": {
        "channels": [32, 32, 64, 64],
        "pretrain_epochs": 15,
        "pretrain_lr": 0.001,
        "pretrain_batch_size": 64,
    },
    "encoder": {
        "channels": [32, 32, 64],
        "variant": "plain",
        "reduction": 4,
        "attention_gate": None,
    },
    "adaptation": {
        "head_hidden": 64,
    },
    "training": {
        "episodes_total": 5000,
        "lr": 0.0005,
        "batch_size": 16,
        "validate_every": 200,
        "validation_episodes": 50,
        "way": 5,
        "shot": 1,
        "query": 10,
    },
    "protocol": {
        "name": "oneshot",
        "source": None,
        "n_tasks": 100,
        "way": 5,
        "shot": 1,
        "query": 10,
        "fixed_size": 10,
        "split": "test",
        "draws": 100,
        "fluctuation_tasks": 10,
        "supports_per_task": 4,
        "timing_tasks": 10,
    },
    "output": {
        "root": "runs",
    },
}

# keys whose value may be null or a string
_NULLABLE_STR = {"encoder.attention_gate", "protocol.source"}
_CHOICES = {
    "encoder.variant": ("plain", "cmf"),
    "encoder.attention_gate": (None, "sigmoid"),
    "data.format": ("class-folders", "idx"),
    "protocol.name": ("oneshot", "azs1", "azs2", "azs2-sweep", "random-matrix"),
    "protocol.split": ("train", "val", "test"),
}
# run-directory identity excludes evaluation and output settings
_IDENTITY_SECTIONS = ("seed", "data", "backbone", "encoder", "adaptation", "training")


def _check(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        out = copy.deepcopy(default)
        for k, v in value.items():
            sub = f"{path}.{k}" if path else k
            if k not in default:
                raise ConfigError(sub, "unknown key")
            out[k] = _check(v, default[k], sub)
        return out
    if path in _NULLABLE_STR:
        if value is not None and not isinstance(value, str):
            raise ConfigError(path, "expected a string or null")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        if value < 0 or (value == 0 and path not in ("seed", "data.seed", "training.episodes_total", "backbone.pretrain_epochs")):
            raise ConfigError(path, "must be positive")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(path, "expected a positive number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        if path.endswith("channels") and not (value and all(isinstance(c, int) and not isinstance(c, bool) and c > 0 for c in value)):
            raise ConfigError(path, "expected a non-empty list of positive integers")
        if path in ("data.paths", "data.families") and not all(isinstance(c, str) for c in value):
            raise ConfigError(path, "expected a list of strings")
    if path in _CHOICES and value not in _CHOICES[path]:
        raise ConfigError(path, f"expected one of {list(_CHOICES[path])}, got {value!r}")
    return value


def resolve(user: Optional[Dict[str, Any]] = None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """Defaults merged with ``user`` and ``key.path=value`` overrides, validated."""
    merged = copy.deepcopy(user or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = merged
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a non-object")
        node[parts[-1]] = value
    cfg = _check(merged, DEFAULTS, "")
    bad = [f for f in cfg["data"]["families"] if f not in FAMILIES]
    if bad:
        raise ConfigError("data.families", f"unknown families {bad}; known: {list(FAMILIES)}")
    return cfg


def load(path) -> Dict[str, Any]:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    return data


def dumps(cfg: Dict[str, Any]) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def run_hash(cfg: Dict[str, Any]) -> str:
    ident = copy.deepcopy({k: cfg[k] for k in _IDENTITY_SECTIONS})
    # both variants share one run directory and one backbone
    del ident["encoder"]["variant"]
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:12]
