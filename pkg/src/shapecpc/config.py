"""Flat dotted-key run configuration.

A config is a JSON object whose keys are dotted paths (``pretrain.lr``). Files
may also nest objects; they are flattened on load. Every key must exist in
:data:`DEFAULTS` and values are coerced to the default's type.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from .imaging import GridSpec, GridSpecError
from .models import AutoregressorConfig, EncoderConfig, ModelConfig
from .training import FinetuneConfig, PretrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "grid.image_side": 64,
    "grid.patch_side": 16,
    "grid.stride": 8,
    "encoder.channels": [16, 32, 64],
    "encoder.kernel": 3,
    "encoder.stride": 2,
    "encoder.padding_mode": "direct",
    "encoder.normalize": True,
    "autoregressor.layers": 2,
    "autoregressor.heads": 4,
    "autoregressor.ff_width": 128,
    "autoregressor.normalize": True,
    "pretrain.k": 3,
    "pretrain.directions": ["forward", "backward"],
    "pretrain.n_textures": 5,
    "pretrain.texture_blend": 0.6,
    "pretrain.omega0": 1.0,
    "pretrain.omega_texture": 0.5,
    "pretrain.tau": 0.5,
    "pretrain.negatives": "prediction",
    "pretrain.texture_negatives": "variant",
    "pretrain.lr": 0.01,
    "pretrain.momentum": 0.9,
    "pretrain.weight_decay": 0.0,
    "pretrain.schedule": "cosine",
    "pretrain.clip_norm": 5.0,
    "pretrain.epochs": 30,
    "pretrain.batch_size": 1,
    "pretrain.early_stop": False,
    "finetune.checkpoint": "",
    "finetune.classes": 0,
    "finetune.lr": 0.1,
    "finetune.momentum": 0.9,
    "finetune.weight_decay": 1e-4,
    "finetune.epochs": 100,
    "finetune.batch_size": 0,
    "finetune.freeze": False,
    "finetune.standardize": True,
    "probe.checkpoint": "",
    "probe.epochs": 300,
    "probe.lr": 0.1,
    "probe.weight_decay": 1e-3,
    "probe.test_fraction": 0.5,
    "gensynth.images_per_class": 10,
    "gensynth.image_side": 64,
    "gensynth.texture_randomization": True,
    "gensynth.classes": ["circle", "triangle", "square", "cross"],
    "gridcheck.k": 3,
    "gridcheck.direction": "forward",
    "texcheck.format": "png",
}


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def flatten(tree: Mapping, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(key: str, value, default):
    """Convert ``value`` to the type of ``default``; strings come from ``--set``."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
            return value.lower() in ("true", "1", "yes", "on")
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ValueError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ValueError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key}: expected a list, got {value!r}")
        kind = type(default[0]) if default else str
        try:
            return [kind(v) for v in value]
        except (TypeError, ValueError):
            raise ValueError(f"{key}: list items must be {kind.__name__}, got {value!r}") from None
    if not isinstance(value, str):
        raise ValueError(f"{key}: expected a string, got {value!r}")
    return value


def parse_overrides(items: Iterable[str]) -> dict:
    """``["a.b=1", ...]`` to a dict of raw strings; malformed items are collected."""
    out, problems = {}, []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            problems.append(f"malformed override {item!r} (expected key=value)")
            continue
        out[key.strip()] = value
    if problems:
        raise ConfigError(problems)
    return out


def resolve(file_values: Mapping | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults, then file values, then overrides; all problems raised together."""
    resolved = dict(DEFAULTS)
    problems = []
    for source in (flatten(file_values or {}), dict(overrides or {})):
        for key, value in source.items():
            if key not in DEFAULTS:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                resolved[key] = _coerce(key, value, DEFAULTS[key])
            except ValueError as exc:
                problems.append(str(exc))
    problems.extend(_semantic_problems(resolved) if not problems else [])
    if problems:
        raise ConfigError(problems)
    return resolved


def _semantic_problems(c: dict) -> list[str]:
    problems = []
    try:
        GridSpec(c["grid.image_side"], c["grid.patch_side"], c["grid.stride"])
    except GridSpecError as exc:
        problems.append(f"grid: {exc}")
    positive = ["pretrain.epochs", "pretrain.batch_size", "finetune.epochs", "probe.epochs", "gensynth.images_per_class"]
    problems += [f"{k}: must be >= 1, got {c[k]}" for k in positive if c[k] < 1]
    if c["pretrain.lr"] <= 0:
        problems.append(f"pretrain.lr: must be > 0, got {c['pretrain.lr']}")
    if c["pretrain.tau"] <= 0:
        problems.append(f"pretrain.tau: must be > 0, got {c['pretrain.tau']}")
    if c["pretrain.k"] < 1:
        problems.append(f"pretrain.k: must be >= 1, got {c['pretrain.k']}")
    if c["finetune.classes"] == 1 or c["finetune.classes"] < 0:
        problems.append(f"finetune.classes: must be >= 2 (or 0 to infer), got {c['finetune.classes']}")
    if not 0 < c["probe.test_fraction"] < 1:
        problems.append(f"probe.test_fraction: must lie in (0, 1), got {c['probe.test_fraction']}")
    bad_dirs = [d for d in c["pretrain.directions"] if d not in ("forward", "backward")]
    if bad_dirs or not c["pretrain.directions"]:
        problems.append(f"pretrain.directions: expected forward/backward, got {c['pretrain.directions']}")
    if c["gridcheck.direction"] not in ("forward", "backward"):
        problems.append(f"gridcheck.direction: expected forward or backward, got {c['gridcheck.direction']!r}")
    if c["pretrain.negatives"] not in ("prediction", "target"):
        problems.append(f"pretrain.negatives: expected prediction or target, got {c['pretrain.negatives']!r}")
    if c["pretrain.texture_negatives"] not in ("variant", "original"):
        problems.append(f"pretrain.texture_negatives: expected variant or original, got {c['pretrain.texture_negatives']!r}")
    if c["pretrain.schedule"] not in ("cosine", "constant"):
        problems.append(f"pretrain.schedule: expected cosine or constant, got {c['pretrain.schedule']!r}")
    if c["encoder.padding_mode"] not in ("direct", "pad_to_full"):
        problems.append(f"encoder.padding_mode: expected direct or pad_to_full, got {c['encoder.padding_mode']!r}")
    if c["texcheck.format"] not in ("png", "imgf"):
        problems.append(f"texcheck.format: expected png or imgf, got {c['texcheck.format']!r}")
    return problems


def load_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return data


def write_resolved(resolved: Mapping, out_dir, name: str = "resolved_config.json") -> Path:
    path = Path(out_dir) / name
    path.write_text(json.dumps(dict(sorted(resolved.items())), indent=2) + "\n", encoding="utf-8")
    return path


def model_config(c: Mapping) -> ModelConfig:
    return ModelConfig(
        GridSpec(c["grid.image_side"], c["grid.patch_side"], c["grid.stride"]),
        EncoderConfig(tuple(c["encoder.channels"]), c["encoder.kernel"], c["encoder.stride"], c["encoder.padding_mode"], c["encoder.normalize"]),
        AutoregressorConfig(c["autoregressor.layers"], c["autoregressor.heads"], c["autoregressor.ff_width"], c["autoregressor.normalize"]),
    )


def pretrain_config(c: Mapping) -> PretrainConfig:
    fields = {key.split(".", 1)[1]: value for key, value in c.items() if key.startswith("pretrain.")}
    fields["directions"] = tuple(fields["directions"])
    return PretrainConfig(model=model_config(c), seed=c["seed"], **fields)


def finetune_config(c: Mapping, classes: int, freeze: bool | None = None, section: str = "finetune") -> FinetuneConfig:
    ckpt = c[f"{section}.checkpoint"] or None
    if section == "probe":
        return FinetuneConfig(
            checkpoint=ckpt, classes=classes, lr=c["probe.lr"], weight_decay=c["probe.weight_decay"],
            epochs=c["probe.epochs"], freeze=True, seed=c["seed"], model=model_config(c),
        )
    return FinetuneConfig(
        checkpoint=ckpt,
        classes=classes,
        lr=c["finetune.lr"],
        momentum=c["finetune.momentum"],
        weight_decay=c["finetune.weight_decay"],
        epochs=c["finetune.epochs"],
        batch_size=c["finetune.batch_size"],
        freeze=c["finetune.freeze"] if freeze is None else freeze,
        standardize=c["finetune.standardize"],
        seed=c["seed"],
        model=model_config(c),
    )
