"""Flat run configuration with dotted section keys.

A config file is a JSON object whose keys are ``section.name`` strings, e.g.
``{"train.lr": 0.0005, "loss.lambda_cyc": 10}``. Missing keys take their
defaults; unknown keys and wrongly typed values are rejected. The config hash
is computed over the canonical (key-sorted) serialization so it does not depend
on key order in the file.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .core import DomainTag
from .data import DatasetSpec, SyntheticConfig
from .errors import ConfigError
from .objectives import LossWeights
from .trainer import TrainConfig

DEFAULTS = {
    "train.lr": 5e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.epochs": 10,
    "train.batch_size": 4,
    "train.seed": 0,
    "train.gan_form": "least_squares",
    "train.fusion": "feature",
    "train.pairs": ["original", "pre_domain", "post_domain"],
    "train.ia": True,
    "train.fa": True,
    "train.grad_clip": 5.0,
    "train.lr_decay": False,
    "train.image_pool": 0,
    "train.augment": True,
    "train.checkpoint_every": 0,
    "model.gen_width": 8,
    "model.gen_blocks": 2,
    "model.disc_width": 8,
    "model.ext_width": 8,
    "model.df_width": 8,
    "loss.lambda_cyc": 10.0,
    "loss.lambda_i": 1.0,
    "loss.lambda_f": 0.1,
    "loss.lambda_cd": 1.0,
    "data.root": "",
    "data.train_split": "train",
    "data.val_split": "",
    "data.test_split": "test",
    "data.tile_size": 0,
    "data.resize": False,
    "synth.n": 8,
    "synth.tile": 64,
    "synth.shift": 1.0,
    "synth.change_rate": 0.3,
    "synth.shapes_min": 3,
    "synth.shapes_max": 6,
    "synth.seed": 0,
    "eval.threshold": 0.5,
    "eval.aggregation": "micro",
    "out_dir": "runs/default",
}


def _check_type(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def resolve(*layers: dict) -> dict:
    """Merge override layers (later wins) over the defaults, validating each key."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, value in (layer or {}).items():
            if key == "config_hash":
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                cfg[key] = _check_type(key, value)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object of dotted keys")
    return raw


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def env_seed() -> int | None:
    value = os.environ.get("SDACD_SEED")
    if value in (None, ""):
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"SDACD_SEED must be an integer, got {value!r}") from None


def canonical(cfg: dict) -> str:
    return json.dumps({k: v for k, v in cfg.items() if k != "config_hash"}, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(sorted(cfg.items()))
    doc["config_hash"] = config_hash(cfg)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["train.lr"],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"],
        loss_weights=LossWeights(cfg["loss.lambda_cyc"], cfg["loss.lambda_i"], cfg["loss.lambda_f"], cfg["loss.lambda_cd"]),
        gan_form=cfg["train.gan_form"],
        fusion=cfg["train.fusion"],
        active_tags=tuple(DomainTag(t) for t in cfg["train.pairs"]),
        ia_enabled=cfg["train.ia"],
        fa_enabled=cfg["train.fa"],
        grad_clip=cfg["train.grad_clip"] or None,
        lr_decay=cfg["train.lr_decay"],
        image_pool=cfg["train.image_pool"],
        augment=cfg["train.augment"],
        checkpoint_every=cfg["train.checkpoint_every"],
        gen_width=cfg["model.gen_width"],
        gen_blocks=cfg["model.gen_blocks"],
        disc_width=cfg["model.disc_width"],
        ext_width=cfg["model.ext_width"],
        df_width=cfg["model.df_width"],
        eval_threshold=cfg["eval.threshold"],
    )


def dataset_spec(cfg: dict, split_key: str) -> DatasetSpec:
    if not cfg["data.root"]:
        raise ConfigError("data.root is not set")
    return DatasetSpec(cfg["data.root"], cfg[split_key], tile_size=cfg["data.tile_size"] or None,
                       resize=cfg["data.resize"])


def synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(
        n_samples=cfg["synth.n"], tile_size=cfg["synth.tile"],
        shapes_per_scene=(cfg["synth.shapes_min"], cfg["synth.shapes_max"]),
        change_rate=cfg["synth.change_rate"], shift_strength=cfg["synth.shift"], seed=cfg["synth.seed"],
    )
