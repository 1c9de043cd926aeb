"""Experiment configuration files.

A config is one JSON document. Unknown keys are rejected at every level,
and the method-critical values (method, lambda, label weights, threshold)
must be written out explicitly. ``resolve`` fills everything else from the
chosen preset and returns the fully explicit document that gets hashed and
copied next to every output.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields

from .augment import AugmentationConfig, paper_augmentation
from .losses import LossConfig
from .models import NetworkSpec, default_spec
from .train import METHODS, TrainConfig

SEED_ENV = "PSEUDOEDGE_SEED"


class ConfigError(ValueError):
    pass


PRESET_TRAINING = {
    "paper": {"epochs": 120, "batch_size": 8, "patch_size": 256},
    "tiny": {"epochs": 30, "batch_size": 16, "patch_size": 64},
}

_SPEC_KEYS = {f.name for f in fields(NetworkSpec)} - {"role"}

SCHEMA = {
    "name": str,
    "preset": str,
    "method": str,
    "seed": int,
    "output_dir": str,
    "data": {"root": str, "positive_radius": int},
    "networks": {"segmentation": dict, "edge": dict, "attention": dict},
    "loss": {"lam": float, "weight_positive": float, "weight_negative": float},
    "optimizer": {"lr": float, "betas": list, "eps": float},
    "scheduler": {"factor": float, "patience": int},
    "training": {"epochs": int, "batch_size": int, "patch_size": int},
    "augmentation": dict,
    "evaluation": {"threshold": float, "k": int, "folds": (list, type(None)), "split_seed": int},
}

REQUIRED = [("method",), ("loss", "lam"), ("loss", "weight_positive"), ("loss", "weight_negative"),
            ("evaluation", "threshold")]


def _check(doc, schema, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    for key, want in schema.items():
        if key not in doc:
            continue
        val = doc[key]
        where = f"{path}.{key}" if path else key
        if isinstance(want, dict):
            _check(val, want, where)
        elif want is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}: expected a number")
        elif want is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{where}: expected an integer")
        elif not isinstance(val, want):
            raise ConfigError(f"{where}: expected {want}")


def _check_spec(d, role):
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"networks.{role}: unknown keys {sorted(unknown)}")


def resolve(doc: dict, env=None) -> dict:
    """Validate ``doc`` and return the fully explicit config."""
    env = os.environ if env is None else env
    _check(doc, SCHEMA)
    for path in REQUIRED:
        node = doc
        for key in path:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"missing required key {'.'.join(path)}")
            node = node[key]
    if doc["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    preset = doc.get("preset", "paper")
    if preset not in PRESET_TRAINING:
        raise ConfigError(f"preset must be one of {sorted(PRESET_TRAINING)}")

    out = {"name": doc.get("name", "experiment"), "preset": preset, "method": doc["method"],
           "seed": doc.get("seed", 0), "output_dir": doc.get("output_dir", "results")}
    data = doc.get("data", {})
    out["data"] = {"root": data.get("root", ""), "positive_radius": data.get("positive_radius", 0)}

    nets = {}
    for role in ("segmentation", "edge", "attention"):
        given = doc.get("networks", {}).get(role, {})
        _check_spec(given, role)
        spec = default_spec(role, preset).to_dict()
        spec.update(given)
        try:
            NetworkSpec(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"networks.{role}: {exc}") from exc
        nets[role] = spec
    out["networks"] = nets

    out["loss"] = {k: float(v) for k, v in doc["loss"].items()}
    opt = doc.get("optimizer", {})
    out["optimizer"] = {"lr": float(opt.get("lr", 1e-3)), "betas": [float(b) for b in opt.get("betas", [0.9, 0.999])],
                        "eps": float(opt.get("eps", 1e-8))}
    if len(out["optimizer"]["betas"]) != 2:
        raise ConfigError("optimizer.betas must hold two numbers")
    sch = doc.get("scheduler", {})
    out["scheduler"] = {"factor": float(sch.get("factor", 0.5)), "patience": sch.get("patience", 5)}
    tr = dict(PRESET_TRAINING[preset])
    tr.update(doc.get("training", {}))
    out["training"] = tr

    if "augmentation" in doc:
        aug = doc["augmentation"]
        try:
            AugmentationConfig.from_dict(aug)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"augmentation: {exc}") from exc
        base = {f.name: getattr(AugmentationConfig(), f.name) for f in fields(AugmentationConfig)}
        base.update(aug)
    else:
        side = tr["patch_size"]
        a = paper_augmentation(seed=0, side=side)
        base = {f.name: getattr(a, f.name) for f in fields(AugmentationConfig)}
    out["augmentation"] = {k: list(v) if isinstance(v, tuple) else v for k, v in base.items()}

    ev = doc["evaluation"]
    out["evaluation"] = {"threshold": float(ev["threshold"]), "k": ev.get("k", 10),
                         "folds": ev.get("folds"), "split_seed": ev.get("split_seed", 0)}
    if not 0 < out["evaluation"]["threshold"] < 1:
        raise ConfigError("evaluation.threshold must lie in (0, 1)")
    if out["evaluation"]["k"] < 3:
        raise ConfigError("evaluation.k must be at least 3")

    if env.get(SEED_ENV):
        try:
            out["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    try:
        LossConfig(out["loss"]["lam"], out["loss"]["weight_positive"], out["loss"]["weight_negative"])
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from exc
    return out


def config_hash(resolved: dict) -> str:
    """sha256 over the canonical JSON of the recipe (the output directory excluded)."""
    body = {k: v for k, v in resolved.items() if k != "output_dir"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path, env=None) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return resolve(doc, env)


def write_resolved(resolved: dict, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.json")
    doc = dict(resolved, config_hash=config_hash(resolved))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def with_edge_spec(resolved: dict, spec: NetworkSpec) -> dict:
    """Copy of ``resolved`` differing only in the edge-network entry."""
    out = copy.deepcopy(resolved)
    out["networks"]["edge"] = spec.to_dict()
    return out


def with_method(resolved: dict, method: str) -> dict:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    out = copy.deepcopy(resolved)
    out["method"] = method
    return out


def train_config(resolved: dict) -> TrainConfig:
    n = resolved["networks"]
    tr = resolved["training"]
    return TrainConfig(
        method=resolved["method"],
        seg_spec=NetworkSpec(**n["segmentation"]),
        edge_spec=NetworkSpec(**n["edge"]),
        att_spec=NetworkSpec(**n["attention"]),
        loss=LossConfig(**resolved["loss"]),
        lr=resolved["optimizer"]["lr"],
        betas=tuple(resolved["optimizer"]["betas"]),
        adam_eps=resolved["optimizer"]["eps"],
        lr_factor=resolved["scheduler"]["factor"],
        lr_patience=resolved["scheduler"]["patience"],
        epochs=tr["epochs"], batch_size=tr["batch_size"], patch_size=tr["patch_size"],
        threshold=resolved["evaluation"]["threshold"],
        seed=resolved["seed"],
        augmentation=AugmentationConfig.from_dict(resolved["augmentation"]),
        config_hash=config_hash(resolved),
    )
