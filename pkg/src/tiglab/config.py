"""Experiment configuration: YAML document, JSON-schema validation, defaults, dataset resolution."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from .graph import TemporalGraph, load_graph
from .synthetic import GENERATORS, SyntheticSpec, generate_synthetic

DATA_DIR_ENV = "TIGLAB_DATA_DIR"

DEFAULTS = {
    "dataset": {"path": "wikipedia.csv"},
    "split": [0.5, 0.2, 0.15, 0.15],
    "inductive_fraction": 0.1,
    "settings": ["transductive", "inductive"],
    "model": {"d_mem": 172, "d_t": 172, "d_embed": 172, "n_heads": 2, "dropout": 0.1, "k": 10},
    "pretrain": {"batch_size": 200, "lr": 1e-4, "epochs": 50, "patience": 5},
    "paradigm": {"mode": "prompt", "task": "link_prediction", "variant": "projection", "nc_strategy": None,
                 "prompt_fraction": None, "prompt_dim": 172, "d_pos": None, "batch_size": 100, "lr": 1e-4,
                 "epochs": 50, "patience": 5},
    "seeds": [0, 1, 2],
    "output_dir": "runs/default",
}

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_fraction = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "oneOf": [
                {"required": ["path"], "not": {"required": ["synthetic"]}},
                {"required": ["synthetic"], "not": {"required": ["path"]}},
            ],
            "properties": {
                "path": {"type": "string", "minLength": 1},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["generator"],
                    "properties": {
                        "generator": {"enum": list(GENERATORS)},
                        "n_users": _pos_int, "n_items": _pos_int, "n_events": _pos_int,
                        "seed": {"type": ["integer", "null"]},
                        "drift_point": _fraction, "repeat_prob": {"type": "number", "minimum": 0, "maximum": 1},
                        "d_e": _pos_int, "d_n": _pos_int, "mean_gap": _pos_num,
                        "label_signal": {"type": "number"}, "item_turnover": {"type": "number", "minimum": 0,
                                                                               "exclusiveMaximum": 1},
                    },
                },
            },
            "additionalProperties": False,
        },
        "split": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 4, "maxItems": 4},
        "inductive_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "settings": {"type": "array", "items": {"enum": ["transductive", "inductive", "all"]}, "minItems": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"d_mem": _pos_int, "d_t": _pos_int, "d_embed": _pos_int, "n_heads": _pos_int,
                           "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "k": _pos_int},
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"batch_size": _pos_int, "lr": _pos_num, "epochs": _pos_int, "patience": _pos_int},
        },
        "paradigm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["prompt", "prompt_finetune"]},
                "task": {"enum": ["link_prediction", "node_classification"]},
                "variant": {"enum": ["vanilla", "transformer", "projection", "static_output", "static_input",
                                     "none", None]},
                "nc_strategy": {"enum": ["reuse_frozen", "init_and_tune", "reinit", None]},
                "prompt_fraction": {"oneOf": [_fraction, {"type": "null"}]},
                "prompt_dim": _pos_int,
                "d_pos": {"oneOf": [_pos_int, {"type": "null"}]},
                "batch_size": _pos_int, "lr": _pos_num, "epochs": _pos_int, "patience": _pos_int,
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": "string", "minLength": 1},
    },
}


class ConfigError(ValueError):
    """Schema or semantic violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "dataset":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(doc: dict) -> dict:
    """Validate a raw document against the schema, then fill defaults and check cross-field rules."""
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a mapping")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.path)
        raise ConfigError(path, err.message)
    full = _merge(DEFAULTS, doc)
    if abs(sum(full["split"]) - 1.0) > 1e-9:
        raise ConfigError("$.split", f"fractions sum to {sum(full['split'])}, expected 1")
    par = full["paradigm"]
    if par["nc_strategy"] is not None and par["task"] != "node_classification":
        raise ConfigError("$.paradigm.nc_strategy", "only valid with task node_classification")
    return full


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return cls(validate(doc))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("$", f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError("$", f"not valid YAML: {exc}") from exc
        return cls.from_dict(doc or {})

    def replace(self, **changes) -> "ExperimentConfig":
        """New config with dotted-key overrides, e.g. ``replace(**{"paradigm.prompt_dim": 64})``."""
        doc = copy.deepcopy(self.data)
        for key, val in changes.items():
            *parents, leaf = key.split(".")
            node = doc
            for p in parents:
                node = node[p]
            node[leaf] = val
        return ExperimentConfig.from_dict(doc)

    def __getitem__(self, key):
        return self.data[key]

    def load_graph(self, seed: int) -> TemporalGraph:
        ds = self.data["dataset"]
        if "synthetic" in ds:
            syn = dict(ds["synthetic"])
            if syn.get("seed") is None:
                syn["seed"] = seed
            return generate_synthetic(SyntheticSpec(**syn))
        return load_graph(resolve_data_path(ds["path"]))


def resolve_data_path(path: str) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) / p if root else p
