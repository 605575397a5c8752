"""Run configuration: a JSON document validated against a schema.

Missing sections take the defaults below; command-line flags override the
seed, output directory and worker count.  Only the output root may come from
the environment (``UQLAB_OUT``).
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

import jsonschema

from .transformer import ConfigError

OUT_ENV = "UQLAB_OUT"

_int = {"type": "integer"}
_bool = {"type": "boolean"}
_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "ingest"]},
                "n_patients": {"type": "integer", "minimum": 8},
                "prevalence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "rate_factor": {"type": "number", "exclusiveMinimum": 0},
                "generator_spec": {"type": ["string", "object", "null"]},
                "ingest_path": {"type": ["string", "null"]},
            },
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["deterministic", "bayesian", "ensemble"]},
                "d_model": {"type": "integer", "minimum": 2},
                "heads": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "ff_width": {"type": ["integer", "null"], "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "max_len": {"type": "integer", "minimum": 2},
                "dtype": {"enum": ["float32", "float64"]},
                "radial_bias": _bool,
                "prior_sigma": {"type": "number", "exclusiveMinimum": 0},
                "radial_init_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "training": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "c_kl": {"type": ["number", "null"], "minimum": 0},
                "class_weighting": _bool,
                "kl_moment_samples": {"type": "integer", "minimum": 2},
            },
        },
        "search": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_models": {"type": "integer", "minimum": 1},
                "g": {"type": "integer", "minimum": 1},
                "d_model": _int_list, "heads": _int_list, "layers": _int_list,
            },
        },
        "calibration": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": _bool,
                "lambda_ce": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
                "n_interior": {"type": "integer", "minimum": 0},
                "eps": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
                "n_binnings": {"type": "integer", "minimum": 1},
                "metric_bins": {"type": "integer", "minimum": 1},
            },
        },
        "uncertainty": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 1},
                "quantile_step": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "max_quantile": {"type": "number", "minimum": 0, "maximum": 0.5},
                "remap_bins": {"type": "integer", "minimum": 1},
                "remap_binning": {"enum": ["equal_count", "equal_width"]},
                "report_quantile": {"type": "number", "minimum": 0, "maximum": 0.5},
            },
        },
        "zigzag": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
                "points_per_cluster": {"type": "integer", "minimum": 5},
                "removed": {"type": "array", "items": _int},
                "ensemble_size": {"type": "integer", "minimum": 1},
                "hidden": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": ["integer", "null"], "minimum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "bayesian": _bool,
                "grid_points": {"type": "integer", "minimum": 2},
            },
        },
    },
}

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "uqlab-out",
    "workers": 1,
    "data": {"source": "synthetic", "n_patients": 5000, "prevalence": 0.13, "rate_factor": 1.0,
             "generator_spec": None, "ingest_path": None},
    "model": {"kind": "bayesian", "d_model": 32, "heads": 2, "layers": 1, "ff_width": None,
              "dropout": 0.1, "max_len": 512, "dtype": "float32", "radial_bias": True,
              "prior_sigma": 1.0, "radial_init_std": 0.05},
    "training": {"lr": 1e-3, "batch_size": 32, "max_epochs": 100, "patience": 10, "c_kl": None,
                 "class_weighting": False, "kl_moment_samples": 100_000},
    "search": {"n_models": 12, "g": 5, "d_model": [32, 64, 128], "heads": [2, 4], "layers": [1, 2, 3]},
    "calibration": {"enabled": False, "lambda_ce": 1.0, "lr": 1e-2, "steps": 500, "n_interior": 9,
                    "eps": 0.01, "n_binnings": 16, "metric_bins": 10},
    "uncertainty": {"n_samples": 30, "quantile_step": 0.01, "max_quantile": 0.5, "remap_bins": 20,
                    "remap_binning": "equal_count", "report_quantile": 0.5},
    "zigzag": {"n": 3, "noise": 0.1, "points_per_cluster": 20, "removed": [-1, 1], "ensemble_size": 10,
               "hidden": 64, "epochs": 500, "lr": 1e-2, "batch_size": 32, "weight_decay": 0.0,
               "bayesian": False, "grid_points": 401},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def resolve(raw: dict | None = None, *, seed: int | None = None, out: str | None = None,
            workers: int | None = None) -> dict:
    """Validated config with defaults filled in and CLI overrides applied."""
    raw = raw or {}
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if workers is not None:
        cfg["workers"] = int(workers)
    if out is not None:
        cfg["output_dir"] = str(out)
    elif "output_dir" not in raw and os.environ.get(OUT_ENV):
        cfg["output_dir"] = os.environ[OUT_ENV]
    validate(cfg)
    if cfg["model"]["d_model"] % cfg["model"]["heads"]:
        raise ConfigError("model.d_model must be divisible by model.heads")
    if cfg["data"]["source"] == "ingest" and not cfg["data"]["ingest_path"]:
        raise ConfigError("data.ingest_path is required when data.source is 'ingest'")
    return cfg


def load(path: Path | None, **overrides) -> dict:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    return resolve(raw, **overrides)


def quantile_grid(cfg: dict) -> list[float]:
    u = cfg["uncertainty"]
    n = int(round(u["max_quantile"] / u["quantile_step"]))
    return [round(i * u["quantile_step"], 10) for i in range(n + 1)]
