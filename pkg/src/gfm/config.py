"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .metrics import config_hash

DEFAULTS = {
    "seed": 0,
    "output_dir": "run",
    "synth": {"n_tiles": 16, "tile_size": 256, "timesteps": 3, "cloud_fraction_max": 0.15},
    "sampler": {"g1": 2, "g2": 2, "budget": 12},
    "filter": {"window": 64, "bad_fraction_threshold": 0.05, "timesteps_required": 3},
    "store": {"chunk_samples": 8},
    "model": {
        "patch": [1, 16, 16], "embed_dim": 64, "depth": 2, "num_heads": 4,
        "decoder_dim": 64, "decoder_depth": 1, "decoder_heads": 4,
        "mlp_ratio": 4.0, "mask_ratio": 0.75,
    },
    "train": {"steps": 60, "batch_size": 8, "lr": 5e-3, "warmup_fraction": 0.1, "weight_decay": 0.05},
    "finetune": {
        "regime": "pretrained", "epochs": 4, "batch_size": 4, "lr": 1e-3, "weight_decay": 0.05,
        "encoder_lr_scale": 1.0, "loss": "wce", "neck_channels": [64, 32, 16, 16],
        "test_fraction": 0.25, "ndvi_threshold": 0.35,
    },
    "eval": {"batch_size": 16},
    "sweep": {"fractions": [1.0, 0.5, 0.25, 0.1], "seeds": [0, 1], "epochs": 4},
}

_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}


def _section(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "seed": _NONNEG,
        "output_dir": {"type": "string", "minLength": 1},
        "synth": _section({"n_tiles": _INT, "tile_size": {"type": "integer", "minimum": 32},
                           "timesteps": _INT, "cloud_fraction_max": _UNIT}),
        "sampler": _section({"g1": _INT, "g2": _INT, "budget": _INT}),
        "filter": _section({"window": _INT, "bad_fraction_threshold": _UNIT, "timesteps_required": _INT}),
        "store": _section({"chunk_samples": _INT}),
        "model": _section({
            "patch": {"type": "array", "items": _INT, "minItems": 3, "maxItems": 3},
            "embed_dim": _INT, "depth": _INT, "num_heads": _INT, "decoder_dim": _INT,
            "decoder_depth": _INT, "decoder_heads": _INT, "mlp_ratio": _POS,
            "mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        }),
        "train": _section({"steps": _INT, "batch_size": _INT, "lr": _POS, "warmup_fraction": _UNIT,
                           "weight_decay": {"type": "number", "minimum": 0}}),
        "finetune": _section({
            "regime": {"enum": ["pretrained", "random", "frozen"]},
            "epochs": _INT, "batch_size": _INT, "lr": _POS,
            "weight_decay": {"type": "number", "minimum": 0}, "encoder_lr_scale": _POS,
            "loss": {"enum": ["wce", "dice"]},
            "neck_channels": {"type": "array", "items": _INT, "minItems": 4, "maxItems": 4},
            "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "ndvi_threshold": {"type": "number", "minimum": -1, "maximum": 1},
        }),
        "eval": _section({"batch_size": _INT}),
        "sweep": _section({
            "fractions": {"type": "array", "minItems": 1,
                          "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
            "seeds": {"type": "array", "minItems": 1, "items": _NONNEG},
            "epochs": _INT,
        }),
    },
}


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(doc: dict) -> None:
    """Raise ConfigError carrying the JSON pointer of the first schema violation."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _pointer(e.absolute_path))


def merge_defaults(doc: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, output_dir=None) -> dict:
    """Read, validate and complete a run config; CLI overrides win over the file."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        # schema-check what the user wrote, so pointers refer to their document
        validate({"seed": 0, **doc})
    cfg = merge_defaults(doc)
    if seed is not None:
        cfg["seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    validate(cfg)
    return cfg


def run_hash(cfg: dict) -> str:
    """Hash of everything that affects results; the output location does not."""
    return config_hash({k: v for k, v in cfg.items() if k != "output_dir"})
