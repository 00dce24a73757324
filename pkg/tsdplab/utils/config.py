"""
Experiment and sweep configuration files.

Both file types are JSON documents validated against a published JSON Schema
(draft 7) before any work starts. Validation failures raise TSDPConfigError
listing every violation with its JSON path.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- validate_document(data, schema, what): Raise TSDPConfigError on schema violations
- load_experiment_config(path): Read and validate an ExperimentConfig
- load_sweep_definition(path): Read and validate a SweepDefinition
- cache_dir(): Cell cache directory (TSDPLAB_CACHE_DIR override)

DATA CLASSES:
-------------
- SchemeSpec: One scheme and its configuration grid
- ExperimentConfig: Dataset, model, training, scheme and attack settings
- SweepDefinition: scheme, grid, metric, delta, seeds
"""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from jsonschema import Draft7Validator

from tsdplab.utils.logging import TSDPConfigError, TSDPFileError, logger, tsdplab_home

SCHEME_NAMES = [
    "Deep", "Shallow", "Magnitude", "Intermediate", "NonLinearObf",
    "Ennclave", "TeeSlice", "NoShield", "BlackBox",
]
METRIC_NAMES = [
    "ms_accuracy", "fidelity", "asr", "conf_mia_acc", "grad_mia_acc",
    "generalization_gap", "confidence_gap",
]
ASSUMPTION_NAMES = ["HybridKnown", "BackboneOnly", "VictimKnown"]

_GRID = {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 1}

EXPERIMENT_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "tsdplab experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_classes": {"type": "integer", "minimum": 2},
                "side": {"type": "integer", "minimum": 4},
                "channels": {"type": "integer", "minimum": 1},
                "public_per_class": {"type": "integer", "minimum": 1},
                "private_per_class": {"type": "integer", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 1},
                "pool_after": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "kernel": {"type": "integer", "minimum": 1},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "public_epochs": {"type": "integer", "minimum": 0},
                "victim_epochs": {"type": "integer", "minimum": 0},
                "steal_epochs": {"type": "integer", "minimum": 0},
                "shadow_epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "teeslice": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "alpha_setup": {"type": "number", "exclusiveMinimum": 0,
                                "exclusiveMaximum": 1},
                "n": {"type": "integer", "minimum": 1},
                "rounds": {"type": "integer", "minimum": 0},
                "lambda": {"type": "number", "minimum": 0},
            },
        },
        "schemes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"enum": SCHEME_NAMES},
                    "grid": _GRID,
                },
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "budget": {"type": "integer", "minimum": 0},
                "assumption": {"enum": ASSUMPTION_NAMES},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metric": {"enum": METRIC_NAMES},
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "one_sided": {"type": "boolean"},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string", "minLength": 1},
    },
    "required": ["output_dir"],
}

SWEEP_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "tsdplab sweep",
    "type": "object",
    "additionalProperties": False,
    "required": ["scheme", "metric", "delta"],
    "properties": {
        "scheme": {"enum": SCHEME_NAMES},
        "grid": _GRID,
        "metric": {"enum": METRIC_NAMES},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "one_sided": {"type": "boolean"},
        "assumption": {"enum": ASSUMPTION_NAMES},
    },
}


@dataclass
class SchemeSpec:
    name: str
    grid: Optional[List[Any]] = None


@dataclass
class ExperimentConfig:
    """Everything one `tsdplab run` needs; sections map onto LabConfig fields."""

    output_dir: str
    name: str = "experiment"
    dataset: Dict[str, Any] = field(default_factory=dict)
    model: Dict[str, Any] = field(default_factory=dict)
    training: Dict[str, Any] = field(default_factory=dict)
    teeslice: Dict[str, Any] = field(default_factory=dict)
    schemes: List[SchemeSpec] = field(default_factory=list)
    attack: Dict[str, Any] = field(default_factory=dict)
    sweep: Dict[str, Any] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    workers: int = 1

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        validate_document(data, EXPERIMENT_SCHEMA, "experiment config")
        body = dict(data)
        body["schemes"] = [SchemeSpec(**s) for s in data.get("schemes", [])]
        return cls(**body)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["schemes"] = [
            {k: v for k, v in s.items() if v is not None} for s in data["schemes"]
        ]
        return data


@dataclass
class SweepDefinition:
    scheme: str
    metric: str
    delta: float
    grid: Optional[List[Any]] = None
    seeds: List[int] = field(default_factory=lambda: [0])
    one_sided: bool = True
    assumption: str = "HybridKnown"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepDefinition":
        validate_document(data, SWEEP_SCHEMA, "sweep definition")
        return cls(**data)


def validate_document(data: Any, schema: Dict[str, Any], what: str) -> None:
    """
    Validate `data` against `schema`.

    Raises:
        TSDPConfigError: with one line per violation, ordered by JSON path
    """
    validator = Draft7Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{where}: {err.message}")
        raise TSDPConfigError(f"Invalid {what}:\n  " + "\n  ".join(lines))


def _read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.exists():
        raise TSDPFileError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise TSDPConfigError(f"{path} is not valid JSON: {e}") from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_read_json(path))
    logger.debug(f"Loaded experiment config {cfg.name} from {path}")
    return cfg


def load_sweep_definition(path: Union[str, Path]) -> SweepDefinition:
    return SweepDefinition.from_dict(_read_json(path))


def cache_dir() -> Path:
    override = os.environ.get("TSDPLAB_CACHE_DIR")
    return Path(override).expanduser() if override else tsdplab_home() / "cache"
