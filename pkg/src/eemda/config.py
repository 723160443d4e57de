"""Run configuration: a flat dotted-key YAML file, overridable from the command line.

Every key has a materialized value after :func:`resolve`, so the echoed file and its
digest fully describe a run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import BackboneSpec, TrainablePolicy
from .trainer import TARGETS, DomainAdaptationPlan, TrainPhaseConfig

# key -> (type, default). ``None`` defaults are filled in by resolve().
SCHEMA: dict[str, tuple[type, Any]] = {
    "data.eem_dir": (str, ""),
    "data.targets": (str, ""),
    "target": (str, "k232"),
    "backbone": (str, "test"),
    "backbone.weights_path": (str, ""),
    "seed": (int, 0),
    "output": (str, "runs"),
    "phase1.learning_rate": (float, None),
    "phase1.batch_size": (int, None),
    "phase1.epochs": (int, None),
    "phase2.learning_rate": (float, None),
    "phase2.batch_size": (int, None),
    "phase2.epochs": (int, None),
    "phase2.frozen_prefix_layers": (int, None),
    "preprocess.rayleigh_mode": (str, "keep"),
    "preprocess.rayleigh_half_width": (float, 10.0),
    "iea.fill": (str, "0"),
    "iea.tile_size": (int, 5),
    "iea.stride": (int, 5),
    "iea.sigma": (float, 3.0),
    "figures.regulatory_limit": (float, None),
    "figures.sigma3_line": (float, None),
    "figures.render": (bool, False),
}
# Display-only keys may stay unset.
OPTIONAL = {"figures.regulatory_limit", "figures.sigma3_line"}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind, _ = SCHEMA[key]
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")
                         and kind is not str):
        return None
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return text in ("true", "1", "yes")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    out = {}
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: nested section {k!r}; use flat dotted keys like {k}.name")
        out[str(k)] = _coerce(str(k), v)
    return out


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not key=value")
    key = key.strip()
    return key, _coerce(key, value.strip())


def resolve(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> dict:
    """Merge defaults < file < overrides and materialize plan-dependent defaults."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            cfg[k] = _coerce(k, v)
    if cfg["target"] not in TARGETS:
        raise ConfigError(f"target must be one of {TARGETS}, got {cfg['target']!r}")
    if cfg["backbone"] not in ("pretrained", "test"):
        raise ConfigError(f"backbone must be pretrained or test, got {cfg['backbone']!r}")
    if cfg["preprocess.rayleigh_mode"] not in ("keep", "zero", "interpolate"):
        raise ConfigError(f"unknown rayleigh mode {cfg['preprocess.rayleigh_mode']!r}")
    if cfg["iea.fill"] != "mean":
        try:
            fill = int(cfg["iea.fill"])
        except ValueError:
            raise ConfigError(f"iea.fill must be an integer 0-255 or 'mean', got {cfg['iea.fill']!r}") from None
        if not 0 <= fill <= 255:
            raise ConfigError("iea.fill must be in 0-255")
        cfg["iea.fill"] = str(fill)
    spec = backbone_spec(cfg)
    default = DomainAdaptationPlan.default_for(cfg["target"], spec)
    for phase, pc in (("phase1", default.phase1), ("phase2", default.phase2)):
        for name in ("learning_rate", "batch_size", "epochs"):
            if cfg[f"{phase}.{name}"] is None:
                cfg[f"{phase}.{name}"] = getattr(pc, name)
    if cfg["phase2.frozen_prefix_layers"] is None:
        cfg["phase2.frozen_prefix_layers"] = default.phase2_policy.frozen_prefix_layers
    missing = [k for k, v in cfg.items() if v is None and k not in OPTIONAL]
    if missing:
        raise ConfigError(f"unresolved keys: {', '.join(missing)}")
    plan_from(cfg)  # validates ranges
    return cfg


def backbone_spec(cfg: dict) -> BackboneSpec:
    return BackboneSpec.from_name(cfg["backbone"], cfg["backbone.weights_path"] or None)


def plan_from(cfg: dict) -> DomainAdaptationPlan:
    try:
        return DomainAdaptationPlan(
            cfg["target"],
            TrainPhaseConfig(cfg["phase1.learning_rate"], cfg["phase1.batch_size"], cfg["phase1.epochs"]),
            TrainPhaseConfig(cfg["phase2.learning_rate"], cfg["phase2.batch_size"], cfg["phase2.epochs"]),
            TrainablePolicy.partial_unfreeze(cfg["phase2.frozen_prefix_layers"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def iea_fill(cfg: dict):
    return "mean" if cfg["iea.fill"] == "mean" else int(cfg["iea.fill"])


# Keys that only place or display outputs; they do not change any computed number.
NON_SEMANTIC = {"output", "figures.render"}


def digest(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def run_id(cfg: dict) -> str:
    return digest(cfg)[:12]


def dump(cfg: dict) -> str:
    lines = [f"# config digest {digest(cfg)}"]
    for k in SCHEMA:
        v = cfg[k]
        lines.append(f"{k}: {'null' if v is None else json.dumps(v)}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump(cfg), encoding="utf-8")
    return path
