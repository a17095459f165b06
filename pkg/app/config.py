import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from . import TopoTrackError
from .models import RunConfig

load_dotenv()

CFG = {
    "JOBS": int(os.getenv("TOPOTRACK_JOBS", "1")),
    "LOG_LEVEL": os.getenv("TOPOTRACK_LOG_LEVEL", "INFO").strip().upper(),
    "OUTPUT_DIR": os.getenv("TOPOTRACK_OUTPUT_DIR", os.path.join("runs", "latest")).strip(),
}

# Parameter sets of the two cloud regimes. `min_zone_px` is only used with --fixed-zone.
PRESETS: Dict[str, Dict[str, Any]] = {
    "marine": {
        "detection_threshold": 2.0,
        "min_area_px": 10,
        "alpha": 0.4,
        "speed_limit_m_per_s": 30.0,
        "interval_minutes": 15.0,
        "connectivity": 8,
        "min_zone_px": 30,
    },
    "land-morning": {
        "detection_threshold": 9.0,
        "min_area_px": 0,
        "alpha": 0.2,
        "speed_limit_m_per_s": 40.0,
        "interval_minutes": 5.0,
        "connectivity": 8,
        "min_zone_px": 5,
    },
    "land-midday": {
        "detection_threshold": 10.0,
        "min_area_px": 0,
        "alpha": 0.2,
        "speed_limit_m_per_s": 40.0,
        "interval_minutes": 5.0,
        "connectivity": 8,
        "min_zone_px": 5,
    },
}


class ConfigError(TopoTrackError, ValueError):
    pass


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return data


_DISTANCE_KEYS = ("max_match_km", "speed_limit_m_per_s")


def _apply_layer(merged: Dict[str, Any], layer: Dict[str, Any]) -> None:
    # a layer naming one form of the distance limit replaces the other form from below
    for key, other in (_DISTANCE_KEYS, _DISTANCE_KEYS[::-1]):
        if layer.get(key) is not None and layer.get(other) is None:
            merged.pop(other, None)
    merged.update(layer)


def resolve_config(
    config_path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    fixed_zone: bool = False,
) -> RunConfig:
    """
    Merge defaults < preset < config file < flag overrides into a validated RunConfig.
    A preset's fixed zone threshold is dropped unless `fixed_zone` is set.
    """
    merged: Dict[str, Any] = {"output_dir": CFG["OUTPUT_DIR"]}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
        if not fixed_zone:
            merged.pop("min_zone_px", None)
    _apply_layer(merged, load_config_file(config_path))
    _apply_layer(merged, {k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration:\n{e}") from e


def config_echo(cfg: RunConfig) -> Dict[str, Any]:
    """JSON-ready dump of the resolved configuration (paths as strings)."""
    data = cfg.model_dump(mode="json")
    data["match_limit_km"] = cfg.match_limit_km
    return data


def require_input(cfg: RunConfig) -> None:
    if not Path(cfg.input_dir).is_dir():
        raise ConfigError(f"input directory does not exist: {cfg.input_dir}")
