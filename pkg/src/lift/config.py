"""Engine configuration: one JSON document covering grid, features,
network shape, decoding and calibration. Unknown keys are rejected so
typos fail fast instead of silently running with defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import FormatError
from .network import DEFAULT_CLASS_NAMES, NetworkConfig
from .pillarizer import FEATURE_NAMES, GridConfig


@dataclass(frozen=True)
class FeatureFlags:
    normalize_intensity: bool = False
    include_pillar_offsets: bool = True


@dataclass(frozen=True)
class EngineConfig:
    grid: GridConfig = GridConfig()
    features: FeatureFlags = FeatureFlags()
    network: NetworkConfig = NetworkConfig()
    score_threshold: float = 0.1
    top_k: int = 500
    calibration_mode: str = "minmax"
    calibration_percentile: float = 99.9

    @property
    def feature_length(self) -> int:
        return len(FEATURE_NAMES) if self.features.include_pillar_offsets \
            else len(FEATURE_NAMES) - 2


def _bool(v):
    if not isinstance(v, bool):
        raise FormatError(f"expected true/false, got {v!r}")
    return v


def _int(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise FormatError(f"expected an integer, got {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"expected a number, got {v!r}")
    return float(v)


def _int_list(v):
    if not isinstance(v, (list, tuple)):
        raise FormatError(f"expected a list, got {v!r}")
    return tuple(_int(x) for x in v)


def _str_list(v):
    if not isinstance(v, (list, tuple)) or not all(isinstance(x, str) for x in v):
        raise FormatError(f"expected a list of strings, got {v!r}")
    return tuple(v)


def _take(section: dict, name: str, allowed: dict) -> dict:
    """Pop known keys with type validation; reject anything else."""
    if not isinstance(section, dict):
        raise FormatError(f"config section {name!r} must be an object")
    result = {}
    for key, value in section.items():
        if key not in allowed:
            raise FormatError(f"unknown config key {name}.{key}")
        try:
            result[key] = allowed[key](value)
        except FormatError as e:
            raise FormatError(f"config key {name}.{key}: {e}") from None
    return result


def config_from_dict(doc: dict) -> EngineConfig:
    if not isinstance(doc, dict):
        raise FormatError("config root must be a JSON object")
    unknown = set(doc) - {"grid", "features", "network", "decode", "calibration"}
    if unknown:
        raise FormatError(f"unknown config section(s): {sorted(unknown)}")

    grid_kwargs = _take(doc.get("grid", {}), "grid", {
        "x_min": _float, "x_max": _float, "y_min": _float, "y_max": _float,
        "z_min": _float, "z_max": _float,
        "pillar_size_x": _float, "pillar_size_y": _float,
        "max_points_per_pillar": _int,
    })
    feat_kwargs = _take(doc.get("features", {}), "features", {
        "normalize_intensity": _bool, "include_pillar_offsets": _bool,
    })
    net_kwargs = _take(doc.get("network", {}), "network", {
        "encoder_out": _int, "stage_channels": _int_list, "stage_depths": _int_list,
        "align_channels": _int, "num_classes": _int, "class_names": _str_list,
    })
    if "class_names" not in net_kwargs:
        n = net_kwargs.get("num_classes", NetworkConfig().num_classes)
        net_kwargs["class_names"] = DEFAULT_CLASS_NAMES if n == len(DEFAULT_CLASS_NAMES) \
            else tuple(f"class_{k}" for k in range(n))
    decode_kwargs = _take(doc.get("decode", {}), "decode", {
        "score_threshold": _float, "top_k": _int,
    })
    calib_kwargs = _take(doc.get("calibration", {}), "calibration", {
        "mode": str, "percentile": _float,
    })
    if calib_kwargs.get("mode", "minmax") not in ("minmax", "percentile"):
        raise FormatError(f"unknown calibration mode {calib_kwargs['mode']!r}")

    return EngineConfig(
        grid=GridConfig(**grid_kwargs),
        features=FeatureFlags(**feat_kwargs),
        network=NetworkConfig(**net_kwargs),
        score_threshold=decode_kwargs.get("score_threshold", 0.1),
        top_k=decode_kwargs.get("top_k", 500),
        calibration_mode=calib_kwargs.get("mode", "minmax"),
        calibration_percentile=calib_kwargs.get("percentile", 99.9),
    )


def load_config(path) -> EngineConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: EngineConfig) -> dict:
    return {
        "grid": {
            "x_min": cfg.grid.x_min, "x_max": cfg.grid.x_max,
            "y_min": cfg.grid.y_min, "y_max": cfg.grid.y_max,
            "z_min": cfg.grid.z_min, "z_max": cfg.grid.z_max,
            "pillar_size_x": cfg.grid.pillar_size_x,
            "pillar_size_y": cfg.grid.pillar_size_y,
            "max_points_per_pillar": cfg.grid.max_points_per_pillar,
        },
        "features": {
            "normalize_intensity": cfg.features.normalize_intensity,
            "include_pillar_offsets": cfg.features.include_pillar_offsets,
        },
        "network": {
            "encoder_out": cfg.network.encoder_out,
            "stage_channels": list(cfg.network.stage_channels),
            "stage_depths": list(cfg.network.stage_depths),
            "align_channels": cfg.network.align_channels,
            "num_classes": cfg.network.num_classes,
            "class_names": list(cfg.network.class_names),
        },
        "decode": {"score_threshold": cfg.score_threshold, "top_k": cfg.top_k},
        "calibration": {"mode": cfg.calibration_mode,
                        "percentile": cfg.calibration_percentile},
    }
