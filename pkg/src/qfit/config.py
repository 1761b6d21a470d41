"""Layered run configuration for the command line.

A configuration is a nested dict of plain JSON types. Resolution order:
package defaults, then an optional JSON file, then ``key=value``
overrides with dotted paths. Unknown keys are rejected at every layer so
typos fail fast, and the resolved configuration hashes to a stable hex
digest that tools stamp into their outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .errors import ConfigError
from .network import NetworkConfig, linear_activations, relaxometry_activations
from .signal_models import EchoProtocol, FispSchedule, default_schedule
from .training import TrainConfig

_TRAINING = {
    "lr": 1e-3,
    "iterations": 2000,
    "seed": 0,
    "early_stop_patience": 200,
    "early_stop_min_delta": 1e-6,
}

DEFAULTS: dict = {
    "relaxometry": {
        "protocol": {"te_first_ms": 6.0, "te_step_ms": 6.0, "n_echoes": 10},
        "t2_bounds_ms": [1.0, 3000.0],
        "network": {"base_width": 64, "n_residual_blocks": 9, "kernel_size": 3},
        "training": dict(_TRAINING),
    },
    "mrf": {
        "schedule": {"n_tr": 600, "tr_ms": 12.0, "te_ms": 2.0,
                     "inversion": True, "inv_delay_ms": 0.0},
        "dictionary": {"t1_grid_ms": [100.0, 3000.0, 20.0],
                       "t2_grid_ms": [10.0, 300.0, 2.0]},
        "subspace": {"energy_target": 0.95},
        "input_mode": "projected",
        "network": {"base_width": 64, "n_residual_blocks": 9, "kernel_size": 3},
        "training": dict(_TRAINING),
    },
    "phantom": {"shape": [64, 64], "variation": 0.05, "seed": 0,
                "variant": "default"},
    "noise": {"variance": 1e-3, "seed": 0},
    "undersampling": {"acceleration": 6, "seed": 0, "center_lines": 8},
    "fit": {"method": "varpro"},
    "experiments": {
        "noise": {
            "shape": [64, 64], "noise_variance": 1e-3, "seeds": [0, 1, 2],
            "te_first_ms": 6.0, "te_step_ms": 6.0, "n_echoes": 10,
            "phantom_variation": 0.05, "phantom_seed": 0,
            "base_width": 32, "n_residual_blocks": 6,
            "iterations": 1000, "lr": 1e-3,
        },
        "mrf": {
            "shape": [64, 64], "acceleration": 6, "noise_variance": 1e-4,
            "seeds": [0, 1], "n_tr": 600, "energy_target": 0.95,
            "t1_grid_ms": [100.0, 3000.0, 20.0],
            "t2_grid_ms": [10.0, 300.0, 2.0],
            "phantom_variation": 0.03, "phantom_seed": 0,
            "base_width": 32, "n_residual_blocks": 6,
            "iterations": 1000, "lr": 1e-3,
        },
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a table of settings")
            _merge(base[key], value, here)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{here} does not take nested settings")
            base[key] = value


def set_by_path(config: dict, dotted: str, value) -> None:
    """Set one leaf, e.g. ``set_by_path(cfg, "mrf.training.lr", 5e-4)``."""
    parts = dotted.split(".")
    node = config
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(
                f"unknown configuration key: {'.'.join(parts[:i + 1])}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown configuration key: {dotted}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"{dotted} is a table, not a setting")
    node[leaf] = value


def parse_override(text: str) -> tuple[str, object]:
    """Parse one ``dotted.key=value``; the value is JSON when possible,
    else a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides: tuple[str, ...] = ()) -> dict:
    """Defaults, then the optional JSON file, then dotted overrides."""
    config = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a JSON object at top level")
        _merge(config, loaded)
    for text in overrides:
        key, value = parse_override(text)
        set_by_path(config, key, value)
    return config


def config_hash(config: dict) -> str:
    """Stable digest of a resolved configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# builders from a resolved configuration
# ---------------------------------------------------------------------------

def protocol_from_config(config: dict) -> EchoProtocol:
    p = config["relaxometry"]["protocol"]
    return EchoProtocol(te_first_ms=p["te_first_ms"], te_step_ms=p["te_step_ms"],
                        n_echoes=int(p["n_echoes"]))


def schedule_from_config(config: dict) -> FispSchedule:
    s = config["mrf"]["schedule"]
    base = default_schedule(int(s["n_tr"]))
    return FispSchedule(flip_deg=base.flip_deg, tr_ms=float(s["tr_ms"]),
                        te_ms=float(s["te_ms"]), inversion=bool(s["inversion"]),
                        inv_delay_ms=float(s["inv_delay_ms"]))


def grids_from_config(config: dict) -> tuple[np.ndarray, np.ndarray]:
    d = config["mrf"]["dictionary"]
    lo1, hi1, st1 = (float(v) for v in d["t1_grid_ms"])
    lo2, hi2, st2 = (float(v) for v in d["t2_grid_ms"])
    return (np.arange(lo1, hi1 + st1 / 2, st1),
            np.arange(lo2, hi2 + st2 / 2, st2))


def train_config_from_config(config: dict, section: str) -> TrainConfig:
    t = config[section]["training"]
    return TrainConfig(lr=float(t["lr"]), iterations=int(t["iterations"]),
                       seed=int(t["seed"]),
                       early_stop_patience=int(t["early_stop_patience"]),
                       early_stop_min_delta=float(t["early_stop_min_delta"]))


def relax_network_from_config(config: dict) -> NetworkConfig:
    sec = config["relaxometry"]
    n = sec["network"]
    lo, hi = (float(v) for v in sec["t2_bounds_ms"])
    return NetworkConfig(in_channels=int(sec["protocol"]["n_echoes"]),
                         out_channels=2, base_width=int(n["base_width"]),
                         n_residual_blocks=int(n["n_residual_blocks"]),
                         kernel_size=int(n["kernel_size"]),
                         out_activations=relaxometry_activations(lo, hi))


def mrf_network_from_config(config: dict, rank: int, n_frames: int
                            ) -> NetworkConfig:
    sec = config["mrf"]
    n = sec["network"]
    in_ch = 2 * rank if sec["input_mode"] == "projected" else 2 * n_frames
    return NetworkConfig(in_channels=in_ch, out_channels=2 * rank,
                         base_width=int(n["base_width"]),
                         n_residual_blocks=int(n["n_residual_blocks"]),
                         kernel_size=int(n["kernel_size"]),
                         out_activations=linear_activations(2 * rank))
