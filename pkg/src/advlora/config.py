"""Strict JSON run configuration with dotted-path overrides.

Every key the program understands appears in :data:`DEFAULTS`; anything
else is rejected. The resolved configuration (defaults filled in) is itself
a valid input that reproduces the run.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS = {
    "model": {
        "hidden": [64],
        "embed_dim": 32,
        "rank": 2,
        "scale": 1.0,
        "dropout": 0.25,
        "gamma": 0.01,
        "sigma": 0.02,
        "w0_gain": 0.5,
        "qv": False,
        "placement": {"which_layers": "all", "which_matrices": "all"},
        # "random" unit rows, or "prototype": backbone embeddings of class means.
        "head": "prototype",
        "head_noise": 0.3,
        "seed": 0,
    },
    "data": {
        "source": "blobs",
        "K": 10,
        "n": 32,
        "per_class": 200,
        "spread": 0.2,
        "seed": 0,
        "train_path": None,
        "test_path": None,
        "shots": 4,
        "shot_seed": 0,
    },
    "train": {
        "lr": 2e-4,
        "lr_schedule": "cosine",
        "lr_floor": 0.0,
        "tau": 2,
        "total_iterations": None,
        "literal_iterations": False,
        "batch_size": 32,
        "seed": 0,
        "delta_mode": "persistent",
        "eps": 1 / 255,
        "norm": "linf",
        "clip_ca": None,
        "clip_cb": None,
        "adversarial": True,
        "inner": {"base": 0.05, "fixed": 0.05, "switch_iteration": 300, "floor": 1e-8, "adaptive": True},
    },
    "attack": {
        "kind": "pgd",
        "norm": "linf",
        "eps": 1 / 255,
        "alpha": 1 / 255,
        "steps": 100,
        "random_start": False,
        "per_sample": True,
        "seed": 0,
    },
    # protocol: "config" uses the attack section, "main"/"appendix"/"fgsm" are presets, "none" skips attacks.
    "eval": {"protocol": "config"},
    "theory": {
        "game": {
            "d": 4,
            "k": 4,
            "n": 3,
            "mu": 1.0,
            "lam": 0.5,
            "nonconvex_amp": 1.0,
            "coupling_scale": 1.0,
            "radius": 1.0,
            "norm": "l2",
            "seed": 0,
        },
        "bench": {
            "lipschitz_pairs": 1000,
            "danskin_samples": 50,
            "smoothness_pairs": 1000,
            "c_b": 1.5,
            "contraction_iterations": 1000,
            "contraction_eta_scale": 1.0,
            "rate_iterations": 10000,
            "rate_eta_w": 0.002,
            "rate_slope_max": -0.8,
            "rate_metric": "grad_ab_sq",
            "plateau_eta_w": 0.02,
            "plateau_noise": 0.5,
            "plateau_iterations": 3000,
            "plateau_seeds": 5,
            "plateau_batches": [16, 64],
            "stationarity_eps": 1e-3,
            "seed": 0,
        },
    },
    "sweep": {"axes": {}, "base_seed": 0},
    "output": {"dir": "out", "name": "run", "formats": ["json", "csv"]},
}

# Leaves whose value is a free-form mapping rather than a fixed schema.
OPEN_MAPPINGS = {("sweep", "axes")}


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        raise ConfigurationError(f"'{'.'.join(path) or '<root>'}' must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = (*path, key)
        dotted = ".".join(here)
        if key not in defaults:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        default = defaults[key]
        if here in OPEN_MAPPINGS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{dotted}' must be an object")
            out[key] = copy.deepcopy(value)
        elif isinstance(default, dict):
            out[key] = _merge(default, value, here)
        else:
            out[key] = _check_type(default, value, dotted)
    return out


def _check_type(default, value, dotted):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{dotted}' must be true or false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"'{dotted}' must be a number, got {value!r}")
        if isinstance(default, int) and not isinstance(value, int) and not float(value).is_integer():
            raise ConfigurationError(f"'{dotted}' must be an integer, got {value!r}")
        return int(value) if isinstance(default, int) else float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"'{dotted}' must be a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigurationError(f"'{dotted}' must be a list, got {value!r}")
    return value


def resolve(given: dict | None = None) -> dict:
    return _merge(DEFAULTS, given or {}, ())


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> dict:
    """Set ``a.b.c = value`` on a resolved config, re-validating the result."""
    if not _known(dotted):
        raise ConfigurationError(f"unknown config key '{dotted}'")
    patch = value
    for key in reversed(dotted.split(".")):
        patch = {key: patch}
    return _merge(DEFAULTS, _deep_update(copy.deepcopy(cfg), patch), ())


def _known(dotted):
    node = DEFAULTS
    keys = dotted.split(".")
    for i, key in enumerate(keys):
        if tuple(keys[:i]) in OPEN_MAPPINGS:
            return True
        if not isinstance(node, dict) or key not in node:
            return False
        node = node[key]
    return True


def _deep_update(base, patch):
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict) and (key != "axes"):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load(path, overrides=()) -> dict:
    path = Path(path)
    try:
        given = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    cfg = resolve(given)
    for dotted, value in overrides:
        cfg = apply_override(cfg, dotted, value)
    return cfg


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2) + "\n"
