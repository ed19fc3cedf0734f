"""Run configuration: defaults, JSON config files and command-line overrides.

Precedence is command line > config file > defaults.  The resolved
configuration is a plain nested dict so it can be echoed into the run log
verbatim.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .errors import InputError
from .smoothing import SmoothingConfig
from .tracking import TrackerConfig
from .voxel_fit import FitConfig

__all__ = ["DEFAULTS", "load_config", "merge", "resolve", "fit_config", "smoothing_config",
           "tracker_config"]

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "simulate": {
        "phantom": "P3",
        "s0": 1860.0,
        "sigma": 57.0,
        "geometry": {},
    },
    "fit": {
        "grid_level": 2,
        "alpha_tilde": None,
        "i_max": 4,
        "fa_threshold": 0.15,
        "merge_angle_deg": 5.0,
        "support_rel": 1e-3,
        "grad_tol": 1e-6,
        "max_iter": 500,
        "sigma_bias_correction": True,
    },
    "smooth": {
        "h": None,
        "cv": "mcv",
        "h_grid": None,
        "weight_threshold": 0.05,
        "k_max": 4,
        "silhouette_floor": 0.5,
        "min_separation_deg": 30.0,
    },
    "track": {
        "field": "smoothed",
        "angle_gate_deg": 30.0,
        "max_skip": 1,
        "min_tract_len": 10.0,
        "seeding": "brute_force",
        "step_cap": 10000,
        "longest": None,
    },
    "plot": {
        "plane": "y",
        "slice": None,
    },
}


def merge(base: dict, override: dict, where="config") -> dict:
    """Recursive merge; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise InputError(f"unknown {where} key {key!r}")
        if isinstance(out[key], dict) and key != "geometry":
            if not isinstance(value, dict):
                raise InputError(f"{where}.{key} must be an object")
            out[key] = merge(out[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise InputError(f"cannot read config {path}: {err}") from err
    if not isinstance(d, dict):
        raise InputError("config file must hold a JSON object")
    return d


def resolve(config_path=None, overrides=None) -> dict:
    """Defaults, then the config file, then ``overrides`` (dotted keys)."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        cfg = merge(cfg, load_config(config_path))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise InputError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return cfg


def fit_config(cfg) -> FitConfig:
    f = cfg["fit"]
    if f["grid_level"] not in (0, 1, 2, 3):
        raise InputError("grid_level must be 0, 1, 2 or 3")
    if not 0 <= f["fa_threshold"] < 1:
        raise InputError("fa_threshold must lie in [0, 1)")
    return FitConfig(grid_level=int(f["grid_level"]), alpha_tilde=f["alpha_tilde"],
                     i_max=int(f["i_max"]), fa_threshold=float(f["fa_threshold"]),
                     merge_angle_deg=float(f["merge_angle_deg"]),
                     support_rel=float(f["support_rel"]), grad_tol=float(f["grad_tol"]),
                     max_iter=int(f["max_iter"]), seed=int(cfg["seed"]))


def smoothing_config(cfg) -> SmoothingConfig:
    s = cfg["smooth"]
    grid = tuple(s["h_grid"]) if s["h_grid"] else None
    return SmoothingConfig(h=s["h"], h_grid=grid, weight_threshold=s["weight_threshold"],
                           k_max=int(s["k_max"]), silhouette_floor=s["silhouette_floor"],
                           min_separation_deg=s["min_separation_deg"], cv=s["cv"])


def tracker_config(cfg, roi=None) -> TrackerConfig:
    t = cfg["track"]
    seeding = t["seeding"]
    return TrackerConfig(angle_gate=float(np.deg2rad(t["angle_gate_deg"])),
                         max_skip=int(t["max_skip"]), min_tract_len=float(t["min_tract_len"]),
                         seeding=seeding, roi=roi if seeding == "roi" else None,
                         step_cap=int(t["step_cap"]))
