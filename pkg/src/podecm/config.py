"""Run configuration: YAML file with a fixed key set.

Unknown keys, missing files and degenerate bounds are reported as
:class:`~podecm.exceptions.ConfigError` before any computation starts.
"""

import copy
import os

import numpy as np
import yaml

from .exceptions import ConfigError, PodecmError
from .material import PlasticityParams

# key -> default (None marks "required or optional without default")
SCHEMA = {
    "name": "run",
    "mesh": {
        "kind": "composite",          # composite | porous | file
        "h": 0.07,
        "count": 6,
        "volume_fraction": 0.234,
        "seed": 7,
        "path": None,
    },
    "parameterization": {
        "kind": "inclusion_scaling",  # inclusion_scaling | porous_ellipses
        "bounds": None,
    },
    "materials": None,                # {region_tag: {E, nu, sigma_y0, H}}
    "loading": {
        "wave": "triangle",           # triangle | load_unload
        "steps": 40,
        "Uxx": [0.9, 1.1],
        "Uyy": [0.9, 1.1],
        "Uxy": [-0.1, 0.1],
    },
    "sampling": {
        "train": {"count": 8, "scheme": "sobol", "seed": 0},
        "test": {"count": 20, "scheme": "uniform", "seed": 1},
    },
    "rom": {"N": 20, "L": 15, "eps": 0.01, "volume_row": True, "stress_rows": False},
    "solver": {"rtol": 1e-8, "atol": 1e-12, "max_iter": 25, "rom_rtol": 1e-8},
    "twoscale": {
        "nx": 5, "ny": 3, "width": 2.0, "height": 1.0,
        "T_max": 0.2, "n_up": 25, "n_down": 25,
        "rtol": 1e-6, "max_iter": 20,
    },
    "propmap": {
        "v_void": [0.4, 0.45, 0.5],
        "kappa": [1.01, 1.25, 1.5],
        "delta_uy": 0.001,
    },
    "output": "out",
}

_FREE_FORM = {"materials", "parameterization.bounds"}


def _merge(schema, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    out = copy.deepcopy(schema)
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(schema[key], dict) and where not in _FREE_FORM:
            out[key] = _merge(schema[key], value if value is not None else {}, where)
        else:
            out[key] = value
    return out


def _interval(value, where):
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected [low, high], got {value!r}") from exc
    if not lo < hi:
        raise ConfigError(f"{where}: degenerate interval [{lo}, {hi}]")
    return [lo, hi]


def validate(cfg, base_dir="."):
    """Check values and resolve relative paths against ``base_dir``; returns a new dict."""
    cfg = copy.deepcopy(cfg)
    mesh = cfg["mesh"]
    if mesh["kind"] not in ("composite", "porous", "file"):
        raise ConfigError(f"mesh.kind must be composite, porous or file, got {mesh['kind']!r}")
    if mesh["kind"] == "file":
        if not mesh["path"]:
            raise ConfigError("mesh.path is required when mesh.kind is 'file'")
        path = mesh["path"] if os.path.isabs(mesh["path"]) else os.path.join(base_dir, mesh["path"])
        if not os.path.isfile(path):
            raise ConfigError(f"mesh file not found: {path}")
        mesh["path"] = os.path.abspath(path)
    elif not float(mesh["h"]) > 0:
        raise ConfigError(f"mesh.h must be positive, got {mesh['h']}")

    par = cfg["parameterization"]
    if par["kind"] == "inclusion_scaling":
        par["bounds"] = [_interval(par["bounds"] or [0.5, 1.2], "parameterization.bounds")]
    elif par["kind"] == "porous_ellipses":
        b = par["bounds"] or [[0.4, 0.5], [1.01, 1.5]]
        if len(b) != 2:
            raise ConfigError("parameterization.bounds needs [v_void, kappa] intervals")
        par["bounds"] = [_interval(b[0], "parameterization.bounds[0]"),
                         _interval(b[1], "parameterization.bounds[1]")]
    else:
        raise ConfigError(f"unknown parameterization.kind {par['kind']!r}")

    if not cfg["materials"]:
        raise ConfigError("materials: at least one region must be given")
    mats = {}
    for tag, p in cfg["materials"].items():
        if not isinstance(p, dict):
            raise ConfigError(f"materials.{tag}: expected a mapping")
        extra = set(p) - {"E", "nu", "sigma_y0", "H"}
        if extra:
            raise ConfigError(f"unknown config key 'materials.{tag}.{sorted(extra)[0]}'")
        try:
            PlasticityParams(**{k: float(v) for k, v in p.items()})
        except (TypeError, PodecmError) as exc:
            raise ConfigError(f"materials.{tag}: {exc}") from exc
        mats[int(tag)] = {k: float(v) for k, v in p.items()}
    cfg["materials"] = mats

    load = cfg["loading"]
    if load["wave"] not in ("triangle", "load_unload"):
        raise ConfigError(f"loading.wave must be triangle or load_unload, got {load['wave']!r}")
    steps = int(load["steps"])
    if steps < 1 or (load["wave"] == "triangle" and steps % 4) or (load["wave"] == "load_unload" and steps % 2):
        raise ConfigError(f"loading.steps={steps} does not fit the {load['wave']} wave")
    for key in ("Uxx", "Uyy", "Uxy"):
        load[key] = _interval(load[key], f"loading.{key}")

    for which in ("train", "test"):
        s = cfg["sampling"][which]
        extra = set(s) - {"count", "scheme", "seed"}
        if extra:
            raise ConfigError(f"unknown config key 'sampling.{which}.{sorted(extra)[0]}'")
        if s.get("scheme", "sobol") not in ("sobol", "uniform"):
            raise ConfigError(f"sampling.{which}.scheme must be sobol or uniform")
        if int(s.get("count", 0)) < 1:
            raise ConfigError(f"sampling.{which}.count must be at least 1")

    rom = cfg["rom"]
    if int(rom["N"]) < 1 or int(rom["L"]) < 1 or not float(rom["eps"]) > 0:
        raise ConfigError("rom: N and L must be positive integers and eps positive")
    return cfg


def load_config(path, overrides=None):
    """Read, merge with defaults and validate a YAML run configuration."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    cfg = _merge(SCHEMA, data, "")
    for key, value in (overrides or {}).items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return validate(cfg, os.path.dirname(os.path.abspath(path)))


def parameter_bounds(cfg):
    """Sampling box, loading components first: ``(names, lows, highs)``."""
    load = cfg["loading"]
    names = ["Uxx", "Uyy", "Uxy"]
    bounds = [load["Uxx"], load["Uyy"], load["Uxy"]]
    par = cfg["parameterization"]
    geo = ["zeta"] if par["kind"] == "inclusion_scaling" else ["v_void", "kappa"]
    names += geo
    bounds += par["bounds"]
    b = np.array(bounds, dtype=float)
    return names, b[:, 0], b[:, 1]
