"""Declarative experiment configuration: strict parsing and round-tripping.

One YAML file declares the model, the probability family, the shared
initial density, and the per-front-end settings.  Unknown keys are fatal
(a typo in a sweep axis must not silently run the wrong experiment), and
validation collects every error before failing.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field

import yaml

from .model import (
    ConstantP,
    LogisticFloor,
    ModelParams,
    ProbabilityFn,
    RationalTails,
    TabulatedC2,
)
from .pde import Grid, SolverConfig


class ConfigError(ValueError):
    """Carries the full list of validation errors, with field paths."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


DEFAULTS = {
    "model": {"M": 11, "Mc": 3.0, "h": 0.1, "tau": 0.01},
    "probability": {
        "family": "logistic_floor",
        "p_min": 0.02,
        "scale": 1.0,
        "center": -1.0,
        # rational_tails parameters
        "alpha": 2.0,
        "x_switch": 2.0,
        # constant parameter
        "value": 1.0,
        # tabulated parameter
        "table_path": "",
    },
    "initial": {"center": 0.0, "sigma": 1.0},
    "abm": {
        "replicas": 16,
        "rounds": 20000,
        "base_seed": 20240601,
        "record_every": 0,        # 0 = geometric thinning
    },
    "pde": {
        "grid": {"x_min": -12.0, "x_max": 12.0, "n_cells": 800},
        "solver": {
            "theta": 1.0,
            "dt_max": 0.02,
            "cfl_advection": 0.9,
            "boundary_mode": "zero_flux",
            "epsilon": 0.0,
            "picard_iters": 0,
            "mass_tol": 1e-8,
            "energy_tol": 1e-4,
        },
        "horizon": 600.0,
        "snapshot_times": [0.0, 60.0, 600.0],
        "record_uniform_count": 200,
        "record_first": 0.01,
        "record_ratio": 1.2,
    },
    "diagnostics": {
        "sorting_windows": [1.0, 2.0],
        "phi_frac": 0.1,
        "phi_floor_frac": 0.01,
        "sorting_tol": 0.05,
        "bound_factor": 1.0e-7,
        "trailing_frac": 0.25,
        "fd_slack": 0.05,
        "beta_lb_tol": 1.0e-6,
        "energy_tol": 1.0e-4,
        "c_T": 10.0,
        "sorting_time_R": 2.0,
        "sorting_time_threshold": 0.1,
    },
    "compare": {
        "checkpoint_every": 10,
        "l1_aggregate_cells": 8,
        "l1_times_frac": [0.5, 1.0],
    },
    "sweep": {"axes": {}, "points": []},
    "closure_check": {
        "M_values": [2, 3, 4, 5, 6, 7, 8],
        "n_distributions": 50,
        "max_atoms": 4,
        "seed": 1234,
        "tol": 1.0e-12,
    },
    "condition_check": {"x_lo": -10.0, "x_hi": 10.0, "n_points": 2001},
    "output": {"float_format": ".17g"},
}

_SCALARS = (int, float, str, bool)


@dataclass
class ExperimentConfig:
    """Validated configuration; `raw` is the fully-merged dict of record."""

    raw: dict
    params: ModelParams
    pf: ProbabilityFn
    grid: Grid
    solver: SolverConfig

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def sorting_windows(self):
        return [float(r) for r in self.raw["diagnostics"]["sorting_windows"]]


def _merge(defaults, user, path, errors):
    """Deep merge with strict unknown-key rejection and scalar type checks."""
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            errors.append(f"{here}: unknown key")
            continue
        dflt = defaults[key]
        if isinstance(dflt, dict):
            if not isinstance(val, dict):
                errors.append(f"{here}: expected a mapping")
                continue
            out[key] = _merge(dflt, val, here, errors)
        elif isinstance(dflt, list):
            if not isinstance(val, list):
                errors.append(f"{here}: expected a list")
                continue
            out[key] = val
        else:
            if isinstance(val, (dict, list)):
                errors.append(f"{here}: expected a scalar")
                continue
            if isinstance(dflt, bool) and not isinstance(val, bool):
                errors.append(f"{here}: expected a boolean")
                continue
            if isinstance(dflt, (int, float)) and not isinstance(val, (int, float)):
                errors.append(f"{here}: expected a number")
                continue
            if isinstance(dflt, str) and not isinstance(val, str):
                errors.append(f"{here}: expected a string")
                continue
            out[key] = val
    return out


def build_probability(section: dict) -> ProbabilityFn:
    family = section["family"]
    if family == "logistic_floor":
        return LogisticFloor(p_min=float(section["p_min"]),
                             s=float(section["scale"]),
                             x_c=float(section["center"]))
    if family == "rational_tails":
        return RationalTails(alpha=float(section["alpha"]),
                             x_switch=float(section["x_switch"]))
    if family == "constant":
        return ConstantP(value=float(section["value"]))
    if family == "tabulated":
        return TabulatedC2.from_file(section["table_path"])
    raise ValueError(
        f"unknown probability family {family!r}; expected logistic_floor, "
        "rational_tails, constant or tabulated"
    )


def validate_config(raw_user: dict) -> ExperimentConfig:
    """Merge user config over defaults; collect every validation error."""
    errors = []
    if not isinstance(raw_user, dict):
        raise ConfigError(["top level: expected a mapping"])
    raw = _merge(DEFAULTS, raw_user, "", errors)

    params = pf = grid = solver = None
    m = raw["model"]
    try:
        params = ModelParams(M=int(m["M"]), Mc=float(m["Mc"]),
                             h=float(m["h"]), tau=float(m["tau"]))
    except (ValueError, TypeError) as exc:
        errors.append(f"model: {exc}")
    try:
        pf = build_probability(raw["probability"])
    except (ValueError, TypeError, OSError) as exc:
        errors.append(f"probability: {exc}")
    g = raw["pde"]["grid"]
    try:
        grid = Grid(x_min=float(g["x_min"]), x_max=float(g["x_max"]),
                    n_cells=int(g["n_cells"]))
    except (ValueError, TypeError) as exc:
        errors.append(f"pde.grid: {exc}")
    s = raw["pde"]["solver"]
    try:
        solver = SolverConfig(
            theta=float(s["theta"]), dt_max=float(s["dt_max"]),
            cfl_advection=float(s["cfl_advection"]),
            boundary_mode=str(s["boundary_mode"]),
            epsilon=float(s["epsilon"]), picard_iters=int(s["picard_iters"]),
            mass_tol=float(s["mass_tol"]), energy_tol=float(s["energy_tol"]),
        )
    except (ValueError, TypeError) as exc:
        errors.append(f"pde.solver: {exc}")

    if raw["pde"]["horizon"] < 0:
        errors.append("pde.horizon: must be >= 0")
    if raw["initial"]["sigma"] <= 0:
        errors.append("initial.sigma: must be > 0")
    if raw["abm"]["replicas"] < 1:
        errors.append("abm.replicas: must be >= 1")
    if raw["abm"]["rounds"] < 0:
        errors.append("abm.rounds: must be >= 0")
    for i, r in enumerate(raw["diagnostics"]["sorting_windows"]):
        if not isinstance(r, (int, float)) or r <= 0:
            errors.append(f"diagnostics.sorting_windows[{i}]: must be > 0")
    for key, dotted in raw["sweep"]["axes"].items():
        if not isinstance(dotted, list) or not dotted:
            errors.append(f"sweep.axes.{key}: expected a nonempty list")
    for i, point in enumerate(raw["sweep"]["points"]):
        if not isinstance(point, dict):
            errors.append(f"sweep.points[{i}]: expected a mapping of dotted keys")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(raw=raw, params=params, pf=pf, grid=grid, solver=solver)


def parse_config(path) -> ExperimentConfig:
    """Load, merge with defaults and validate; all errors reported at once."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return validate_config(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML of the fully-merged config; parse(serialize(c)) == c."""
    buf = io.StringIO()
    yaml.safe_dump(cfg.raw, buf, sort_keys=True, default_flow_style=False)
    return buf.getvalue()


def apply_overrides(raw_user: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides (e.g. {'model.h': 0.5}) to a config dict."""
    out = copy.deepcopy(raw_user)
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{dotted}: path collides with a scalar"])
        node[parts[-1]] = value
    return out
