"""Benchmark / scenario configuration files (TOML).

Top-level tables: ``system``, ``bus``, ``branch``, ``machine``, ``load``
describe the grid; ``dsms``, ``measurement``, ``koopman``, ``mpc``,
``campaign`` and ``scenario`` hold the per-module settings. Any table may be
omitted in a scenario file that names a ``base`` config to inherit from.
"""

from __future__ import annotations

import copy
import math
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .grid.model import Branch, Bus, GridModel, Load, Machine

DEFAULT_CONFIG = "kundur_two_area.toml"


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    """Read a config file; ``None`` loads the bundled two-area benchmark."""
    if path is None:
        text = resources.files("kgmpc.data").joinpath(DEFAULT_CONFIG).read_text()
        origin = Path(DEFAULT_CONFIG)
    else:
        origin = Path(path)
        try:
            text = origin.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {origin}: {exc}") from exc
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    base = cfg.pop("base", None)
    if base is not None:
        base_path = None if base == "default" else (origin.parent / base)
        cfg = _merge(load_config(base_path), cfg)
    return cfg


def grid_model(cfg: dict, *, name="base") -> GridModel:
    try:
        system = cfg["system"]
        buses = [Bus(int(b["id"]), float(b.get("kv", 1.0))) for b in cfg["bus"]]
        branches = [
            Branch(str(br["id"]), int(br["from"]), int(br["to"]), float(br.get("r", 0.0)),
                   float(br["x"]), float(br.get("b", 0.0)), bool(br.get("in_service", True)))
            for br in cfg["branch"]
        ]
        machines = [
            Machine(
                name=str(m["name"]), bus=int(m["bus"]), h=float(m["h"]), d=float(m.get("d", 0.0)),
                xd=float(m["xd"]), e=float(m["e"]), pm=float(m["pm"]), r=float(m.get("r", 0.0)),
                mva=float(m["mva"]) if "mva" in m else None,
                angle_guess=math.radians(float(m.get("angle_deg", 0.0))),
            )
            for m in cfg["machine"]
        ]
        loads = [Load(int(ld["bus"]), complex(float(ld["p"]), float(ld.get("q", 0.0)))) for ld in cfg.get("load", [])]
        names = [m.name for m in machines]
        slack = system.get("slack", names[0])
        slack_index = names.index(slack) if isinstance(slack, str) else int(slack)
        fault_y = system.get("fault_admittance", [1e4, -1e4])
        return GridModel(
            buses=buses, branches=branches, machines=machines, loads=loads,
            base_mva=float(system.get("base_mva", 100.0)), f0=float(system.get("f0", 60.0)),
            retained=tuple(int(b) for b in system.get("retained", ())),
            dsms_bus=int(system["dsms_bus"]) if "dsms_bus" in system else None,
            slack=slack_index, fault_admittance=complex(fault_y[0], fault_y[1]),
            pq_breakpoint=float(system.get("pq_breakpoint", 0.0)), name=name,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid grid configuration: {exc!r}") from exc


def section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))
