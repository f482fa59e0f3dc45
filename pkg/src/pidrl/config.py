"""Plain-text (INI) experiment configuration.

Each nested dataclass of :class:`ExperimentConfig` gets its own section;
tuples are written comma separated.  Unknown keys are rejected so typos do
not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .harness import ExperimentConfig
from .pid import PidGains
from .plant import PlantParams
from .rewards import RewardSpec
from .td3 import Td3Config

SECTIONS = {
    "initial_gains": PidGains,
    "safe_gains": PidGains,
    "reward": RewardSpec,
    "td3": Td3Config,
    "plant": PlantParams,
}
# filled in from [experiment] (seed, u_limits) when the agent is built
DERIVED = {"td3": {"seed", "u_min", "u_max"}}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in text.split(",") if x.strip())
    if default is None:
        return None if text.lower() == "none" else int(text)
    return text


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["experiment"] = {
        f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in SECTIONS
    }
    for name in SECTIONS:
        sub = getattr(cfg, name)
        skip = DERIVED.get(name, set())
        cp[name] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub) if f.name not in skip}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _apply(obj, items: dict, section: str):
    known = {f.name for f in dataclasses.fields(obj)} - DERIVED.get(section, set())
    changes = {}
    for key, text in items.items():
        if key not in known:
            raise KeyError(f"[{section}] unknown key {key!r}")
        changes[key] = _parse(text, getattr(obj, key))
    return dataclasses.replace(obj, **changes) if changes else obj


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    for section in cp.sections():
        if section != "experiment" and section not in SECTIONS:
            raise KeyError(f"unknown section [{section}]")
    subs = {name: _apply(getattr(cfg, name), dict(cp[name]), name) if cp.has_section(name) else getattr(cfg, name)
            for name in SECTIONS}
    cfg = dataclasses.replace(cfg, **subs)
    if cp.has_section("experiment"):
        cfg = _apply(cfg, dict(cp["experiment"]), "experiment")
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return from_ini(Path(path).read_text(), base)
