"""Scenario configuration: YAML loading with includes, schema checks and
construction of the model objects."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dynsim import BranchTrip, BrakeInsertion, GenTrip, Pulse
from .grid import Branch, Bus, Exciter, GfmInverter, Governor, Load, PowerNetwork, SyncGen
from .mtdc import (DcLine, DcNode, MtdcSystem, SdcAttachment, VscConverter,
                   aggregate_capacitance, great_circle_km)
from .sdc import SdcParams

DATA_DIR = Path(__file__).parent / "data"
REFERENCE_SCENARIO = DATA_DIR / "reference" / "scenario.yaml"


class ConfigError(ValueError):
    pass


# -- loading -------------------------------------------------------------------

def _load_yaml(path: Path, stack: tuple = ()) -> Any:
    path = path.resolve()
    if path in stack:
        raise ConfigError(f"include cycle through {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return _resolve(data, path.parent, stack + (path,))


def _resolve(node, base: Path, stack: tuple):
    """Replace ``{include: file}`` mappings by the file's content; a
    top-level ``include`` list is merged underneath the including file."""
    if isinstance(node, dict):
        if set(node) == {"include"} and isinstance(node["include"], str):
            return _load_yaml(base / node["include"], stack)
        out = {}
        if "include" in node:
            incs = node["include"]
            for inc in ([incs] if isinstance(incs, str) else incs):
                sub = _load_yaml(base / inc, stack)
                if not isinstance(sub, dict):
                    raise ConfigError(f"included file {inc} must hold a mapping")
                out = _merge(out, sub)
        rest = {k: _resolve(v, base, stack) for k, v in node.items() if k != "include"}
        return _merge(out, rest)
    if isinstance(node, list):
        return [_resolve(v, base, stack) for v in node]
    return node


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(d, allowed, where, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _build(cls, d, where, nested=None):
    names = [f.name for f in dataclasses.fields(cls)]
    req = [f.name for f in dataclasses.fields(cls)
           if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    _check_keys(d, names, where, req)
    kw = dict(d)
    for key, fn in (nested or {}).items():
        if key in kw and kw[key] is not None:
            kw[key] = fn(kw[key], f"{where}.{key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# -- schema ------------------------------------------------------------------

SOLVER_KEYS = {"dt": 1e-3, "duration": 30.0, "output_rate": 100.0, "pf_tol": 1e-10,
               "outer_tol": 1e-6, "max_outer": 30}
ANALYSIS_KEYS = {"window": 20.0, "band": [0.1, 2.0], "method": "mp", "order": 12, "fs": 10.0,
                 "zeta_min": 0.05, "channels": None, "min_energy": 1e-3, "residual_warn": 0.1}
FREQSCAN_KEYS = {"converter": None, "output": None, "band": [0.05, 3.0], "step": 0.01,
                 "amp_range": [0.5, 1.0], "clamp_frac": 0.01, "preroll": 40.0, "periods": 1,
                 "order": None, "fit_band": None, "dt": None}
DESIGN_KEYS = {"zeta_target": 0.15, "target_freq_hz": None, "max_phase_per_block": 55.0,
               "m_max": 4, "Tw": 10.0, "limit_frac": 0.1, "sigma_margin": 1.1, "tune_gain": False}
VALIDATE_KEYS = {"converter": None, "feedback": None, "event": None, "contingency": None,
                 "window": 20.0, "zeta_target": 0.12, "zeta_contingency": 0.10,
                 "max_degradation": 0.2, "channels": None}
TOP_KEYS = {"name", "ei", "wi", "mtdc", "events", "channels", "solver", "seed", "analysis",
            "freqscan", "design", "validate"}


@dataclass
class ScenarioConfig:
    name: str
    ei: PowerNetwork | None
    wi: PowerNetwork | None
    mtdc: MtdcSystem | None
    events: list
    channels: list[str] | None
    solver: dict
    seed: int
    analysis: dict
    freqscan: dict
    design: dict
    validate: dict
    raw: dict = field(default_factory=dict, repr=False)
    source: Path | None = None

    def hash(self) -> str:
        from .dynsim import config_hash
        return config_hash(self.raw)


def _section(d, defaults, where):
    d = d or {}
    _check_keys(d, defaults, where)
    out = copy.deepcopy(defaults)
    out.update(d)
    return out


def load_config(path: str | Path, seed: int | None = None) -> ScenarioConfig:
    """Load and validate a scenario file. ``seed`` overrides the file's."""
    path = Path(path)
    raw = _load_yaml(path)
    return config_from_dict(raw, seed=seed, source=path)


def config_from_dict(raw: dict, seed: int | None = None, source: Path | None = None) -> ScenarioConfig:
    _check_keys(raw, TOP_KEYS, "scenario")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    ei = network_from_dict(raw["ei"], "ei") if raw.get("ei") else None
    wi = network_from_dict(raw["wi"], "wi") if raw.get("wi") else None
    if ei is None and wi is None:
        raise ConfigError("scenario: at least one of ei / wi is required")
    mt = mtdc_from_dict(raw["mtdc"], "mtdc") if raw.get("mtdc") else None
    events = [event_from_dict(e, f"events[{i}]") for i, e in enumerate(raw.get("events") or [])]
    channels = raw.get("channels")
    if channels is not None and not (isinstance(channels, list) and all(isinstance(c, str) for c in channels)):
        raise ConfigError("channels: expected a list of channel names")
    val = _section(raw.get("validate"), VALIDATE_KEYS, "validate")
    for key in ("event", "contingency"):
        if val[key] is not None:
            val[key] = event_from_dict(val[key], f"validate.{key}")
    return ScenarioConfig(
        name=str(raw.get("name", "scenario")), ei=ei, wi=wi, mtdc=mt, events=events,
        channels=channels, solver=_section(raw.get("solver"), SOLVER_KEYS, "solver"),
        seed=int(raw.get("seed", 0)),
        analysis=_section(raw.get("analysis"), ANALYSIS_KEYS, "analysis"),
        freqscan=_section(raw.get("freqscan"), FREQSCAN_KEYS, "freqscan"),
        design=_section(raw.get("design"), DESIGN_KEYS, "design"),
        validate=val, raw=raw, source=source)


def network_from_dict(d: dict, where: str = "network") -> PowerNetwork:
    _check_keys(d, {"name", "buses", "branches", "machines", "gfm_units", "loads", "base_mva",
                    "f_nominal"}, where, ("name", "buses"))
    gov = lambda g, w: _build(Governor, g, w)
    exc = lambda e, w: _build(Exciter, e, w)
    try:
        return PowerNetwork(
            name=d["name"],
            buses=[_build(Bus, b, f"{where}.buses[{i}]") for i, b in enumerate(d["buses"])],
            branches=[_build(Branch, b, f"{where}.branches[{i}]")
                      for i, b in enumerate(d.get("branches") or [])],
            machines=[_build(SyncGen, m, f"{where}.machines[{i}]", {"governor": gov, "exciter": exc})
                      for i, m in enumerate(d.get("machines") or [])],
            gfm_units=[_build(GfmInverter, g, f"{where}.gfm_units[{i}]")
                       for i, g in enumerate(d.get("gfm_units") or [])],
            loads=[_build(Load, ld, f"{where}.loads[{i}]") for i, ld in enumerate(d.get("loads") or [])],
            base_mva=float(d.get("base_mva", 1000.0)), f_nominal=float(d.get("f_nominal", 60.0)))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def _sdc_from_dict(d, where):
    _check_keys(d, {"params", "feedback"}, where, ("params", "feedback"))
    return SdcAttachment(_build(SdcParams, d["params"], f"{where}.params"), str(d["feedback"]))


def mtdc_from_dict(d: dict, where: str = "mtdc") -> MtdcSystem:
    """Nodes may give ``capacitance`` directly or ``converter_capacitance``,
    in which case the node capacitance is that plus half of every incident
    line's. Lines without ``length_km`` take the great-circle distance
    between their nodes' coordinates."""
    _check_keys(d, {"name", "nodes", "lines", "converters", "base_mva", "base_kv"}, where,
                ("nodes", "lines", "converters"))
    node_dicts = []
    conv_cap = {}
    coords = {}
    for i, n in enumerate(d["nodes"]):
        n = dict(n)
        cc = n.pop("converter_capacitance", None)
        if "capacitance" not in n:
            n["capacitance"] = 0.0
            conv_cap[n.get("id")] = float(cc or 0.0)
        node_dicts.append(n)
        coords[n.get("id")] = (n.get("lat"), n.get("lon"))
    lines = []
    for i, ln in enumerate(d["lines"]):
        ln = dict(ln)
        if "length_km" not in ln:
            a, b = coords.get(ln.get("from_node")), coords.get(ln.get("to_node"))
            if not a or not b or None in a or None in b:
                raise ConfigError(f"{where}.lines[{i}]: no length_km and no node coordinates")
            ln["length_km"] = round(great_circle_km(*a, *b), 1)
        lines.append(_build(DcLine, ln, f"{where}.lines[{i}]"))
    cap = aggregate_capacitance([n.get("id") for n in node_dicts],
                                [ln for ln in lines if ln.in_service], conv_cap)
    nodes = []
    for i, n in enumerate(node_dicts):
        if n.get("id") in conv_cap:
            n["capacitance"] = cap[n["id"]]
        nodes.append(_build(DcNode, n, f"{where}.nodes[{i}]"))
    convs = [_build(VscConverter, c, f"{where}.converters[{i}]", {"sdc": _sdc_from_dict})
             for i, c in enumerate(d["converters"])]
    try:
        return MtdcSystem(nodes, lines, convs, base_mva=float(d.get("base_mva", 1000.0)),
                          base_kv=float(d.get("base_kv", 1280.0)), name=d.get("name", "mtdc"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_EVENTS = {"brake_insertion": BrakeInsertion, "gen_trip": GenTrip, "branch_trip": BranchTrip,
           "pulse": Pulse}


def event_from_dict(d: dict, where: str = "event"):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{where}: event needs a 'kind'")
    kind = d["kind"]
    if kind not in _EVENTS:
        raise ConfigError(f"{where}: unknown event kind {kind!r} (probe events are created by freqscan)")
    body = {k: v for k, v in d.items() if k != "kind"}
    ev = _build(_EVENTS[kind], body, where)
    from .dynsim import _check_event
    try:
        _check_event(ev)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return ev


def dump_json(obj, path: str | Path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
