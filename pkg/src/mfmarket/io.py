"""Scenario files (YAML) and trace persistence (CSV streams + JSON manifest)."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .env import PopulationSpec, ScenarioProfiles, Triangular
from .network import GeneratorSpec, LineSpec, Network, ptdf_from_branches, validate_network
from .simulator import BusConfig, RenewableSpec, SimulationConfig, SimulationTrace

__version__ = "0.1.0"

_KWH = 1e-3
_ALGO_KEYS = ("alpha", "gamma", "zeta", "t_train", "mode", "seeds", "storage_enabled", "initial_storage",
              "belief_init", "reset_q", "lr_c", "mf_variant")


class ParseError(Exception):
    pass


class ValidationError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


def bundled_scenarios():
    return sorted(p.name[:-5] for p in resources.files("mfmarket.scenarios").iterdir() if p.name.endswith(".yaml"))


def _resolve(path_or_name):
    p = Path(path_or_name)
    if p.exists():
        return p.read_text(), str(p)
    name = str(path_or_name)
    if not name.endswith(".yaml"):
        name += ".yaml"
    res = resources.files("mfmarket.scenarios") / name
    if res.is_file():
        return res.read_text(), f"<bundled {name}>"
    raise FileNotFoundError(f"no scenario file or bundled scenario named {path_or_name!r}")


def _tri(spec, field_name, errors):
    if spec is None:
        return Triangular()
    try:
        if isinstance(spec, dict):
            return Triangular(float(spec["lo"]), float(spec["hi"]), float(spec["mode"]))
        lo, hi, mode = (float(x) for x in spec)
        return Triangular(lo, hi, mode)
    except (ValueError, TypeError, KeyError) as exc:
        errors.append((field_name, f"bad triangular spec {spec!r}: {exc}"))
        return Triangular()


def config_from_dict(doc: dict) -> SimulationConfig:
    errors = []
    if not isinstance(doc, dict):
        raise ValidationError([("<root>", "scenario must be a mapping")])
    units = doc.get("units", "MWh")
    if units not in ("MWh", "kWh"):
        errors.append(("units", f"must be 'MWh' or 'kWh', got {units!r}"))
    scale = _KWH if units == "kWh" else 1.0
    H = int(doc.get("H", 12))

    net_doc = doc.get("network")
    if not isinstance(net_doc, dict):
        raise ValidationError([("network", "missing network section")])
    N = int(net_doc.get("n_buses", 0))
    gens = []
    for i, g in enumerate(net_doc.get("generators", [])):
        try:
            gens.append(GeneratorSpec(i, int(g["bus"]), float(g["cost_a"]), float(g["cost_b"]),
                                      float(g["p_max"]) * scale))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append((f"network.generators[{i}]", f"invalid generator: {exc}"))
    lines = []
    if "branches" in net_doc:
        br = net_doc["branches"]
        try:
            P = ptdf_from_branches(N, [(int(b["from"]), int(b["to"]), float(b.get("x", 1.0))) for b in br],
                                   ref=int(net_doc.get("reference_bus", 0)))
            for i, b in enumerate(br):
                lines.append(LineSpec(i, tuple(float(v) for v in P[i]), float(b["f_max"]) * scale))
        except (KeyError, TypeError, ValueError, IndexError, np.linalg.LinAlgError) as exc:
            errors.append(("network.branches", f"invalid branch list: {exc}"))
    for i, l in enumerate(net_doc.get("lines", [])):
        try:
            lines.append(LineSpec(len(lines), tuple(float(v) for v in l["ptdf"]), float(l["f_max"]) * scale))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append((f"network.lines[{i}]", f"invalid line: {exc}"))
    network = Network(N, lines, gens, net_doc.get("gens_by_bus"))
    errors += [("network", m) for m in validate_network(network)]

    renewables = []
    for i, r in enumerate(doc.get("renewables", []) or []):
        try:
            renewables.append(RenewableSpec(int(r["generator"]), float(r["capacity"]) * scale,
                                            np.asarray(r["cf_mean"], dtype=float),
                                            _tri(r.get("noise"), f"renewables[{i}].noise", errors)))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append((f"renewables[{i}]", f"invalid renewable: {exc}"))

    defaults = doc.get("bus_defaults", {}) or {}
    buses = []
    for i, raw in enumerate(doc.get("buses", []) or []):
        b = {**defaults, **(raw or {})}
        where = f"buses[{i}]"
        try:
            share = tuple(float(x) for x in b["type_share"])
            if abs(sum(share) - 1.0) > 1e-6:
                errors.append((f"{where}.type_share", f"must sum to 1, sums to {sum(share):.6g}"))
            pop = PopulationSpec(
                m_prosumers=int(b["prosumers"]),
                m_consumers=int(b.get("consumers", 0)),
                type_share=share,
                type_theta=tuple(float(x) for x in b["type_theta"]),
                total_capacity=float(b["total_capacity"]) * scale,
                efficiency=float(b.get("efficiency", 1.0)),
                consumer_ref_capacity=float(b.get("consumer_ref_capacity", 10.0 if units == "kWh" else 0.01)) * scale,
            )
            errors += [(where, m) for m in pop.validate() if "type_share" not in m]
            noise = _tri(b.get("noise"), f"{where}.noise", errors)
            prof = ScenarioProfiles(np.asarray(b["prosumer_nd_mean"], dtype=float),
                                    np.asarray(b["consumer_nd_mean"], dtype=float), noise,
                                    _tri(b["consumer_noise"], f"{where}.consumer_noise", errors)
                                    if "consumer_noise" in b else None)
            delta = float(b.get("delta", doc.get("algorithm", {}).get("delta", 0.7)))
            if not 0.5 <= delta <= 1.0:
                errors.append((f"{where}.delta", f"{delta} outside [0.5, 1]"))
            buses.append(BusConfig(pop, prof, delta))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append((where, f"invalid bus: {exc!r}"))

    algo = doc.get("algorithm", {}) or {}
    grids = doc.get("grids", {}) or {}
    kwargs = {k: algo[k] for k in _ALGO_KEYS if k in algo}
    if "seeds" in kwargs:
        kwargs["seeds"] = [int(s) for s in kwargs["seeds"]]
    cfg = SimulationConfig(
        network=network, buses=buses, renewables=renewables, H=H,
        n_days=int(doc.get("n_days", 20)),
        n_storage=int(grids.get("storage", 21)), n_actions=int(grids.get("actions", 9)),
        n_nd=int(grids.get("net_load", 5)),
        evening_hours=[int(h) for h in doc.get("evening_hours", [])],
        name=str(doc.get("name", "scenario")),
        **kwargs,
    )
    if not errors:
        errors += [("config", m) for m in cfg.validate()]
    if errors:
        raise ValidationError(errors)
    return cfg


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _key(ref):
    p = Path(str(ref))
    if p.exists():
        return str(p.resolve())
    name = str(ref)
    if name.startswith("<bundled"):
        return name
    return f"<bundled {name if name.endswith('.yaml') else name + '.yaml'}>"


def _load_doc(path_or_name, seen=()):
    text, origin = _resolve(path_or_name)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{origin}: {exc}") from exc
    if isinstance(doc, dict) and "extends" in doc:
        parent = doc.pop("extends")
        if not Path(str(parent)).is_absolute() and Path(origin).exists():
            local = Path(origin).parent / str(parent)
            parent = local.resolve() if local.exists() else parent
        seen = seen + (_key(origin),)
        if _key(parent) in seen:
            raise ParseError(f"{origin}: circular 'extends' chain through {str(parent)!r}")
        doc = _merge(_load_doc(parent, seen), doc)
    return doc


def load_scenario(path_or_name) -> SimulationConfig:
    """Validated config from a YAML file path or a bundled scenario name.

    A document may name a parent with ``extends:``; its keys are merged
    over the parent's (mappings recursively, everything else replaced).
    """
    return config_from_dict(_load_doc(path_or_name))


def _tri_list(t):
    return [t.lo, t.hi, t.mode]


def config_to_dict(cfg: SimulationConfig) -> dict:
    """Normalized document (MWh, explicit PTDF rows) that loads back to an equal config."""
    net = cfg.network
    return {
        "name": cfg.name,
        "units": "MWh",
        "H": cfg.H,
        "n_days": cfg.n_days,
        "evening_hours": list(cfg.evening_hours),
        "grids": {"storage": cfg.n_storage, "actions": cfg.n_actions, "net_load": cfg.n_nd},
        "algorithm": {
            "alpha": cfg.alpha, "gamma": cfg.gamma, "zeta": cfg.zeta, "t_train": cfg.t_train,
            "mode": cfg.mode, "seeds": list(cfg.seeds), "storage_enabled": cfg.storage_enabled,
            "initial_storage": cfg.initial_storage, "belief_init": cfg.belief_init,
            "reset_q": cfg.reset_q, "lr_c": cfg.lr_c, "mf_variant": cfg.mf_variant,
        },
        "network": {
            "n_buses": net.n_buses,
            "generators": [{"bus": g.bus, "cost_a": g.cost_a, "cost_b": g.cost_b, "p_max": g.p_max}
                           for g in net.generators],
            "lines": [{"ptdf": [float(v) for v in l.ptdf], "f_max": l.f_max} for l in net.lines],
            "gens_by_bus": [list(map(int, s)) for s in net.gens_by_bus],
        },
        "renewables": [{"generator": r.gen, "capacity": r.capacity, "cf_mean": [float(v) for v in r.cf_mean],
                        "noise": _tri_list(r.noise)} for r in cfg.renewables],
        "buses": [{
            "prosumers": b.population.m_prosumers,
            "consumers": b.population.m_consumers,
            "type_share": list(b.population.type_share),
            "type_theta": list(b.population.type_theta),
            "total_capacity": b.population.total_capacity,
            "efficiency": b.population.efficiency,
            "consumer_ref_capacity": b.population.consumer_ref_capacity,
            "prosumer_nd_mean": [float(v) for v in b.profiles.prosumer_nd_mean],
            "consumer_nd_mean": [float(v) for v in b.profiles.consumer_nd_mean],
            "noise": _tri_list(b.profiles.noise),
            "consumer_noise": _tri_list(b.profiles.consumer_noise),
            "delta": b.delta,
        } for b in cfg.buses],
    }


def write_scenario(cfg: SimulationConfig, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def config_hash(cfg: SimulationConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_columns(path, cols: dict):
    keys = list(cols)
    n = len(cols[keys[0]]) if keys else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for i in range(n):
            w.writerow([_fmt(cols[k][i]) for k in keys])


def _read_columns(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    out = {}
    for j, k in enumerate(header):
        col = [row[j] for row in rows]
        try:
            arr = np.array([float(x) for x in col])
            if k in ("t", "day", "hour", "bus", "agent"):
                arr = arr.astype(int)
        except ValueError:
            arr = np.array(col)
        out[k] = arr
    return out


def write_trace(trace: SimulationTrace, out_dir, wall_time=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_columns(out / "trace.csv", trace.steps)
    _write_columns(out / "market.csv", trace.market)
    if trace.agents is not None:
        _write_columns(out / "agents.csv", trace.agents)
    manifest = dict(trace.meta)
    manifest["version"] = __version__
    if wall_time is not None:
        manifest["wall_time_s"] = wall_time
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return out


def read_trace(trace_dir) -> SimulationTrace:
    d = Path(trace_dir)
    meta = json.loads((d / "manifest.json").read_text())
    agents = _read_columns(d / "agents.csv") if (d / "agents.csv").exists() else None
    return SimulationTrace(_read_columns(d / "trace.csv"), _read_columns(d / "market.csv"), meta, agents)
