"""Experiment configuration: YAML in, topology + defaults out.

One self-describing config file defines an experiment: the topology (with
units), the synthetic catalog and arrival-rate model, starting-value
defaults, and simulator/optimizer settings.  Rates may be declared per
millisecond (converted here); everything downstream is seconds and 1/second.
Decision variables round-trip through a YAML mapping whose keys mirror the
conventional symbols (pi, p, q, w_d, w_dbar, w_e, L, omega, h, g).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ParseError
from .model import DecisionVariables, SystemTopology
from .workload import gen_catalog


@dataclass
class Experiment:
    name: str
    topo: SystemTopology
    defaults: dict
    sim: dict
    optimizer: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _per_server(value, m, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape == ():
        arr = np.full(m, float(arr))
    if arr.shape != (m,):
        raise ParseError(f"{name}: expected scalar or {m} values, got shape {arr.shape}")
    return arr


def _per_server_router(value, m, rr, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape == ():
        arr = np.full((m, rr), float(arr))
    elif arr.shape == (m,):
        arr = np.repeat(arr[:, None], rr, axis=1)
    if arr.shape != (m, rr):
        raise ParseError(f"{name}: expected scalar, per-server, or {m}x{rr} values")
    return arr


def _build_segments(catalog: dict, tau: float) -> np.ndarray:
    if "segments" in catalog:
        return np.asarray(catalog["segments"], dtype=int)
    return gen_catalog(
        int(catalog["num_files"]),
        float(catalog.get("pareto_shape", 2.0)),
        float(catalog.get("pareto_scale", 300.0)),
        tau,
        int(catalog.get("seed", 0)),
        max_length=float(catalog.get("max_length_s", 3600.0)),
    )


def _build_arrivals(arrivals: dict, r: int, rr: int) -> np.ndarray:
    if "matrix" in arrivals:
        mat = np.asarray(arrivals["matrix"], dtype=float)
        if mat.shape != (r, rr):
            raise ParseError(f"arrivals.matrix must be {r}x{rr}")
        return mat
    totals = np.asarray(arrivals["total_rate_per_router"], dtype=float)
    if totals.shape == ():
        totals = np.full(rr, float(totals))
    if totals.shape != (rr,):
        raise ParseError(f"arrivals.total_rate_per_router must have {rr} entries")
    zipf = float(arrivals.get("zipf_exponent", 0.0))
    weights = 1.0 / np.arange(1, r + 1) ** zipf
    weights /= weights.sum()
    return weights[:, None] * totals[None, :]


def build_topology(cfg: dict) -> SystemTopology:
    topo = cfg["topology"]
    m = int(topo["num_servers"])
    rr = int(topo["num_edge_routers"])
    tau = float(topo["tau_s"])
    segments = _build_segments(cfg.get("catalog", {}), tau)
    r = len(segments)

    rate_scale = {"per_s": 1.0, "per_ms": 1000.0}[topo.get("rate_unit", "per_s")]
    shift_scale = {"s": 1.0, "ms": 1e-3}[topo.get("shift_unit", "s")]

    streams_dc = np.asarray(topo.get("streams_dc", 1))
    if streams_dc.shape == ():
        streams_dc = np.full(m, int(streams_dc))
    streams_edge = np.asarray(topo.get("streams_edge", 1))
    if streams_edge.shape == ():
        streams_edge = np.full((m, rr), int(streams_edge))
    elif streams_edge.shape == (m,):
        streams_edge = np.repeat(streams_edge[:, None], rr, axis=1)

    total_segments = float(segments.sum())
    total_seconds = total_segments * tau
    if "server_capacity" in topo:
        server_capacity = _per_server(topo["server_capacity"], m, "server_capacity")
    else:
        server_capacity = np.floor(
            np.full(m, float(topo.get("server_capacity_frac", 0.35)) * total_segments)
        )
    if "edge_capacity_s" in topo:
        edge_capacity = np.asarray(topo["edge_capacity_s"], dtype=float)
        if edge_capacity.shape == ():
            edge_capacity = np.full(rr, float(edge_capacity))
    else:
        edge_capacity = np.full(
            rr, float(topo.get("edge_capacity_frac", 0.15)) * total_seconds
        )
    budget = np.asarray(topo.get("violation_budget", 0.05), dtype=float)
    if budget.shape == ():
        budget = np.full(rr, float(budget))

    return SystemTopology(
        num_servers=m,
        num_edge_routers=rr,
        num_files=r,
        segments=segments,
        tau=tau,
        startup_delay=float(topo.get("startup_delay_s", 0.0)),
        streams_dc=streams_dc,
        streams_edge=streams_edge,
        base_rate_dc=_per_server(topo["base_rate_dc"], m, "base_rate_dc") * rate_scale,
        shift_dc=_per_server(topo["shift_dc"], m, "shift_dc") * shift_scale,
        base_rate_edge=_per_server_router(topo["base_rate_edge"], m, rr, "base_rate_edge")
        * rate_scale,
        shift_edge=_per_server_router(topo["shift_edge"], m, rr, "shift_edge")
        * shift_scale,
        server_capacity=server_capacity,
        edge_capacity=edge_capacity,
        violation_budget=budget,
        arrival_rate=_build_arrivals(cfg.get("arrivals", {}), r, rr),
    )


def load_experiment(path) -> Experiment:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "topology" not in raw:
        raise ParseError(f"{path}: config must be a mapping with a 'topology' section")
    return Experiment(
        name=str(raw.get("name", "experiment")),
        topo=build_topology(raw),
        defaults=raw.get("defaults", {}),
        sim=raw.get("sim", {}),
        optimizer=raw.get("optimizer", {}),
        raw=raw,
    )


def topology_to_config(topo: SystemTopology, name="exported") -> dict:
    """Round-trippable config mapping for a topology (rates in 1/s)."""
    return {
        "name": name,
        "topology": {
            "num_servers": int(topo.num_servers),
            "num_edge_routers": int(topo.num_edge_routers),
            "tau_s": float(topo.tau),
            "startup_delay_s": float(topo.startup_delay),
            "streams_dc": topo.streams_dc.tolist(),
            "streams_edge": topo.streams_edge.tolist(),
            "rate_unit": "per_s",
            "shift_unit": "s",
            "base_rate_dc": topo.base_rate_dc.tolist(),
            "shift_dc": topo.shift_dc.tolist(),
            "base_rate_edge": topo.base_rate_edge.tolist(),
            "shift_edge": topo.shift_edge.tolist(),
            "server_capacity": topo.server_capacity.tolist(),
            "edge_capacity_s": topo.edge_capacity.tolist(),
            "violation_budget": topo.violation_budget.tolist(),
        },
        "catalog": {"segments": topo.segments.tolist()},
        "arrivals": {"matrix": topo.arrival_rate.tolist()},
    }


def save_topology(topo: SystemTopology, path, name="exported") -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(topology_to_config(topo, name), fh, default_flow_style=None)


_VAR_KEYS = ("pi", "p", "q", "w_d", "w_dbar", "w_e", "L", "omega", "h", "g")


def save_vars(vars: DecisionVariables, path) -> None:
    doc = {
        "pi": vars.pi.tolist(),
        "p": vars.p.tolist(),
        "q": vars.q.tolist(),
        "w_d": vars.w_d.tolist(),
        "w_dbar": vars.w_dbar.tolist(),
        "w_e": vars.w_e.tolist(),
        "L": vars.placement.tolist(),
        "omega": vars.omega.tolist(),
        "h": vars.h.tolist(),
        "g": vars.g.tolist(),
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, default_flow_style=None)


def load_vars(path) -> DecisionVariables:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    missing = [k for k in _VAR_KEYS if k not in doc]
    if missing:
        raise ParseError(f"{path}: missing variable keys {missing}")
    return DecisionVariables(
        pi=np.asarray(doc["pi"], dtype=float),
        p=np.asarray(doc["p"], dtype=float),
        q=np.asarray(doc["q"], dtype=float),
        w_d=np.asarray(doc["w_d"], dtype=float),
        w_dbar=np.asarray(doc["w_dbar"], dtype=float),
        w_e=np.asarray(doc["w_e"], dtype=float),
        placement=np.asarray(doc["L"], dtype=float),
        omega=np.asarray(doc["omega"], dtype=float),
        h=np.asarray(doc["h"], dtype=float),
        g=np.asarray(doc["g"], dtype=float),
    )


def save_vars_csv(vars: DecisionVariables, path) -> None:
    """Long-format CSV of every decision variable for reports."""
    import csv

    arrays = {
        "pi": vars.pi, "p": vars.p, "q": vars.q, "w_d": vars.w_d,
        "w_dbar": vars.w_dbar, "w_e": vars.w_e, "L": vars.placement,
        "omega": vars.omega, "h": vars.h, "g": vars.g,
    }
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "i0", "i1", "i2", "i3", "value"])
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            for idx in np.ndindex(arr.shape):
                padded = list(idx) + [""] * (4 - len(idx))
                w.writerow([name, *padded, f"{arr[idx]:.12g}"])
