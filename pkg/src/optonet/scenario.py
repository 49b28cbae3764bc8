"""Scenario files: schema, defaults and construction of a runnable simulation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Optional

import jsonschema
import numpy as np

from .controller import TaLoop, hybrid_schedule, preload_to, run_ta_loop
from .core import Circuit, OpticalSchedule, tables_from_json
from .routing import (
    deploy_routing,
    direct_route,
    hoho_paths,
    opera_paths,
    static_paths,
    ucmp_paths,
    validate_paths,
    vlb,
)
from .simulator import SimConfig, Simulator
from .topology import (
    bvn_schedule,
    edmonds_matching,
    jupiter_evolve,
    multidim_round_robin,
    round_robin,
    sorn,
    uniform_mesh,
)
from .workload import FlowSpec, SizeDistribution, builtin, flows_from_csv, gen_flows, offered_matrix

_ROTATING = ("round_robin", "multidim_round_robin", "bvn", "sorn")
_STATIC = ("uniform_mesh", "edmonds", "jupiter")
_TO_ROUTING = ("direct", "vlb", "opera", "ucmp", "hoho")
_STATIC_ROUTING = ("ecmp", "wcmp", "ksp")

SCHEMA: dict = {
    "type": "object",
    "required": ["network", "topology", "workload"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "workflow": {"enum": ["to", "ta", "hybrid"]},
        "seed": {"type": "integer", "minimum": 0},
        "network": {
            "type": "object",
            "required": ["node_num"],
            "additionalProperties": False,
            "properties": {
                "node_num": {"type": "integer", "minimum": 2},
                "uplink": {"type": "integer", "minimum": 1},
                "hosts_per_node": {"type": "integer", "minimum": 1},
                "bandwidth_bps": {"type": "number", "exclusiveMinimum": 0},
                "propagation_delay_ns": {"type": "number", "minimum": 0},
                "mtu_bytes": {"type": "integer", "minimum": 1},
            },
        },
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": list(_ROTATING + _STATIC)},
                "slice_duration_ns": {"type": "integer", "minimum": 1},
                "guardband_ns": {"type": "integer", "minimum": 0},
                "side": {"type": "integer", "minimum": 2},
                "dims": {"type": "integer", "minimum": 1},
                "total_slices": {"type": "integer", "minimum": 1},
                "top_k": {"type": "integer", "minimum": 0},
                "schedule": {"type": "object"},
            },
        },
        "routing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "algorithm": {"enum": list(_TO_ROUTING + _STATIC_ROUTING)},
                "lookup": {"enum": ["hop", "source"]},
                "multipath": {"enum": ["none", "packet", "flow"]},
                "max_hop": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "tables": {"type": "object"},
            },
        },
        "services": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "K": {"type": "integer", "minimum": 1},
                "update_interval_ns": {"type": "number", "exclusiveMinimum": 0},
                "congestion_detection": {"type": "boolean"},
                "congestion_threshold_bytes": {"type": ["number", "null"], "minimum": 0},
                "congestion_reaction": {"enum": ["drop", "defer"]},
                "pushback": {"type": "boolean"},
                "offloading": {"type": "boolean"},
                "flow_pausing": {"type": "boolean"},
                "elephant_threshold_bytes": {"type": "number", "minimum": 0},
                "notify_lead_ns": {"type": "number", "minimum": 0},
                "offload_horizon": {"type": ["integer", "null"], "minimum": 1},
                "transport": {"enum": ["none", "aimd"]},
                "dupack_threshold": {"type": "integer", "minimum": 1},
                "ack_delay_ns": {"type": "number", "minimum": 0},
                "init_cwnd": {"type": "number", "minimum": 1},
                "max_cwnd": {"type": "number", "minimum": 1},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rotation_jitter_ns": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
                "sync_error_ns": {"type": "number", "minimum": 0},
                "reconfig_ns": {"type": "number", "minimum": 0},
                "port_buffer_bytes": {"type": ["number", "null"], "minimum": 0},
                "telemetry_interval_ns": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "horizon_ns": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "estimator_audit": {"type": "boolean"},
                "check_invariants": {"type": "boolean"},
            },
        },
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "distribution": {"type": "string"},
                "cdf": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
                "cdf_file": {"type": "string"},
                "load": {"type": "number", "minimum": 0, "maximum": 1},
                "duration_ns": {"type": "number", "minimum": 0},
                "flows": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5}},
                "flows_csv": {"type": "string"},
            },
        },
        "ta": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "topo_algo": {"enum": ["jupiter", "edmonds", "sorn"]},
                "routing_algo": {"enum": list(_TO_ROUTING + _STATIC_ROUTING)},
                "interval_ns": {"type": "number", "exclusiveMinimum": 0},
                "change_budget": {"type": "integer", "minimum": 0},
            },
        },
        "hybrid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "to_nodes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "ta_nodes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
    },
}

DEFAULTS: dict = {
    "name": "scenario",
    "workflow": "to",
    "seed": 0,
    "network": {"uplink": 1, "hosts_per_node": 1, "bandwidth_bps": 100e9, "propagation_delay_ns": 100.0, "mtu_bytes": 1500},
    "topology": {"generator": "round_robin", "slice_duration_ns": 2000, "guardband_ns": 200},
    "routing": {"algorithm": "vlb", "lookup": "hop", "multipath": "packet", "max_hop": 2, "k": 2},
    "services": {},
    "sim": {},
    "workload": {},
}


class ScenarioError(ValueError):
    """Schema or consistency problem in a scenario file."""


def load(path) -> dict:
    try:
        data = json.loads(FsPath(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: not valid JSON: {e}") from e
    data = resolve(data, base_dir=FsPath(path).parent)
    return data


def resolve(data: dict, base_dir=None) -> dict:
    """Validate against the schema and fill in defaults. File references are
    inlined so the result is self-contained."""
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ScenarioError(f"schema error at {where}: {e.message}") from e
    out = copy.deepcopy(data)
    for k, v in DEFAULTS.items():
        if isinstance(v, dict):
            merged = dict(v)
            merged.update(out.get(k, {}))
            out[k] = merged
        else:
            out.setdefault(k, v)
    base = FsPath(base_dir or ".")
    wl = out["workload"]
    if "cdf_file" in wl:
        dist = SizeDistribution.from_file(base / wl.pop("cdf_file"))
        wl["cdf"] = [list(p) for p in dist.points]
    if "flows_csv" in wl:
        flows = flows_from_csv(base / wl.pop("flows_csv"))
        wl["flows"] = [[f.flow_id, f.src_host, f.dst_host, f.size_bytes, f.arrival_time_ns] for f in flows]
    if out["workflow"] == "ta":
        out.setdefault("ta", {})
        out["ta"] = {"topo_algo": "jupiter", "routing_algo": "wcmp", "interval_ns": 1e6, "change_budget": 4, **out["ta"]}
    if out["workflow"] == "hybrid" and "hybrid" not in out:
        raise ScenarioError("hybrid workflow needs a 'hybrid' section with to_nodes and ta_nodes")
    return out


def _distribution(wl: dict) -> SizeDistribution:
    if "cdf" in wl:
        return SizeDistribution(tuple((int(s), float(p)) for s, p in wl["cdf"]))
    return builtin(wl.get("distribution", "rpc-like"))


def build_flows(sc: dict) -> list[FlowSpec]:
    wl, net = sc["workload"], sc["network"]
    if "flows" in wl:
        return [FlowSpec(int(s), int(d), int(b), float(t), int(i)) for i, s, d, b, t in wl["flows"]]
    hpn = net["hosts_per_node"]
    hosts = net["node_num"] * hpn
    per_node = net["uplink"] * net["bandwidth_bps"]
    dist, load, dur = _distribution(wl), wl.get("load", 0.3), wl.get("duration_ns", 1e6)
    if sc["workflow"] != "hybrid":
        return gen_flows(dist, load, dur, net["node_num"] * per_node, hosts, seed=sc["seed"], hosts_per_node=hpn)
    # hybrid groups share no circuits, so traffic stays inside each group
    flows: list[FlowSpec] = []
    for i, key in enumerate(("to_nodes", "ta_nodes")):
        nodes = sc["hybrid"][key]
        pool = [v * hpn + j for v in nodes for j in range(hpn)]
        flows += gen_flows(dist, load, dur, len(nodes) * per_node, hosts, seed=sc["seed"] * 2 + i,
                           hosts_per_node=hpn, first_id=len(flows), hosts=pool)
    return flows


def _relabel(circuits, nodes: list[int]) -> list[Circuit]:
    return [Circuit(nodes[c.n1], c.port1, nodes[c.n2], c.port2) for c in circuits]


def _shift_ports(circuits, offset: int) -> list[Circuit]:
    return [Circuit(c.n1, c.port1 + offset, c.n2, c.port2 + offset) for c in circuits]


def build_schedule(sc: dict, tm: Optional[np.ndarray] = None) -> OpticalSchedule:
    topo, net = sc["topology"], sc["network"]
    n, u = net["node_num"], net["uplink"]
    D, g = topo["slice_duration_ns"], topo["guardband_ns"]
    if "schedule" in topo:
        sched = OpticalSchedule.from_json(topo["schedule"])
        return sched if sched.static else sched.with_timing(D, g)
    gen = topo["generator"]
    if gen == "round_robin":
        return round_robin(n, u, D, g)
    if gen == "multidim_round_robin":
        return multidim_round_robin(topo.get("side", 2), topo.get("dims", 3), u, n, D, g)
    if tm is None:
        tm = np.ones((n, n)) - np.eye(n)
    if gen == "bvn":
        return bvn_schedule(tm, topo.get("total_slices", n), D, g)
    if gen == "sorn":
        return sorn(tm, u, topo.get("top_k", 1), D, g)
    if gen == "uniform_mesh":
        return OpticalSchedule.static_topology(uniform_mesh(n, u))
    if gen == "edmonds":
        return OpticalSchedule.static_topology(edmonds_matching(tm))
    if gen == "jupiter":
        return OpticalSchedule.static_topology(jupiter_evolve(tm, None, sc.get("ta", {}).get("change_budget", 0), n, u))
    raise ScenarioError(f"unknown generator {gen!r}")


def build_paths(schedule: OpticalSchedule, routing: dict, tm=None, pairs=None) -> list:
    alg = routing["algorithm"]
    if schedule.static and alg in _TO_ROUTING:
        raise ScenarioError(f"routing {alg!r} needs a rotating schedule")
    if not schedule.static and alg in _STATIC_ROUTING:
        raise ScenarioError(f"routing {alg!r} needs a static topology")
    if alg == "direct":
        return direct_route(schedule, pairs)
    if alg == "vlb":
        return vlb(schedule, pairs)
    if alg == "opera":
        return opera_paths(schedule, routing.get("max_hop", 8), pairs)
    if alg == "ucmp":
        return ucmp_paths(schedule, routing.get("max_hop", 2), routing.get("k", 2), pairs)
    if alg == "hoho":
        return hoho_paths(schedule, routing.get("max_hop", 4), pairs)
    return static_paths(schedule, alg, routing.get("k", 4), tm, pairs=pairs)


def sim_config(sc: dict) -> SimConfig:
    net, topo = sc["network"], sc["topology"]
    kw: dict[str, Any] = dict(
        node_count=net["node_num"],
        uplinks=net["uplink"],
        hosts_per_node=net["hosts_per_node"],
        link_bandwidth_bps=net["bandwidth_bps"],
        propagation_delay_ns=net["propagation_delay_ns"],
        mtu_bytes=net["mtu_bytes"],
        slice_duration_ns=topo["slice_duration_ns"],
        guardband_ns=topo["guardband_ns"],
        seed=sc["seed"],
    )
    kw.update(sc.get("services", {}))
    sim = dict(sc.get("sim", {}))
    if "rotation_jitter_ns" in sim:
        sim["rotation_jitter_ns"] = tuple(sim["rotation_jitter_ns"])
    kw.update(sim)
    return SimConfig(**kw)


@dataclass
class Built:
    scenario: dict
    schedule: OpticalSchedule
    tables: dict
    paths: list
    flows: list
    sim: Simulator
    loop: Optional[TaLoop] = None
    findings: list = field(default_factory=list)


def _group_pairs(nodes: list[int]) -> list[tuple[int, int]]:
    return [(a, b) for a in nodes for b in nodes if a != b]


def build(sc: dict) -> Built:
    """Construct schedule, tables, workload and a ready-to-run simulator."""
    cfg = sim_config(sc)
    flows = build_flows(sc)
    net = sc["network"]
    tm = offered_matrix(flows, net["node_num"], net["hosts_per_node"]) if flows else None
    routing = sc["routing"]
    wf = sc["workflow"]
    if wf == "hybrid":
        return _build_hybrid(sc, cfg, flows, tm)
    schedule = build_schedule(sc, tm)
    if "tables" in routing:
        paths: list = []
        tables = tables_from_json(routing["tables"])
    else:
        paths = build_paths(schedule, routing, tm)
        tables = deploy_routing(paths, schedule, routing["lookup"], routing["multipath"], match_src=not schedule.static)
    sim = Simulator(cfg, schedule, {}, flows)
    preload_to(schedule, tables, sim)
    loop = None
    if wf == "ta":
        loop = _start_ta(sc, sim)
    return Built(sc, schedule, tables, paths, flows, sim, loop)


def _topo_algo(sc: dict, nodes: Optional[list[int]] = None, port_offset: int = 0):
    ta, net, topo = sc["ta"], sc["network"], sc["topology"]
    n = len(nodes) if nodes else net["node_num"]
    u = net["uplink"]

    def sub(tm):
        return tm if nodes is None else tm[np.ix_(nodes, nodes)]

    def back(circuits):
        out = circuits if nodes is None else _relabel(circuits, nodes)
        return _shift_ports(out, port_offset) if port_offset else out

    def to_local(prev):
        if prev is None or nodes is None:
            return prev
        idx = {v: i for i, v in enumerate(nodes)}
        return [Circuit(idx[c.n1], c.port1 - port_offset, idx[c.n2], c.port2 - port_offset) for c in prev if c.n1 in idx]

    alg = ta["topo_algo"]
    if alg == "jupiter":
        return lambda tm, prev: back(jupiter_evolve(sub(tm), to_local(prev), ta["change_budget"], n, u))
    if alg == "edmonds":
        return lambda tm, prev: back(edmonds_matching(sub(tm)))
    return lambda tm, prev: sorn(tm, u, topo.get("top_k", 1), topo["slice_duration_ns"], topo["guardband_ns"])


def _start_ta(sc: dict, sim: Simulator) -> TaLoop:
    ta = sc["ta"]
    routing = dict(sc["routing"], algorithm=ta["routing_algo"])
    return run_ta_loop(
        _topo_algo(sc),
        lambda schedule, tm: build_paths(schedule, routing, tm),
        ta["interval_ns"],
        sim,
        lookup=routing["lookup"],
        multipath=routing["multipath"],
    )


def _build_hybrid(sc: dict, cfg: SimConfig, flows: list, tm) -> Built:
    """Rotating schedule on ``to_nodes`` overlaid with a traffic-aware static
    topology on ``ta_nodes``; the two node groups share no circuits."""
    hy, net, topo = sc["hybrid"], sc["network"], sc["topology"]
    a, b = list(hy["to_nodes"]), list(hy["ta_nodes"])
    if set(a) & set(b) or not a or not b:
        raise ScenarioError("hybrid node groups must be non-empty and disjoint")
    for f in flows:
        s, d = f.src_host // net["hosts_per_node"], f.dst_host // net["hosts_per_node"]
        if (s in a) != (d in a):
            raise ScenarioError(f"flow {f.flow_id} crosses the hybrid node groups")
    to_part = round_robin(len(a), net["uplink"], topo["slice_duration_ns"], topo["guardband_ns"])
    to_slices = [_relabel(to_part.circuits_at(t), a) for t in range(to_part.cycle_length)]
    to_sched = OpticalSchedule(to_slices, topo["slice_duration_ns"], topo["guardband_ns"])
    ta_sc = dict(sc, ta={"topo_algo": "jupiter", "routing_algo": "ecmp", "interval_ns": 1e6, "change_budget": 2, **sc.get("ta", {})})
    ta_circuits = _relabel(uniform_mesh(len(b), min(net["uplink"], len(b) - 1)), b)
    schedule = hybrid_schedule(to_sched, ta_circuits)
    routing = sc["routing"]
    to_paths = build_paths(to_sched, routing, tm, _group_pairs(a))
    ta_routing = dict(routing, algorithm=ta_sc["ta"]["routing_algo"])
    ta_topo = OpticalSchedule.static_topology(ta_circuits)
    ta_paths = build_paths(ta_topo, ta_routing, tm, _group_pairs(b))
    tables = deploy_routing(to_paths + ta_paths, schedule, routing["lookup"], routing["multipath"])
    sim = Simulator(cfg, schedule, {}, flows)
    preload_to(schedule, tables, sim)

    def compose(circuits):
        return hybrid_schedule(to_sched, circuits)

    loop = run_ta_loop(
        _topo_algo(ta_sc, b),
        lambda sched, tm2: to_paths
        + build_paths(OpticalSchedule.static_topology([c for c in sched.circuits_at(0) if c.n1 in b]), ta_routing, tm2, _group_pairs(b)),
        ta_sc["ta"]["interval_ns"],
        sim,
        lookup=routing["lookup"],
        multipath=routing["multipath"],
        compose=compose,
        match_src=True,
    )
    return Built(sc, schedule, tables, to_paths + ta_paths, flows, sim, loop)


def validate(sc: dict) -> list[dict]:
    """Feasibility findings without running; each has a ``severity``."""
    findings = []
    try:
        cfg = sim_config(sc)
    except ValueError as e:
        return [{"severity": "error", "kind": "ConfigInvalid", "detail": str(e)}]
    try:
        flows = build_flows(sc)
        net = sc["network"]
        tm = offered_matrix(flows, net["node_num"], net["hosts_per_node"]) if flows else None
        schedule = build_schedule(sc, tm)
    except Exception as e:  # generator errors are findings, not crashes
        return [{"severity": "error", "kind": type(e).__name__, "detail": str(e)}]
    if schedule.node_count > cfg.node_count:
        findings.append({"severity": "error", "kind": "ConfigInvalid", "detail": "schedule uses more nodes than node_num"})
    routing = sc["routing"]
    if "tables" in routing:
        try:
            tables = tables_from_json(routing["tables"])
        except Exception as e:
            return findings + [{"severity": "error", "kind": type(e).__name__, "detail": str(e)}]
        findings += _check_tables(schedule, tables)
    else:
        try:
            paths = build_paths(schedule, routing, tm)
        except Exception as e:
            return findings + [{"severity": "error", "kind": type(e).__name__, "detail": str(e)}]
        for p in validate_paths(paths, schedule):
            findings.append({"severity": "error", "kind": "PathInvalid", "detail": p})
        try:
            deploy_routing(paths, schedule, routing["lookup"], routing["multipath"], match_src=not schedule.static)
        except Exception as e:
            findings.append({"severity": "error", "kind": type(e).__name__, "detail": str(e)})
    return findings


def _check_tables(schedule: OpticalSchedule, tables: dict) -> list[dict]:
    """Every NextHop must use a port that carries a circuit in its slice."""
    from .core import NextHop

    out = []
    for node, table in sorted(tables.items()):
        for e in table.entries:
            act = e.action
            hops = [(act.egress_port, act.dep_ts)] if isinstance(act, NextHop) else [act.hops[0]]
            for port, dep in hops:
                ts = None if schedule.static else dep
                if ts is None and not schedule.static:
                    ok = any(c.port_of(node) == port for c in schedule.circuits_at(None) if node in (c.n1, c.n2))
                else:
                    ok = any(c.port_of(node) == port for c in schedule.circuits_at(ts) if node in (c.n1, c.n2))
                if not ok:
                    out.append({
                        "severity": "error",
                        "kind": "PathInvalid",
                        "detail": f"N{node} entry dst={e.dst} arr={e.arr_ts} uses port {port} with no circuit in slice {dep}",
                    })
    return out
