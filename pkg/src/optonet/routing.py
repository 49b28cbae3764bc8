"""Path computation for static and time-varying topologies, and compilation
of path sets into per-node time-flow tables."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import islice
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np

from .core import (
    INF,
    Circuit,
    EntryConflict,
    MultipathGroup,
    NextHop,
    NodeId,
    OpticalSchedule,
    OptonetError,
    Path,
    SourceRoute,
    TimeFlowEntry,
    TimeFlowTable,
    Unreachable,
    earliest_arrival_table,
    enumerate_paths,
    neighbors,
)


class SliceDisconnected(OptonetError):
    pass


class PathInvalid(OptonetError):
    pass


def _as_schedule(topology) -> OpticalSchedule:
    if isinstance(topology, OpticalSchedule):
        return topology
    return OpticalSchedule.static_topology(list(topology))


def _pairs(n: int, pairs: Optional[Iterable[tuple[int, int]]]):
    if pairs is None:
        return [(s, d) for s in range(n) for d in range(n) if s != d]
    return list(pairs)


def _graph(circuits: Iterable[Circuit]) -> nx.MultiGraph:
    g = nx.MultiGraph()
    for c in circuits:
        g.add_edge(c.n1, c.n2)
    return g


def static_paths(
    topology,
    mode: str = "ecmp",
    k: int = 4,
    tm=None,
    node_count: Optional[int] = None,
    pairs=None,
) -> list[Path]:
    """ECMP, WCMP or k-shortest paths on one topology instance (no slices)."""
    sched = _as_schedule(topology)
    circuits = sched.circuits_at(None)
    n = node_count or sched.node_count
    g = _graph(circuits)
    simple = nx.Graph(g)
    out: list[Path] = []
    per_pair: dict[tuple[int, int], list[list[int]]] = {}
    for s, d in _pairs(n, pairs):
        if s not in simple or d not in simple or not nx.has_path(simple, s, d):
            raise Unreachable(f"N{d} unreachable from N{s}")
        if mode in ("ecmp", "wcmp"):
            nodes = sorted(nx.all_shortest_paths(simple, s, d))
        elif mode == "ksp":
            nodes = list(islice(nx.shortest_simple_paths(simple, s, d), k))
        else:
            raise ValueError(f"unknown static routing mode {mode!r}")
        per_pair[(s, d)] = nodes
    weights = _wcmp_weights(g, per_pair, tm) if mode == "wcmp" else None
    for (s, d), plist in per_pair.items():
        ws = weights[(s, d)] if weights else [1.0 / len(plist)] * len(plist)
        for p, w in zip(plist, ws):
            out.append(Path(s, d, tuple((m, None) for m in p[1:]), None, w))
    return out


def _wcmp_weights(g: nx.MultiGraph, per_pair, tm) -> dict:
    """Weights proportional to each path's bottleneck of parallel circuits
    over the demand an even split would place on the link."""
    if tm is None or not np.asarray(tm, dtype=float).any():
        return {k: [1.0 / len(v)] * len(v) for k, v in per_pair.items()}
    tm = np.asarray(tm, dtype=float)
    load: dict[tuple[int, int], float] = {}
    for (s, d), plist in per_pair.items():
        for p in plist:
            for a, b in zip(p, p[1:]):
                e = (min(a, b), max(a, b))
                load[e] = load.get(e, 0.0) + tm[s, d] / len(plist)
    scale = max(load.values()) or 1.0
    out = {}
    for key, plist in per_pair.items():
        caps = []
        for p in plist:
            cap = INF
            for a, b in zip(p, p[1:]):
                e = (min(a, b), max(a, b))
                cap = min(cap, g.number_of_edges(a, b) / (1.0 + load[e] / scale))
            caps.append(cap)
        tot = sum(caps)
        out[key] = [c / tot for c in caps]
    return out


def direct_route(schedule: OpticalSchedule, pairs=None) -> list[Path]:
    """Single-hop paths waiting at the source for the next direct circuit."""
    n = schedule.node_count
    nc = schedule.next_connection(max(n, *(max(p) + 1 for p in pairs)) if pairs else n)
    c = schedule.cycle_length
    out = []
    for s, d in _pairs(n, pairs):
        for ts in range(c):
            w = nc[s, d, ts]
            if w < 0:
                raise Unreachable(f"N{s} and N{d} never share a circuit")
            out.append(Path(s, d, ((d, (ts + int(w)) % c),), ts))
    return out


def vlb(schedule: OpticalSchedule, pairs=None) -> list[Path]:
    """Two-hop Valiant paths: leave to any neighbor of the arrival slice, then
    wait there for a direct circuit; the direct path is added when available.

    A source with no circuit in the arrival slice waits for its next slice
    that has one.
    """
    n = schedule.node_count
    nc = schedule.next_connection(n)
    c = schedule.cycle_length
    out = []
    for s, d in _pairs(n, pairs):
        for ts in range(c):
            first = next((ts + o) % c for o in range(c) if neighbors(schedule, s, (ts + o) % c))
            group = []
            for w in neighbors(schedule, s, first):
                if w == d:
                    group.append(((d, first),))
                    continue
                wait = nc[w, d, first]
                if wait < 0:
                    continue
                group.append(((w, first), (d, (first + int(wait)) % c)))
            if not group:
                raise Unreachable(f"no VLB path N{s}->N{d} at ts={ts}")
            for hops in group:
                out.append(Path(s, d, hops, ts, 1.0 / len(group)))
    return out


def opera_paths(schedule: OpticalSchedule, max_hop: int = 8, pairs=None) -> list[Path]:
    """All shortest paths inside the arrival slice's topology."""
    n = schedule.node_count
    out = []
    for ts in range(schedule.cycle_length):
        g = nx.Graph()
        g.add_nodes_from(range(n))
        g.add_edges_from((x.n1, x.n2) for x in schedule.slices[ts])
        for s, d in _pairs(n, pairs):
            if not nx.has_path(g, s, d):
                raise SliceDisconnected(f"slice {ts} has no path N{s}->N{d}")
            plist = sorted(nx.all_shortest_paths(g, s, d))
            if len(plist[0]) - 1 > max_hop:
                raise SliceDisconnected(f"slice {ts}: N{s}->N{d} needs more than {max_hop} hops")
            for p in plist:
                out.append(Path(s, d, tuple((m, ts) for m in p[1:]), ts, 1.0 / len(plist)))
    return out


def ucmp_weight(path: Path, cycle_length: int) -> float:
    """Inverse of the slices the path spans, counting ingress and delivery
    slice, plus one."""
    return 1.0 / (path.arrival_offset(cycle_length) + 2)


def ucmp_paths(schedule: OpticalSchedule, max_hop: int = 2, k: int = 2, pairs=None) -> list[Path]:
    """The ``k`` earliest-arriving paths per (src, dst, ts), weighted by
    :func:`ucmp_weight` and normalized."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = schedule.node_count
    nc = schedule.next_connection(n)
    c = schedule.cycle_length
    out = []
    for s, d in _pairs(n, pairs):
        for ts in range(c):
            cands = enumerate_paths(schedule, s, d, ts, max_hop, nc)[:k]
            if not cands:
                raise Unreachable(f"N{d} unreachable from N{s} at ts={ts}")
            raw = [ucmp_weight(p, c) for p in cands]
            tot = sum(raw)
            out.extend(p.reweighted(r / tot) for p, r in zip(cands, raw))
    return out


def hoho_plan(schedule: OpticalSchedule, max_hop: int = 4, dsts=None) -> dict:
    """Greedy earliest-arrival next hop for every (node, dst, ts) state.

    Returns ``{(node, dst, ts): (next_node, dep_ts, arrival_offset)}``; ties
    prefer fewer remaining hops, then the lower node id.

    A per-hop table cannot count the hops a packet has taken, so the plan
    targets the earliest arrival over any hop count and following it from
    any state realizes exactly that arrival. A state whose fastest route
    needs more than ``max_hop`` hops raises :class:`Unreachable`.
    """
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    n = schedule.node_count
    c = schedule.cycle_length
    top = max(max_hop, n - 1)  # simple paths suffice in the time-expanded graph
    plan = {}
    for d in range(n) if dsts is None else dsts:
        E, nc = earliest_arrival_table(schedule, d, top, n)
        best_any = E[top]
        # fewest hops achieving each state's best arrival
        H = np.full((n, c), top + 1)
        for h in range(top, -1, -1):
            H[E[h] == best_any] = h
        for v in range(n):
            if v == d:
                continue
            for p in range(c):
                target = best_any[v, p]
                if target == INF:
                    raise Unreachable(f"N{d} unreachable from N{v} at ts={p}")
                if H[v, p] > max_hop:
                    raise Unreachable(
                        f"earliest arrival N{v}->N{d} at ts={p} needs {H[v, p]} hops, above max_hop={max_hop}"
                    )
                best = None
                for m in range(n):
                    w = nc[v, m, p]
                    if w < 0 or m == v:
                        continue
                    q = (p + w) % c
                    if w + best_any[m, q] != target:
                        continue
                    rem = 0 if m == d else int(H[m, q])
                    key = (rem, m)
                    if best is None or key < best[0]:
                        best = (key, m, int(q))
                plan[(v, d, p)] = (best[1], best[2], int(target))
    return plan


@dataclass(frozen=True)
class HopRule:
    """One per-hop decision: at ``node`` in slice ``ts``, traffic for ``dst``
    leaves toward ``next_node`` in slice ``dep_ts``. Matches any source."""

    node: NodeId
    dst: NodeId
    ts: int
    next_node: NodeId
    dep_ts: int
    weight: float = 1.0


def hoho_paths(schedule: OpticalSchedule, max_hop: int = 4, pairs=None) -> list[HopRule]:
    """The per-state plan of :func:`hoho_plan` as deployable hop rules."""
    dsts = None if pairs is None else sorted({d for _, d in pairs})
    plan = hoho_plan(schedule, max_hop, dsts)
    return [HopRule(v, d, p, m, dep) for (v, d, p), (m, dep, _) in sorted(plan.items())]


def hoho_walk(plan: dict, src: int, dst: int, ts: int, cycle_length: int, limit: int = 64) -> Path:
    """Follow the greedy plan from (src, ts) and return the realized path."""
    hops = []
    v, p = src, ts
    while v != dst:
        m, dep, _ = plan[(v, dst, p)]
        hops.append((m, dep))
        v, p = m, dep
        if len(hops) > limit:
            raise OptonetError("HOHO plan loops")
    return Path(src, dst, tuple(hops), ts)


ROUTINGS = {
    "direct": direct_route,
    "vlb": vlb,
    "opera": opera_paths,
    "ucmp": ucmp_paths,
    "hoho": hoho_paths,
    "ecmp": lambda t, **kw: static_paths(t, "ecmp", **kw),
    "wcmp": lambda t, **kw: static_paths(t, "wcmp", **kw),
    "ksp": lambda t, **kw: static_paths(t, "ksp", **kw),
}


def _port(schedule: OpticalSchedule, node: int, peer: int, ts) -> int:
    port = schedule.port_between(node, peer, ts)
    if port is None:
        where = "topology" if ts is None else f"slice {ts}"
        raise PathInvalid(f"no circuit N{node}-N{peer} in {where}")
    return port


def compile_path(schedule: OpticalSchedule, path: Path) -> list[tuple[int, Optional[int], int, Optional[int]]]:
    """(node, arr_ts, egress_port, dep_ts) for every hop of ``path``."""
    static = schedule.static or path.ts is None
    out = []
    node, arr = path.src, None if static else path.ts
    for nxt, dep in path.hops:
        dep = None if static else dep
        out.append((node, arr, _port(schedule, node, nxt, dep), dep))
        node, arr = nxt, dep
    return out


def deploy_routing(
    paths: Sequence,
    schedule: OpticalSchedule,
    lookup: str = "hop",
    multipath: str = "none",
    match_src: bool = True,
) -> dict[int, TimeFlowTable]:
    """Compile paths into per-node time-flow tables.

    ``lookup`` is ``"hop"`` (one entry per hop) or ``"source"`` (the whole
    hop stack at the source). Same-key entries become a multipath group
    when ``multipath`` is ``"packet"`` or ``"flow"``; otherwise differing
    actions raise :class:`EntryConflict`. With ``match_src=False`` path
    entries wildcard the source, giving destination-based forwarding; only
    safe for loop-free path sets such as ECMP/WCMP shortest paths.
    """
    if lookup in ("per-hop", "per_hop"):
        lookup = "hop"
    if lookup not in ("hop", "source"):
        raise ValueError(f"lookup must be 'hop' or 'source', got {lookup!r}")
    if multipath not in ("none", "packet", "flow"):
        raise ValueError(f"multipath must be 'none', 'packet' or 'flow', got {multipath!r}")
    grouped: dict[int, dict[tuple, dict]] = {}
    for path in paths:
        if isinstance(path, HopRule):
            dep = None if schedule.static else path.dep_ts
            arr = None if schedule.static else path.ts
            action = NextHop(_port(schedule, path.node, path.next_node, dep), dep)
            slot = grouped.setdefault(path.node, {}).setdefault((arr, None, path.dst), {})
            slot[action] = slot.get(action, 0.0) + path.weight
            continue
        steps = compile_path(schedule, path)
        src_key = path.src if match_src else None
        if lookup == "source":
            node, arr = steps[0][0], steps[0][1]
            actions = [(node, (arr, src_key, path.dst), SourceRoute(tuple((s[2], s[3]) for s in steps)))]
        else:
            actions = [(node, (arr, src_key, path.dst), NextHop(port, dep)) for node, arr, port, dep in steps]
        for node, key, action in actions:
            slot = grouped.setdefault(node, {}).setdefault(key, {})
            slot[action] = slot.get(action, 0.0) + path.weight
    tables = {}
    gid = 0
    for node in sorted(grouped):
        entries = []
        for key in sorted(grouped[node], key=_key_order):
            acts = grouped[node][key]
            arr, src, dst = key
            if len(acts) == 1 or multipath == "none":
                if len(acts) > 1:
                    raise EntryConflict(f"N{node} key {key} has {len(acts)} different actions")
                (action,) = acts
                entries.append(TimeFlowEntry(dst, action, arr, src))
                continue
            tot = sum(acts.values())
            for action, w in acts.items():
                entries.append(TimeFlowEntry(dst, action, arr, src, MultipathGroup(gid, multipath, w / tot)))
            gid += 1
        tables[node] = TimeFlowTable(tuple(entries))
    return tables


def _key_order(key):
    arr, src, dst = key
    return (dst, -1 if src is None else src, -1 if arr is None else arr)


def validate_paths(paths: Sequence[Path], schedule: OpticalSchedule) -> list[str]:
    problems = []
    for p in paths:
        try:
            if isinstance(p, HopRule):
                _port(schedule, p.node, p.next_node, p.dep_ts)
            else:
                compile_path(schedule, p)
        except PathInvalid as e:
            problems.append(f"PathInvalid: {p.src}->{p.dst} ts={p.ts}: {e}")
    return problems
