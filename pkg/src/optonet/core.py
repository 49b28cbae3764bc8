"""Shared domain types: circuits, schedules, time-flow tables, paths and the
time-expanded graph helpers used by every routing algorithm."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

NodeId = int
PortId = int
SliceId = int
HostId = int

INF = float("inf")


class OptonetError(Exception):
    """Base class for all errors raised by this package."""


class InfeasibleSchedule(OptonetError):
    pass


class Unreachable(OptonetError):
    pass


class NoMatch(OptonetError):
    pass


@dataclass(frozen=True, order=True)
class Circuit:
    """Undirected full-duplex circuit, stored with ``n1 < n2``."""

    n1: NodeId
    port1: PortId
    n2: NodeId
    port2: PortId
    ts: Optional[SliceId] = None

    def __post_init__(self):
        if self.n1 == self.n2:
            raise ValueError(f"circuit endpoints must differ, got node {self.n1} twice")
        if min(self.n1, self.n2, self.port1, self.port2) < 0:
            raise ValueError("node and port ids must be nonnegative")
        if self.n1 > self.n2:
            n1, p1 = self.n1, self.port1
            object.__setattr__(self, "n1", self.n2)
            object.__setattr__(self, "port1", self.port2)
            object.__setattr__(self, "n2", n1)
            object.__setattr__(self, "port2", p1)

    @property
    def ends(self) -> tuple[tuple[NodeId, PortId], tuple[NodeId, PortId]]:
        return (self.n1, self.port1), (self.n2, self.port2)

    def peer(self, node: NodeId) -> NodeId:
        if node == self.n1:
            return self.n2
        if node == self.n2:
            return self.n1
        raise ValueError(f"node {node} is not an endpoint of {self}")

    def port_of(self, node: NodeId) -> PortId:
        if node == self.n1:
            return self.port1
        if node == self.n2:
            return self.port2
        raise ValueError(f"node {node} is not an endpoint of {self}")

    def at(self, ts: Optional[SliceId]) -> "Circuit":
        return Circuit(self.n1, self.port1, self.n2, self.port2, ts)


def _check_exclusive(circuits: Iterable[Circuit], where: str = "") -> None:
    seen: dict[tuple[int, int], Circuit] = {}
    for c in circuits:
        for end in c.ends:
            if end in seen:
                raise InfeasibleSchedule(
                    f"port N{end[0]}.p{end[1]} used twice{where}: {seen[end]} and {c}"
                )
            seen[end] = c


@dataclass(frozen=True)
class OpticalSchedule:
    """Per-slice circuit sets repeating every ``cycle_length`` slices.

    A ``static`` schedule has exactly one slice, no guardband and no notion
    of time: it stands for a traffic-aware topology instance.
    """

    slices: tuple[tuple[Circuit, ...], ...]
    slice_duration_ns: int = 2000
    guardband_ns: int = 200
    static: bool = False

    def __post_init__(self):
        norm = tuple(
            tuple(sorted(c.at(None if self.static else ts) for c in sl))
            for ts, sl in enumerate(self.slices)
        )
        object.__setattr__(self, "slices", norm)
        if not norm:
            raise ValueError("a schedule needs at least one slice")
        if self.static and len(norm) != 1:
            raise ValueError("a static schedule has exactly one slice")
        if not self.static and not self.slice_duration_ns > self.guardband_ns >= 0:
            raise ValueError(
                f"need slice_duration_ns > guardband_ns >= 0, got "
                f"{self.slice_duration_ns} and {self.guardband_ns}"
            )

    @classmethod
    def static_topology(cls, circuits: Iterable[Circuit]) -> "OpticalSchedule":
        return cls((tuple(circuits),), slice_duration_ns=1, guardband_ns=0, static=True)

    @property
    def cycle_length(self) -> int:
        return len(self.slices)

    @property
    def node_count(self) -> int:
        nodes = [c.n2 for sl in self.slices for c in sl]
        return max(nodes) + 1 if nodes else 0

    @property
    def cycle_ns(self) -> int:
        return self.cycle_length * self.slice_duration_ns

    def check_feasible(self) -> None:
        for ts, sl in enumerate(self.slices):
            _check_exclusive(sl, f" in slice {ts}")

    def circuits_at(self, ts: Optional[SliceId]) -> tuple[Circuit, ...]:
        if self.static or ts is None:
            if ts is None and not self.static:
                return tuple(c for sl in self.slices for c in sl)
            return self.slices[0]
        return self.slices[ts % self.cycle_length]

    def with_timing(self, slice_duration_ns: int, guardband_ns: int) -> "OpticalSchedule":
        return OpticalSchedule(self.slices, slice_duration_ns, guardband_ns, self.static)

    def port_between(self, node: NodeId, peer: NodeId, ts: Optional[SliceId]) -> Optional[PortId]:
        """Lowest-numbered port of ``node`` with a circuit to ``peer`` in ``ts``."""
        ports = [c.port_of(node) for c in self.circuits_at(ts) if node in (c.n1, c.n2) and c.peer(node) == peer]
        return min(ports) if ports else None

    def next_connection(self, node_count: Optional[int] = None) -> np.ndarray:
        """``out[a, b, p]`` = slices to wait from phase ``p`` until a circuit
        ``a``-``b`` exists (``-1`` if never)."""
        n = node_count or self.node_count
        c = self.cycle_length
        present = np.zeros((n, n, c), dtype=bool)
        for ts, sl in enumerate(self.slices):
            for circ in sl:
                present[circ.n1, circ.n2, ts] = present[circ.n2, circ.n1, ts] = True
        out = np.full((n, n, c), -1, dtype=np.int64)
        for p in range(c):
            for d in range(c):
                hit = present[:, :, (p + d) % c] & (out[:, :, p] < 0)
                out[:, :, p][hit] = d
        return out

    # JSON: slices as arrays of [n1, p1, n2, p2]
    def to_json(self) -> dict:
        return {
            "slice_duration_ns": self.slice_duration_ns,
            "guardband_ns": self.guardband_ns,
            "static": self.static,
            "slices": [[[c.n1, c.port1, c.n2, c.port2] for c in sl] for sl in self.slices],
        }

    @classmethod
    def from_json(cls, data: dict) -> "OpticalSchedule":
        static = bool(data.get("static", False))
        slices = tuple(
            tuple(Circuit(*map(int, c), ts=None if static else ts) for c in sl)
            for ts, sl in enumerate(data["slices"])
        )
        if static:
            return cls(slices, 1, 0, True)
        return cls(slices, int(data.get("slice_duration_ns", 2000)), int(data.get("guardband_ns", 200)))


# ---------------------------------------------------------------- time-flow tables


@dataclass(frozen=True)
class NextHop:
    egress_port: PortId
    dep_ts: Optional[SliceId] = None


@dataclass(frozen=True)
class SourceRoute:
    hops: tuple[tuple[PortId, Optional[SliceId]], ...]


Action = Union[NextHop, SourceRoute]


@dataclass(frozen=True)
class MultipathGroup:
    group_id: int
    mode: str  # "packet" | "flow"
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("packet", "flow"):
            raise ValueError(f"multipath mode must be 'packet' or 'flow', got {self.mode!r}")


@dataclass(frozen=True)
class TimeFlowEntry:
    dst: NodeId
    action: Action
    arr_ts: Optional[SliceId] = None
    src: Optional[NodeId] = None
    group: Optional[MultipathGroup] = None

    @property
    def key(self) -> tuple:
        return (self.arr_ts, self.src, self.dst)

    def to_json(self) -> dict:
        if isinstance(self.action, NextHop):
            action = {"next_hop": {"egress_port": self.action.egress_port, "dep_ts": self.action.dep_ts}}
        else:
            action = {"source_route": [list(h) for h in self.action.hops]}
        out = {"arr_ts": self.arr_ts, "src": self.src, "dst": self.dst, "action": action}
        out["multipath"] = (
            None
            if self.group is None
            else {"group": self.group.group_id, "mode": self.group.mode, "weight": self.group.weight}
        )
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TimeFlowEntry":
        a = data["action"]
        if "next_hop" in a:
            action: Action = NextHop(int(a["next_hop"]["egress_port"]), a["next_hop"].get("dep_ts"))
        else:
            action = SourceRoute(tuple((int(p), d) for p, d in a["source_route"]))
        mp = data.get("multipath")
        group = None if mp is None else MultipathGroup(int(mp["group"]), mp["mode"], float(mp.get("weight", 1.0)))
        return cls(int(data["dst"]), action, data.get("arr_ts"), data.get("src"), group)


class EntryConflict(OptonetError):
    pass


@dataclass(frozen=True)
class TimeFlowTable:
    """Ordered entries; exact fields beat wildcards, then insertion order wins."""

    entries: tuple[TimeFlowEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = {}
        for e in self.entries:
            if e.group is None:
                if e.key in seen:
                    raise EntryConflict(f"duplicate key {e.key}: {seen[e.key]} vs {e}")
                seen[e.key] = e
        index: dict[tuple, list[TimeFlowEntry]] = {}
        for e in self.entries:
            index.setdefault(e.key, []).append(e)
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.entries)

    def add(self, entry: TimeFlowEntry) -> "TimeFlowTable":
        return TimeFlowTable(self.entries + (entry,))

    def candidates(self, arr_ts: Optional[SliceId], src: Optional[NodeId], dst: NodeId) -> list[TimeFlowEntry]:
        """Entries of the highest-precedence matching key."""
        index = self._index  # type: ignore[attr-defined]
        keys = []
        for a in ((arr_ts, None) if arr_ts is not None else (None,)):
            for s in ((src, None) if src is not None else (None,)):
                keys.append((a, s, dst))
        # (exact arr, exact src) > (exact arr, any src) > (any arr, exact src) > wildcard
        for k in keys:
            if k in index:
                return index[k]
        return []

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> "TimeFlowTable":
        return cls(tuple(TimeFlowEntry.from_json(d) for d in data))


def flow_hash(five_tuple: Sequence, seed: int = 0) -> float:
    """Stable hash of a five-tuple to [0, 1)."""
    h = zlib.crc32(repr((seed, tuple(five_tuple))).encode())
    return h / 2**32


def packet_hash(ingress_ts_ns: float, draw: float) -> float:
    h = zlib.crc32(repr((round(float(ingress_ts_ns), 3), draw)).encode())
    return h / 2**32


def _select(members: Sequence[TimeFlowEntry], u: float) -> TimeFlowEntry:
    total = sum(m.group.weight for m in members)  # type: ignore[union-attr]
    x = u * total
    acc = 0.0
    for m in members:
        acc += m.group.weight  # type: ignore[union-attr]
        if x < acc:
            return m
    return members[-1]


def match_entry(
    table: TimeFlowTable,
    arr_ts: Optional[SliceId],
    src: Optional[NodeId],
    dst: NodeId,
    five_tuple: Sequence = (),
    ingress_ts_ns: float = 0.0,
    rng=None,
    seed: int = 0,
) -> TimeFlowEntry:
    """Return the matching entry, resolving multipath groups by hashing.

    Per-flow groups hash the five-tuple; per-packet groups hash the ingress
    timestamp together with a draw from ``rng`` (a ``random.Random``).
    """
    cands = table.candidates(arr_ts, src, dst)
    if not cands:
        raise NoMatch(f"no entry for arr_ts={arr_ts} src={src} dst={dst}")
    if len(cands) == 1 or cands[0].group is None:
        return cands[0]
    if cands[0].group.mode == "flow":
        u = flow_hash(five_tuple, seed)
    else:
        draw = rng.random() if rng is not None else 0.0
        u = packet_hash(ingress_ts_ns, draw)
    return _select(cands, u)


def tables_to_json(tables: dict[NodeId, TimeFlowTable]) -> dict:
    return {str(n): t.to_json() for n, t in sorted(tables.items())}


def tables_from_json(data: dict) -> dict[NodeId, TimeFlowTable]:
    return {int(n): TimeFlowTable.from_json(v) for n, v in data.items()}


# ---------------------------------------------------------------- paths & TEG


@dataclass(frozen=True)
class Path:
    src: NodeId
    dst: NodeId
    hops: tuple[tuple[NodeId, Optional[SliceId]], ...]
    ts: Optional[SliceId] = None
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(tuple(h) for h in self.hops))
        if not self.hops:
            raise ValueError("a path needs at least one hop")
        if self.hops[-1][0] != self.dst:
            raise ValueError(f"path must end at dst {self.dst}, ends at {self.hops[-1][0]}")

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return (self.src,) + tuple(h[0] for h in self.hops)

    def arrival_offset(self, cycle_length: int) -> int:
        """Slices elapsed from ``ts`` to the last departure (0 for static paths)."""
        if self.ts is None:
            return 0
        t = 0
        phase = self.ts
        for _, dep in self.hops:
            t += (dep - phase) % cycle_length
            phase = dep
        return t

    def waiting_slices(self, cycle_length: int) -> int:
        return self.arrival_offset(cycle_length)

    def reweighted(self, weight: float) -> "Path":
        return Path(self.src, self.dst, self.hops, self.ts, weight)


@dataclass(frozen=True)
class TimeExpandedGraph:
    """(node, slice) states with transit and wait edges over one cycle."""

    node_count: int
    cycle_length: int
    transit: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    wait: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    @property
    def states(self) -> list[tuple[int, int]]:
        return [(n, s) for n in range(self.node_count) for s in range(self.cycle_length)]

    @property
    def edges(self):
        return self.transit + self.wait

    def to_networkx(self):
        import networkx as nx

        g = nx.DiGraph()
        g.add_nodes_from(self.states)
        g.add_edges_from(self.transit, kind="transit")
        g.add_edges_from(self.wait, kind="wait")
        return g


def build_teg(schedule: OpticalSchedule, node_count: Optional[int] = None) -> TimeExpandedGraph:
    schedule.check_feasible()
    n = node_count or schedule.node_count
    c = schedule.cycle_length
    transit = []
    for s, sl in enumerate(schedule.slices):
        for circ in sl:
            transit.append(((circ.n1, s), (circ.n2, s)))
            transit.append(((circ.n2, s), (circ.n1, s)))
    wait = [((v, s), (v, (s + 1) % c)) for v in range(n) for s in range(c)]
    return TimeExpandedGraph(n, c, tuple(sorted(transit)), tuple(wait))


def neighbors(schedule: OpticalSchedule, node: NodeId, ts: Optional[SliceId] = None) -> list[NodeId]:
    if ts is not None and not schedule.static and not 0 <= ts < schedule.cycle_length:
        raise ValueError(f"slice {ts} outside cycle of {schedule.cycle_length}")
    out = {c.peer(node) for c in schedule.circuits_at(ts) if node in (c.n1, c.n2)}
    return sorted(out)


def enumerate_paths(
    schedule: OpticalSchedule,
    src: NodeId,
    dst: NodeId,
    ts: Optional[SliceId],
    max_hop: int,
    next_conn: Optional[np.ndarray] = None,
) -> list[Path]:
    """All simple paths of at most ``max_hop`` transits where every hop leaves
    at the first slice its circuit exists (ASAP timing), sorted by
    (arrival offset, hop count, node sequence)."""
    if src == dst:
        raise ValueError("src and dst must differ")
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    if schedule.static or ts is None:
        return _static_simple_paths(schedule, src, dst, max_hop)
    n = max(schedule.node_count, src + 1, dst + 1)
    nc = schedule.next_connection(n) if next_conn is None else next_conn
    c = schedule.cycle_length
    found: list[tuple[int, int, tuple, Path]] = []

    def dfs(node, t, visited, hops):
        phase = (ts + t) % c
        for m in range(n):
            if m in visited:
                continue
            d = nc[node, m, phase]
            if d < 0:
                continue
            t2 = t + int(d)
            h2 = hops + ((m, (ts + t2) % c),)
            if m == dst:
                p = Path(src, dst, h2, ts)
                found.append((t2, len(h2), p.nodes, p))
            elif len(h2) < max_hop:
                dfs(m, t2, visited | {m}, h2)

    dfs(src, 0, {src}, ())
    found.sort(key=lambda x: x[:3])
    return [f[3] for f in found]


def _static_simple_paths(schedule, src, dst, max_hop) -> list[Path]:
    import networkx as nx

    g = nx.Graph()
    g.add_edges_from((c.n1, c.n2) for c in schedule.circuits_at(None))
    if src not in g or dst not in g:
        return []
    out = [
        Path(src, dst, tuple((m, None) for m in p[1:]), None)
        for p in nx.all_simple_paths(g, src, dst, cutoff=max_hop)
    ]
    out.sort(key=lambda p: (len(p.hops), p.nodes))
    return out


def earliest_path(
    schedule: OpticalSchedule,
    src: NodeId,
    dst: NodeId,
    ts: Optional[SliceId],
    max_hop: int,
) -> list[Path]:
    """Paths reaching ``dst`` in the earliest slice from (``src``, ``ts``).

    Waiting consumes slices, not hops. With ``ts=None`` this degenerates to
    shortest-hop routing on one topology instance.
    """
    paths = enumerate_paths(schedule, src, dst, ts, max_hop)
    if not paths:
        raise Unreachable(f"N{dst} unreachable from N{src} at ts={ts} within {max_hop} hops")
    c = schedule.cycle_length
    if schedule.static or ts is None:
        best = len(paths[0].hops)
        return [p for p in paths if len(p.hops) == best]
    best = paths[0].arrival_offset(c)
    return [p for p in paths if p.arrival_offset(c) == best]


def earliest_arrival_table(schedule: OpticalSchedule, dst: NodeId, max_hop: int, node_count: Optional[int] = None):
    """Backward DP: ``E[h][n, p]`` = fewest slices from (n, phase p) to ``dst``
    using at most ``h`` transits (``inf`` if impossible)."""
    n = node_count or schedule.node_count
    c = schedule.cycle_length
    nc = schedule.next_connection(n)
    E = np.full((max_hop + 1, n, c), INF)
    E[:, dst, :] = 0.0
    for h in range(1, max_hop + 1):
        E[h] = E[h - 1]
        for v in range(n):
            if v == dst:
                continue
            for p in range(c):
                best = E[h, v, p]
                for m in range(n):
                    d = nc[v, m, p]
                    if d < 0 or m == v:
                        continue
                    cand = d + E[h - 1, m, (p + d) % c]
                    if cand < best:
                        best = cand
                E[h, v, p] = best
        if np.array_equal(E[h], E[h - 1]):  # fixed point: more hops cannot help
            E[h + 1 :] = E[h]
            break
    return E, nc


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
