"""Circuit and schedule generators for traffic-aware and traffic-oblivious
fabrics, plus feasibility checking and compilation to a fabric lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Optional, Sequence

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Circuit, InfeasibleSchedule, NodeId, OpticalSchedule, OptonetError, PortId, SliceId


class InvalidNodeCount(OptonetError):
    pass


class InvalidGrid(OptonetError):
    pass


class InfeasibleTopology(InfeasibleSchedule):
    def __init__(self, message: str, conflict: tuple[Circuit, Circuit] | None = None):
        super().__init__(message)
        self.conflict = conflict


class ScheduleBuilder:
    """Mutable per-slice circuit sets; ``connect`` enforces port exclusivity."""

    def __init__(self, cycle_length: int = 1, static: bool = False):
        self.static = static
        self.slices: list[list[Circuit]] = [[] for _ in range(cycle_length)]
        self._used: list[set[tuple[int, int]]] = [set() for _ in range(cycle_length)]

    def connect(self, circuit: Circuit) -> bool:
        ts = 0 if circuit.ts is None else circuit.ts
        while ts >= len(self.slices):
            self.slices.append([])
            self._used.append(set())
        used = self._used[ts]
        if any(end in used for end in circuit.ends):
            return False
        used.update(circuit.ends)
        self.slices[ts].append(circuit)
        return True

    def build(self, slice_duration_ns: int = 2000, guardband_ns: int = 200) -> OpticalSchedule:
        if self.static:
            return OpticalSchedule.static_topology(self.slices[0])
        return OpticalSchedule(tuple(tuple(s) for s in self.slices), slice_duration_ns, guardband_ns)


def connect(circuit: Circuit, schedule: ScheduleBuilder) -> bool:
    return schedule.connect(circuit)


def circle_matchings(n: int) -> list[list[tuple[int, int]]]:
    """Perfect matchings M_0..M_{n-2} of the circle-method tournament."""
    if n % 2 or n < 2:
        raise InvalidNodeCount(f"round robin needs an even node count, got {n}")
    m = n - 1
    rounds = []
    for r in range(m):
        pairs = [(r, m)]
        for i in range(1, n // 2):
            a, b = (r + i) % m, (r - i) % m
            pairs.append((min(a, b), max(a, b)))
        rounds.append(sorted(pairs))
    return rounds


def _matchings_to_schedule(
    matchings: Sequence[Sequence[tuple[int, int]]],
    uplinks: int,
    slice_duration_ns: int,
    guardband_ns: int,
) -> OpticalSchedule:
    count = len(matchings)
    cycle = math.ceil(count / uplinks)
    b = ScheduleBuilder(cycle)
    for t in range(cycle):
        for k in range(uplinks):
            for a, c in matchings[(t * uplinks + k) % count]:
                if not b.connect(Circuit(a, k, c, k, t)):
                    raise InfeasibleSchedule(f"generator produced a port conflict at slice {t}")
    return b.build(slice_duration_ns, guardband_ns)


def round_robin(
    node_count: int,
    uplinks: int = 1,
    slice_duration_ns: int = 2000,
    guardband_ns: int = 200,
) -> OpticalSchedule:
    """Rotor-style schedule: uplink ``k`` in slice ``t`` carries matching
    ``(t*uplinks + k) mod (N-1)``, so one cycle covers K_N. Uplinks beyond
    the N-1 matchings repeat matchings, as the last slice of a cycle may."""
    if node_count % 2 or node_count < 2:
        raise InvalidNodeCount(f"round robin needs an even node count, got {node_count}")
    if uplinks < 1:
        raise ValueError(f"uplinks must be >= 1, got {uplinks}")
    return _matchings_to_schedule(circle_matchings(node_count), uplinks, slice_duration_ns, guardband_ns)


def _digits(v: int, r: int, h: int) -> list[int]:
    return [(v // r**d) % r for d in range(h)]


def grid_matchings(side: int, dims: int) -> list[list[tuple[int, int]]]:
    base = circle_matchings(side)
    out = []
    for t in range(dims * (side - 1)):
        d, m = t % dims, (t // dims) % (side - 1)
        pairs = []
        for v in range(side**dims):
            digits = _digits(v, side, dims)
            for a, b in base[m]:
                if digits[d] == a:
                    w = v + (b - a) * side**d
                    pairs.append((v, w))
        out.append(sorted(pairs))
    return out


def multidim_round_robin(
    side: int,
    dims: int,
    uplinks: int = 1,
    node_count: Optional[int] = None,
    slice_duration_ns: int = 2000,
    guardband_ns: int = 200,
) -> OpticalSchedule:
    """Round robin per dimension of an ``side**dims`` grid, dimension
    ``t mod dims`` active in slice ``t``."""
    if node_count is not None and node_count != side**dims:
        raise InvalidGrid(f"node_count {node_count} != {side}^{dims}")
    if side % 2 or side < 2:
        raise InvalidGrid(f"grid side must be even, got {side}")
    if dims < 1:
        raise InvalidGrid("dims must be >= 1")
    return _matchings_to_schedule(grid_matchings(side, dims), uplinks, slice_duration_ns, guardband_ns)


def _sym(tm) -> np.ndarray:
    a = np.asarray(tm, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("traffic matrix must be square")
    return a + a.T


def edmonds_matching(tm) -> list[Circuit]:
    """Maximum-weight perfect matching, weight ``tm[i][j] + tm[j][i]``; both
    ends use uplink 0. Ties resolve by the blossom solver's fixed order."""
    w = _sym(tm)
    n = w.shape[0]
    if n % 2:
        raise InvalidNodeCount(f"perfect matching needs an even node count, got {n}")
    g = nx.Graph()
    g.add_nodes_from(range(n))
    # +1 offset keeps zero-demand edges eligible without changing the argmax
    for i, j in combinations(range(n), 2):
        g.add_edge(i, j, weight=float(w[i, j]) + 1.0)
    m = nx.max_weight_matching(g, maxcardinality=True)
    return sorted(Circuit(min(a, b), 0, max(a, b), 0) for a, b in m)


def matching_weight(tm, circuits: Iterable[Circuit]) -> float:
    w = _sym(tm)
    return float(sum(w[c.n1, c.n2] for c in circuits))


@dataclass(frozen=True)
class BvnDecomposition:
    normalized: np.ndarray
    weights: tuple[float, ...]
    permutations: tuple[tuple[int, ...], ...]

    def reconstruct(self) -> np.ndarray:
        n = self.normalized.shape[0]
        out = np.zeros((n, n))
        for w, perm in zip(self.weights, self.permutations):
            out[np.arange(n), perm] += w
        return out


def doubly_stochastic(tm) -> np.ndarray:
    """Scale by the largest line sum, then fill row/column deficits with a
    rank-one residual so every line sums to one."""
    a = np.asarray(tm, dtype=float).copy()
    np.fill_diagonal(a, 0.0)
    if (a < 0).any():
        raise ValueError("traffic matrix entries must be nonnegative")
    n = a.shape[0]
    scale = max(a.sum(axis=1).max(), a.sum(axis=0).max())
    if scale <= 0:
        off = np.ones((n, n)) - np.eye(n)
        return off / (n - 1)
    a /= scale
    r = 1.0 - a.sum(axis=1)
    c = 1.0 - a.sum(axis=0)
    s = r.sum()
    if s > 1e-15:
        a += np.outer(r, c) / s
    return a


def bvn_decompose(tm, eps: float = 1e-12) -> BvnDecomposition:
    m = doubly_stochastic(tm)
    n = m.shape[0]
    rest = m.copy()
    weights, perms = [], []
    while rest.max() > eps and len(perms) < n * n:
        support = rest > eps
        cost = np.where(support, -rest, 1e6)
        rows, cols = linear_sum_assignment(cost)
        if not support[rows, cols].all():
            break
        w = float(rest[rows, cols].min())
        rest[rows, cols] -= w
        rest[np.abs(rest) <= eps] = 0.0
        weights.append(w)
        perms.append(tuple(int(x) for x in cols))
    return BvnDecomposition(m, tuple(weights), tuple(perms))


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer allocation of ``total`` proportional to ``weights``; each
    positive weight gets at least one unit when ``total`` allows it."""
    k = len(weights)
    if k == 0:
        return []
    wsum = float(sum(weights))
    if total >= k:
        base = [1] * k
        spare = total - k
    else:
        base = [0] * k
        spare = total
    quotas = [spare * w / wsum for w in weights]
    alloc = [b + int(math.floor(q)) for b, q in zip(base, quotas)]
    left = total - sum(alloc)
    order = sorted(range(k), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    for i in order[:left]:
        alloc[i] += 1
    return alloc


def bvn_schedule(
    tm,
    total_slices: int,
    slice_duration_ns: int = 2000,
    guardband_ns: int = 200,
) -> OpticalSchedule:
    """Slices allocated to BvN permutations by weight; each permutation pair
    ``i -> j`` becomes circuit ``{i, j}`` on uplink 0 unless that port is
    already taken in the slice (non-involutive cycles cannot all fit)."""
    n = np.asarray(tm).shape[0]
    if n < 2:
        raise InvalidNodeCount("BvN needs at least 2 nodes")
    if total_slices < 1:
        raise ValueError("total_slices must be positive")
    dec = bvn_decompose(tm)
    alloc = largest_remainder(dec.weights, total_slices)
    b = ScheduleBuilder(total_slices)
    t = 0
    for perm, count in zip(dec.permutations, alloc):
        for _ in range(count):
            for i, j in enumerate(perm):
                if i != j:
                    b.connect(Circuit(min(i, j), 0, max(i, j), 0, t))
            t += 1
    return b.build(slice_duration_ns, guardband_ns)


def uniform_mesh(node_count: int, uplinks: int) -> list[Circuit]:
    """Uplink ``k`` of every node joins matching ``k`` of the circle method."""
    ms = circle_matchings(node_count)
    out = []
    for k in range(uplinks):
        for a, b in ms[k % len(ms)]:
            out.append(Circuit(a, k, b, k))
    return sorted(out)


def _served(w: np.ndarray, circuits: Iterable[Circuit]) -> float:
    return float(sum(w[c.n1, c.n2] for c in circuits))


def _connected(circuits: Iterable[Circuit], n: int) -> bool:
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((c.n1, c.n2) for c in circuits)
    return nx.is_connected(g)


def jupiter_evolve(
    tm=None,
    prev: Optional[Sequence[Circuit]] = None,
    change_budget: int = 0,
    node_count: Optional[int] = None,
    uplinks: int = 1,
) -> list[Circuit]:
    """Uniform mesh when no demand is known; otherwise hill-climb on 2-opt
    circuit swaps from ``prev``, changing at most ``change_budget`` circuits.
    Swaps that would disconnect a connected topology are skipped.

    The objective is a served-demand proxy, not a WCMP-aware optimizer.
    """
    if change_budget < 0:
        raise ValueError("change_budget must be >= 0")
    if prev is None:
        if tm is not None:
            node_count = np.asarray(tm).shape[0]
        if node_count is None:
            raise ValueError("need node_count, tm or prev")
        prev = uniform_mesh(node_count, uplinks)
        if tm is None:
            return list(prev)
    cur = sorted(Circuit(c.n1, c.port1, c.n2, c.port2) for c in prev)
    if tm is None or change_budget == 0:
        return cur
    w = _sym(tm)
    n = w.shape[0]
    base = set(cur)
    keep_connected = _connected(base, n)
    while True:
        best_gain, best = 0.0, None
        for i, j in combinations(range(len(cur)), 2):
            a, b = cur[i], cur[j]
            ends = {a.n1, a.n2, b.n1, b.n2}
            if len(ends) < 4:
                continue
            old = w[a.n1, a.n2] + w[b.n1, b.n2]
            for x, y in (
                (Circuit(a.n1, a.port1, b.n1, b.port1), Circuit(a.n2, a.port2, b.n2, b.port2)),
                (Circuit(a.n1, a.port1, b.n2, b.port2), Circuit(a.n2, a.port2, b.n1, b.port1)),
            ):
                gain = w[x.n1, x.n2] + w[y.n1, y.n2] - old
                if gain <= best_gain:
                    continue
                trial = set(cur) - {a, b} | {x, y}
                if len(trial - base) > change_budget:
                    continue
                if keep_connected and not _connected(trial, n):
                    continue
                best_gain, best = gain, (i, j, x, y)
        if best is None:
            return sorted(cur)
        i, j, x, y = best
        cur = sorted([c for k, c in enumerate(cur) if k not in (i, j)] + [x, y])


def sorn(
    tm,
    uplinks: int = 1,
    top_k: int = 1,
    slice_duration_ns: int = 2000,
    guardband_ns: int = 200,
) -> OpticalSchedule:
    """Skewed round robin: the ``top_k`` circle-method matchings carrying the
    most demand appear twice per cycle."""
    w = _sym(tm)
    n = w.shape[0]
    ms = circle_matchings(n)
    demand = [sum(w[a, b] for a, b in m) for m in ms]
    hot = sorted(range(len(ms)), key=lambda i: (-demand[i], i))[: max(0, top_k)]
    seq = list(ms) + [ms[i] for i in sorted(hot)]
    return _matchings_to_schedule(seq, uplinks, slice_duration_ns, guardband_ns)


TopologyGenerator = Callable[..., object]

GENERATORS: dict[str, TopologyGenerator] = {
    "round_robin": round_robin,
    "multidim_round_robin": multidim_round_robin,
    "edmonds": edmonds_matching,
    "bvn": bvn_schedule,
    "jupiter": jupiter_evolve,
    "sorn": sorn,
}


@dataclass(frozen=True)
class FabricLookup:
    """Slice-indexed connectivity: ``table[ts][(node, port)] = (peer, peer_port)``.

    A static topology has a single wildcard slice stored under ``None``.
    """

    table: dict
    cycle_length: int
    static: bool

    def peer(self, node: NodeId, port: PortId, ts: Optional[SliceId]) -> Optional[tuple[NodeId, PortId]]:
        key = None if self.static else ts % self.cycle_length
        return self.table[key].get((node, port))


def deploy_topo(topology) -> FabricLookup:
    """Check per-slice port exclusivity and compile to a fabric lookup."""
    if isinstance(topology, OpticalSchedule):
        schedule = topology
    else:
        schedule = OpticalSchedule.static_topology(list(topology))
    table: dict = {}
    for ts, sl in enumerate(schedule.slices):
        key = None if schedule.static else ts
        ports: dict = {}
        owner: dict = {}
        for c in sl:
            for end in c.ends:
                if end in owner:
                    raise InfeasibleTopology(
                        f"port N{end[0]}.p{end[1]} used by {owner[end]} and {c}", (owner[end], c)
                    )
                owner[end] = c
            ports[(c.n1, c.port1)] = (c.n2, c.port2)
            ports[(c.n2, c.port2)] = (c.n1, c.port1)
        table[key] = ports
    return FabricLookup(table, schedule.cycle_length, schedule.static)
