"""Brute-force enumeration of timed hop sequences, for cross-checking the
path search in small fabrics."""

from __future__ import annotations

from dataclasses import dataclass

from .core import OpticalSchedule, OptonetError, Unreachable

MAX_ORACLE_NODES = 10


class TooLarge(OptonetError):
    pass


@dataclass(frozen=True)
class OracleReport:
    src: int
    dst: int
    ts: int
    max_hop: int
    earliest_arrival: int  # absolute slice, may exceed the cycle
    path_count: int
    witnesses: tuple[tuple[tuple[int, int], ...], ...]

    def to_json(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "ts": self.ts,
            "max_hop": self.max_hop,
            "earliest_arrival": self.earliest_arrival,
            "path_count": self.path_count,
            "witnesses": [[list(h) for h in w] for w in self.witnesses],
        }


def exhaustive(schedule: OpticalSchedule, src: int, dst: int, ts: int, max_hop: int) -> OracleReport:
    """Every loop-free hop sequence of at most ``max_hop`` hops, where each
    hop may leave in any slice of the next full cycle that has the circuit.

    Hops are ``(next_node, departure_slice)`` with absolute slice numbers.
    """
    n = schedule.node_count
    if n > MAX_ORACLE_NODES:
        raise TooLarge(f"oracle limited to {MAX_ORACLE_NODES} nodes, schedule has {n}")
    c = 1 if schedule.static else schedule.cycle_length
    adj: list[list[set[int]]] = [[set() for _ in range(n)] for _ in range(c)]
    for t in range(c):
        for circ in schedule.circuits_at(None if schedule.static else t):
            adj[t][circ.n1].add(circ.n2)
            adj[t][circ.n2].add(circ.n1)
    best = None
    count = 0
    witnesses: list = []

    def walk(node: int, now: int, visited: set[int], hops: list) -> None:
        nonlocal best, count, witnesses
        if node == dst and hops:
            count += 1
            if best is None or now < best:
                best, witnesses = now, [tuple(hops)]
            elif now == best:
                witnesses.append(tuple(hops))
            return
        if len(hops) == max_hop:
            return
        for wait in range(c):
            t = now + wait
            for nxt in sorted(adj[t % c][node]):
                if nxt in visited:
                    continue
                hops.append((nxt, t))
                visited.add(nxt)
                walk(nxt, t, visited, hops)
                visited.discard(nxt)
                hops.pop()

    if src == dst:
        raise ValueError("src and dst must differ")
    walk(src, ts, {src}, [])
    if best is None:
        raise Unreachable(f"N{dst} unreachable from N{src} at ts={ts} within {max_hop} hops")
    return OracleReport(src, dst, ts, max_hop, best, count, tuple(sorted(witnesses)))
