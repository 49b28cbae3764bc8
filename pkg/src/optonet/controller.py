"""Controller workflows: traffic-oblivious preload, the traffic-aware
reconfiguration loop, hybrid composition and the guardband calculator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import Circuit, EntryConflict, OpticalSchedule, TimeFlowTable, Unreachable
from .routing import deploy_routing
from .simulator import Simulator
from .topology import InfeasibleTopology, deploy_topo
from .workload import collect


class Network:
    """Control-plane handle onto a running simulation."""

    def __init__(self, sim: Simulator):
        self.sim = sim

    @property
    def now(self) -> float:
        return self.sim.now

    def deploy_topo(self, schedule: OpticalSchedule) -> None:
        deploy_topo(schedule)  # feasibility check before touching the fabric
        self.sim.set_schedule(schedule)

    def deploy_routing(self, tables: dict[int, TimeFlowTable]) -> None:
        for node in sorted(tables):
            self.sim.install_tables(node, tables[node])

    def retire_stale(self, nodes: Iterable[int]) -> None:
        for node in nodes:
            self.sim.retire_tables(node, keep=1)

    def collect(self, interval_ns: float) -> np.ndarray:
        return collect(interval_ns, self.sim.traffic_log, self.sim.now)

    def buffer_usage(self, node: int, port: int, interval_ns: Optional[float] = None) -> list[int]:
        return self.sim.metrics.buffer_usage(node, port, interval_ns)

    def bw_usage(self, node: int, port: int, interval_ns: Optional[float] = None) -> list[int]:
        return self.sim.metrics.bw_usage(node, port, interval_ns)


def preload_to(schedule: OpticalSchedule, tables: dict[int, TimeFlowTable], sim: Simulator) -> None:
    """Install a full schedule and all tables before time 0."""
    if sim.metrics.events:
        raise RuntimeError("preload_to must run before the simulation starts")
    deploy_topo(schedule)
    sim.set_schedule(schedule, initial=True)
    for node in sorted(tables):
        sim.install_tables(node, tables[node])


@dataclass
class TaLoop:
    """State of a running traffic-aware loop; inspectable after the run."""

    interval_ns: float
    iterations: int = 0
    reconfigurations: int = 0
    errors: list = field(default_factory=list)
    matrices: list = field(default_factory=list)
    prev: Optional[list] = None


def retire_delay(sim: Simulator) -> float:
    """How long superseded tables stay installed after a switch.

    One propagation delay drains a static fabric. On a rotating fabric a
    packet may sit in a calendar queue for up to K slices before its next
    hop, so the old entries are kept for that long as well.
    """
    prop = sim.cfg.propagation_delay_ns
    if sim.static:
        return prop
    return sim.cfg.K * sim.cfg.slice_duration_ns + prop


def run_ta_loop(
    topo_algo: Callable[[np.ndarray, Optional[list]], Sequence[Circuit]],
    routing_algo: Callable[[OpticalSchedule, np.ndarray], Sequence],
    interval_ns: float,
    sim: Simulator,
    lookup: str = "hop",
    multipath: str = "flow",
    compose: Optional[Callable[[Sequence[Circuit]], OpticalSchedule]] = None,
    match_src: Optional[bool] = None,
) -> TaLoop:
    """Schedule a reconfiguration every ``interval_ns``.

    Each iteration collects the traffic matrix, computes new circuits and
    paths, installs the new tables at higher precedence, switches the
    circuits at the same instant and retires the old tables once in-flight
    packets have drained (see :func:`retire_delay`). A failing iteration is recorded and skipped.

    ``topo_algo`` may return circuits (a static topology, or the input of
    ``compose``) or a complete rotating schedule. ``match_src`` defaults to
    destination-based entries on static topologies and source-keyed entries
    on rotating ones.
    """
    net = Network(sim)
    loop = TaLoop(interval_ns, prev=list(sim.schedule.circuits_at(0 if not sim.static else None)))
    build = compose or OpticalSchedule.static_topology

    def step(s: Simulator) -> None:
        if s.unfinished == 0 and s.pending_starts == 0:
            return
        loop.iterations += 1
        tm = net.collect(interval_ns)
        loop.matrices.append(tm)
        try:
            out = topo_algo(tm, loop.prev)
            if isinstance(out, OpticalSchedule):
                schedule, circuits = out, loop.prev
            else:
                circuits = list(out)
                schedule = build(circuits)
            if schedule.static != s.static:
                raise InfeasibleTopology("cannot switch between static and rotating fabrics mid-run")
            deploy_topo(schedule)
            by_src = (not schedule.static) if match_src is None else match_src
            tables = deploy_routing(routing_algo(schedule, tm), schedule, lookup, multipath, by_src)
        except (InfeasibleTopology, EntryConflict, Unreachable) as e:
            loop.errors.append((s.now, f"{type(e).__name__}: {e}"))
        else:
            net.deploy_routing(tables)
            net.deploy_topo(schedule)
            loop.prev = circuits
            loop.reconfigurations += 1
            nodes = sorted(tables)
            s.call_at(s.now + retire_delay(s), lambda s2: net.retire_stale(nodes))
        s.call_at(s.now + interval_ns, step)

    sim.call_at(interval_ns, step)
    return loop


def hybrid_schedule(to_schedule: OpticalSchedule, ta_circuits: Sequence[Circuit]) -> OpticalSchedule:
    """Overlay fixed circuits on every slice of a rotating schedule.

    The two parts must use disjoint ports; a clash raises
    :class:`InfeasibleTopology`.
    """
    fixed = [Circuit(c.n1, c.port1, c.n2, c.port2) for c in ta_circuits]
    slices = [list(to_schedule.circuits_at(t)) + fixed for t in range(to_schedule.cycle_length)]
    merged = OpticalSchedule(slices, to_schedule.slice_duration_ns, to_schedule.guardband_ns)
    deploy_topo(merged)
    return merged


def raw_guardband(
    rotation_variance_ns: float,
    estimator_error_bytes: float,
    bandwidth_bps: float,
    sync_error_ns: float,
) -> float:
    """Rotation variance plus estimator drain time plus twice the sync error."""
    vals = (rotation_variance_ns, estimator_error_bytes, bandwidth_bps, sync_error_ns)
    if any(v < 0 for v in vals):
        raise ValueError("guardband inputs must be >= 0")
    drain = 0
    if estimator_error_bytes:
        if not bandwidth_bps:
            raise ValueError("bandwidth must be positive when the estimator error is nonzero")
        # exact rational arithmetic so 725 B at 100 Gbps is 58 ns, not 59
        drain = math.ceil(Fraction(estimator_error_bytes) * 8 * 10**9 / Fraction(bandwidth_bps))
    return rotation_variance_ns + drain + 2 * sync_error_ns


def guardband_calc(
    rotation_variance_ns: float,
    estimator_error_bytes: float,
    bandwidth_bps: float,
    sync_error_ns: float,
    headroom_ns: float = 0.0,
) -> tuple[float, float]:
    """(guardband, minimum slice) in ns; the minimum slice keeps the duty
    cycle at 90% or more."""
    if headroom_ns < 0:
        raise ValueError("headroom must be >= 0")
    guard = raw_guardband(rotation_variance_ns, estimator_error_bytes, bandwidth_bps, sync_error_ns) + headroom_ns
    return guard, 10 * guard
