"""Deterministic discrete-event simulator of switches with calendar queues,
an emulated optical fabric, hosts and the infrastructure services."""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    NextHop,
    NoMatch,
    OpticalSchedule,
    OptonetError,
    TimeFlowTable,
    match_entry,
)
from .topology import FabricLookup, deploy_topo
from .workload import TrafficLog


class HorizonExceeded(OptonetError):
    def __init__(self, incomplete: list[int], metrics: "Metrics"):
        super().__init__(f"{len(incomplete)} flows incomplete at horizon: {incomplete[:10]}")
        self.incomplete = incomplete
        self.metrics = metrics


# enqueue outcomes
ENQUEUED = "enqueued"
CONGESTION_FULL = "congestion_full"
THRESHOLD = "threshold"
BEYOND_HORIZON = "beyond_horizon"
BUFFER_OVERFLOW = "buffer_overflow"


@dataclass
class SimConfig:
    node_count: int
    uplinks: int = 1
    hosts_per_node: int = 1
    link_bandwidth_bps: float = 100e9
    slice_duration_ns: int = 2000
    guardband_ns: int = 200
    K: int = 16
    mtu_bytes: int = 1500
    update_interval_ns: float = 50.0
    congestion_threshold_bytes: Optional[float] = None
    rotation_jitter_ns: tuple[float, float] = (0.0, 0.0)
    sync_error_ns: float = 0.0
    reconfig_ns: float = 0.0
    propagation_delay_ns: float = 100.0
    congestion_detection: bool = False
    congestion_reaction: object = "drop"  # "drop" | "defer" | callable hook
    pushback: bool = False
    offloading: bool = False
    flow_pausing: bool = False
    elephant_threshold_bytes: float = 1_000_000
    notify_lead_ns: float = 1000.0
    offload_horizon: Optional[int] = None  # ranks >= this park on hosts; default K
    transport: str = "none"  # "none" (open loop) | "aimd" (reorder-sensitive window)
    dupack_threshold: int = 3
    ack_delay_ns: float = 1000.0
    init_cwnd: float = 10.0
    max_cwnd: float = 4096.0
    port_buffer_bytes: Optional[float] = None
    telemetry_interval_ns: Optional[float] = None
    horizon_ns: Optional[float] = None
    estimator_audit: bool = False
    check_invariants: bool = True
    trace: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.rotation_jitter_ns, (int, float)):
            self.rotation_jitter_ns = (0.0, float(self.rotation_jitter_ns))
        self.rotation_jitter_ns = tuple(float(x) for x in self.rotation_jitter_ns)
        self.validate()

    def validate(self) -> None:
        if not self.guardband_ns < self.slice_duration_ns:
            raise ValueError(f"guardband {self.guardband_ns} must be below slice duration {self.slice_duration_ns}")
        if self.guardband_ns < 0:
            raise ValueError("guardband must be >= 0")
        if self.update_interval_ns <= 0:
            raise ValueError("update_interval_ns must be positive")
        for name in ("propagation_delay_ns", "sync_error_ns", "reconfig_ns", "notify_lead_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.rotation_jitter_ns
        if not 0 <= lo <= hi:
            raise ValueError(f"bad rotation jitter range {self.rotation_jitter_ns}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.offloading and self.K < 2:
            raise ValueError("buffer offloading needs K >= 2 so returned packets have a queue")
        if self.offload_horizon is not None and not 1 <= self.offload_horizon <= self.K:
            raise ValueError(f"offload_horizon must be in [1, K], got {self.offload_horizon}")
        if self.mtu_bytes < 1 or self.link_bandwidth_bps <= 0:
            raise ValueError("mtu and bandwidth must be positive")
        if self.transport not in ("none", "aimd"):
            raise ValueError(f"transport must be 'none' or 'aimd', got {self.transport!r}")
        if self.dupack_threshold < 1 or self.init_cwnd < 1 or self.max_cwnd < self.init_cwnd:
            raise ValueError("bad window transport parameters")
        r = self.congestion_reaction
        if not (callable(r) or r in ("drop", "defer")):
            raise ValueError(f"congestion_reaction must be 'drop', 'defer' or callable, got {r!r}")

    def to_json(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if callable(v):
                v = getattr(v, "__name__", "hook")
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, data: dict) -> "SimConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "rotation_jitter_ns" in known and isinstance(known["rotation_jitter_ns"], list):
            known["rotation_jitter_ns"] = tuple(known["rotation_jitter_ns"])
        return cls(**known)


@dataclass(eq=False)
class Packet:
    pid: int
    flow_id: int
    seq: int
    size_bytes: int
    src_host: int
    dst_host: int
    src_node: int
    dst_node: int
    ingress_ts_ns: float = 0.0
    ingress_phase: int = 0
    route: Optional[list] = None
    visits: list = field(default_factory=list)
    abs_dep: int = 0
    arr_abs: int = 0
    rank: int = 0
    queue_delay: float = 0.0
    hop_arrival: float = 0.0
    hop_planned: Optional[int] = None  # first departure slice chosen at this hop
    congestion_delay: float = 0.0
    returned: bool = False


@dataclass(eq=False)
class FlowState:
    flow_id: int
    src_host: int
    dst_host: int
    size_bytes: int
    arrival_ns: float
    sent: int = 0
    next_seq: int = 0
    delivered: int = 0
    dropped: int = 0
    max_seq: int = -1
    reorders: int = 0
    finish_ns: Optional[float] = None
    # window transport state
    cwnd: float = 0.0
    ssthresh: float = math.inf
    inflight: int = 0
    rcv_next: int = 0
    ooo: set = field(default_factory=set)
    dupacks: int = 0
    recover: int = -1


class CalendarQueueBank:
    """K calendar queues of one egress port with true and estimated occupancy."""

    def __init__(self, K: int, quantum_bytes: float, interval_ns: float):
        self.K = K
        self.queues = [deque() for _ in range(K)]
        self.true = [0] * K
        self.est = [0.0] * K
        self.paused = [True] * K
        self.paused[0] = False
        self.active = 0
        self.quantum = quantum_bytes
        self.interval = interval_ns
        self.last_settle = 0.0
        self.win = (0.0, math.inf)
        self.total = 0
        self.peak = 0

    def target(self, rank: int) -> int:
        return (self.active + rank) % self.K

    def settle(self, now: float) -> None:
        """Apply the line-rate decrements of ticks in (last, now] that fall in
        the transmit window of the active queue."""
        a, b = self.last_settle, now
        if b <= a:
            return
        ws, we = self.win
        lo = max(a, ws - 1e-9)
        hi = min(b, we - 1e-9)
        if hi > lo:
            T = self.interval
            n = math.floor(hi / T) - math.floor(lo / T)
            if n > 0:
                self.est[self.active] = max(0.0, self.est[self.active] - n * self.quantum)
        self.last_settle = now

    def add(self, q: int, pkt: Packet) -> None:
        self.queues[q].append(pkt)
        self.true[q] += pkt.size_bytes
        self.est[q] += pkt.size_bytes
        self.total += pkt.size_bytes
        if self.total > self.peak:
            self.peak = self.total

    def pop(self) -> Packet:
        q = self.active
        pkt = self.queues[q].popleft()
        self.true[q] -= pkt.size_bytes
        self.total -= pkt.size_bytes
        return pkt

    def rotate(self, new_abs: int, window: tuple[float, float]) -> None:
        self.paused[self.active] = True
        self.active = new_abs % self.K
        self.paused[self.active] = False
        self.win = window


@dataclass
class Metrics:
    fct_ns: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    injected_bytes: int = 0
    delivered_bytes: int = 0
    dropped_bytes: dict = field(default_factory=dict)
    dropped_packets: dict = field(default_factory=dict)
    delivered_packets: int = 0
    reorders: dict = field(default_factory=dict)
    port_buffer: dict = field(default_factory=dict)
    port_tx_bytes: dict = field(default_factory=dict)
    switch_buffer: dict = field(default_factory=dict)
    throughput: list = field(default_factory=list)
    sample_interval_ns: float = 0.0
    estimator_max_error_bytes: float = 0.0
    estimator_dequeue_samples: list = field(default_factory=list)
    estimator_min_margin_bytes: float = 0.0
    pushback_messages: int = 0
    offloaded_packets: int = 0
    return_missed: int = 0
    deferred_packets: int = 0
    slice_misses: int = 0
    reoriginated: int = 0
    window_cuts: int = 0
    queue_delay_sum_ns: float = 0.0
    congestion_delay_sum_ns: float = 0.0
    latency_sum_ns: float = 0.0
    switch_peak_bytes: int = 0
    invariant_violations: list = field(default_factory=list)
    end_time_ns: float = 0.0
    events: int = 0

    # ---- derived values
    @property
    def total_dropped_bytes(self) -> int:
        return int(sum(self.dropped_bytes.values()))

    @property
    def loss_rate(self) -> float:
        return self.total_dropped_bytes / self.injected_bytes if self.injected_bytes else 0.0

    @property
    def mean_queue_delay_ns(self) -> float:
        return self.queue_delay_sum_ns / self.delivered_packets if self.delivered_packets else 0.0

    @property
    def mean_congestion_delay_ns(self) -> float:
        """Queueing beyond the planned departure window: slice misses,
        deferrals and waiting behind other packets in an open window."""
        return self.congestion_delay_sum_ns / self.delivered_packets if self.delivered_packets else 0.0

    def fct_percentile(self, q: float, flow_ids=None) -> float:
        vals = [v for k, v in self.fct_ns.items() if flow_ids is None or k in flow_ids]
        return float(np.percentile(vals, q)) if vals else float("nan")

    def switch_buffer_percentile(self, q: float) -> float:
        vals = [v for series in self.switch_buffer.values() for v in series]
        return float(np.percentile(vals, q)) if vals else 0.0

    def telemetry(self, node: int, port: int, interval_ns: Optional[float] = None) -> list[tuple[int, int]]:
        """(max buffer bytes, transmitted bits) per interval for one port."""
        buf = self.port_buffer.get((node, port), [])
        tx = self.port_tx_bytes.get((node, port), [])
        step = 1 if interval_ns is None else max(1, round(interval_ns / self.sample_interval_ns))
        out = []
        for i in range(0, len(buf), step):
            out.append((int(max(buf[i : i + step])), int(8 * sum(tx[i : i + step]))))
        return out

    def buffer_usage(self, node: int, port: int, interval_ns: Optional[float] = None) -> list[int]:
        return [b for b, _ in self.telemetry(node, port, interval_ns)]

    def bw_usage(self, node: int, port: int, interval_ns: Optional[float] = None) -> list[int]:
        return [t for _, t in self.telemetry(node, port, interval_ns)]

    def summary(self) -> dict:
        fcts = list(self.fct_ns.values())
        pct = {}
        for name, q in (("p50", 50), ("p95", 95), ("p99", 99), ("p999", 99.9)):
            pct[name] = float(np.percentile(fcts, q)) if fcts else None
        dur = self.end_time_ns
        return {
            "flows_completed": len(fcts),
            "flows_total": len(self.flows),
            "fct_ns": pct,
            "throughput_bps": 8e9 * self.delivered_bytes / dur if dur else 0.0,
            "loss_rate": self.loss_rate,
            "reorder_events": int(sum(self.reorders.values())),
            "mean_queue_delay_ns": self.mean_queue_delay_ns,
            "mean_congestion_delay_ns": self.mean_congestion_delay_ns,
            "switch_buffer_p999_bytes": self.switch_buffer_percentile(99.9),
            "switch_peak_bytes": self.switch_peak_bytes,
            "pushback_messages": self.pushback_messages,
            "offloaded_packets": self.offloaded_packets,
        }

    def to_json(self) -> dict:
        return {
            "summary": self.summary(),
            "injected_bytes": self.injected_bytes,
            "delivered_bytes": self.delivered_bytes,
            "delivered_packets": self.delivered_packets,
            "dropped_bytes": dict(sorted(self.dropped_bytes.items())),
            "dropped_packets": dict(sorted(self.dropped_packets.items())),
            "fct_ns": [[k, v] for k, v in sorted(self.fct_ns.items())],
            "reorders": [[k, v] for k, v in sorted(self.reorders.items()) if v],
            "estimator_max_error_bytes": self.estimator_max_error_bytes,
            "pushback_messages": self.pushback_messages,
            "offloaded_packets": self.offloaded_packets,
            "return_missed": self.return_missed,
            "deferred_packets": self.deferred_packets,
            "slice_misses": self.slice_misses,
            "reoriginated": self.reoriginated,
            "window_cuts": self.window_cuts,
            "switch_peak_bytes": self.switch_peak_bytes,
            "sample_interval_ns": self.sample_interval_ns,
            "throughput_bytes_per_interval": self.throughput,
            "invariant_violations": self.invariant_violations[:100],
            "end_time_ns": self.end_time_ns,
            "events": self.events,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


# event kinds
_FLOW, _HOST_DONE, _HOST_WAKE, _ARRIVE, _ROTATE, _TX_DONE, _KICK, _DELIVER = range(8)
_PB_SWITCH, _PB_HOST, _OFF_HOST, _RETURN, _SAMPLE, _TICK, _CALL, _ACK = range(8, 16)
_RET_WAKE, _RET_DONE = range(16, 18)


class Host:
    def __init__(self, hid: int, node: int):
        self.hid = hid
        self.node = node
        self.flows: dict[int, deque] = {}
        self.order: list[int] = []
        self.rr = 0
        self.busy = False
        self.wake_at = math.inf
        self.blocks: dict[tuple[int, int], float] = {}
        self.down_free = 0.0
        self.returns: list = []  # offloaded packets: (due_ns, pid, pkt, port)
        self.ret_wake = math.inf


class Simulator:
    """One simulation instance; strictly single-threaded.

    ``tables`` maps node -> :class:`TimeFlowTable`. ``workload`` is a
    sequence of flow specs with ``flow_id, src_host, dst_host, size_bytes,
    arrival_time_ns``.
    """

    def __init__(self, config: SimConfig, schedule: OpticalSchedule, tables: dict, workload: Sequence = ()):
        self.cfg = config
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.metrics = Metrics()
        self.trace: list = []
        self.rng_jitter = random.Random(config.seed * 1000003 + 1)
        self.rng_path = random.Random(config.seed * 1000003 + 2)
        self.rng_offload = random.Random(config.seed * 1000003 + 3)
        n, u = config.node_count, config.uplinks
        self.B = float(config.link_bandwidth_bps)
        quantum = self.B * config.update_interval_ns / 8e9
        self.banks = [[CalendarQueueBank(config.K, quantum, config.update_interval_ns) for _ in range(u)] for _ in range(n)]
        self.port_busy = [[False] * u for _ in range(n)]
        self.node_abs = [0] * n
        self.node_start = [0.0] * n
        self.node_total = [0] * n
        self.node_peak = [0] * n
        self.port_peak = [[0] * u for _ in range(n)]
        self.port_tx = [[0] * u for _ in range(n)]
        self.hosts = [Host(h, h // config.hosts_per_node) for h in range(n * config.hosts_per_node)]
        self.tables: dict[int, list[TimeFlowTable]] = {v: [] for v in range(n)}
        self.flows: dict[int, FlowState] = {}
        self.unfinished = 0
        self.pending_starts = 0
        self.pid = 0
        self.sample_deliv = 0
        self.pb_sent: dict = {}
        self.traffic_log = TrafficLog(n)
        self.set_schedule(schedule, initial=True)
        for node, table in (tables or {}).items():
            self.install_tables(node, table)
        for f in workload:
            self.add_flow(f)
        self.tick_T = config.update_interval_ns
        self.offload_horizon = config.offload_horizon or config.K

    # ------------------------------------------------------------ plumbing
    def _push(self, t: float, kind: int, a=None, b=None, c=None) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, a, b, c))

    def _trace(self, kind: str, node=None, port=None, queue=None, pid=None) -> None:
        if self.cfg.trace:
            self.trace.append((self.now, kind, node, port, queue, pid))

    def call_at(self, t: float, fn: Callable[["Simulator"], None]) -> None:
        """Run ``fn(sim)`` as an ordinary event at time ``t``."""
        self._push(t, _CALL, fn)

    def set_schedule(self, schedule: OpticalSchedule, initial: bool = False) -> None:
        if not schedule.static and (
            schedule.slice_duration_ns != self.cfg.slice_duration_ns or schedule.guardband_ns != self.cfg.guardband_ns
        ):
            schedule = schedule.with_timing(self.cfg.slice_duration_ns, self.cfg.guardband_ns)
        self.schedule = schedule
        self.fabric: FabricLookup = deploy_topo(schedule)
        self.static = schedule.static
        self.cycle = schedule.cycle_length
        self._trace("deploy_topo")
        if initial:
            g = 0.0 if self.static else self.cfg.guardband_ns
            win = (0.0, math.inf) if self.static else (g, float(self.cfg.slice_duration_ns))
            for v in range(self.cfg.node_count):
                for bank in self.banks[v]:
                    bank.win = win

    def install_tables(self, node: int, table: TimeFlowTable) -> None:
        """Install a new highest-precedence table generation on ``node``."""
        self.tables.setdefault(node, []).insert(0, table)
        self._trace("deploy_routing", node)

    def retire_tables(self, node: int, keep: int = 1) -> None:
        del self.tables[node][keep:]
        self._trace("retire", node)

    def add_flow(self, f) -> None:
        fs = FlowState(int(f.flow_id), int(f.src_host), int(f.dst_host), int(f.size_bytes), float(f.arrival_time_ns))
        fs.cwnd = self.cfg.init_cwnd
        if fs.flow_id in self.flows:
            raise ValueError(f"duplicate flow id {fs.flow_id}")
        self.flows[fs.flow_id] = fs
        self.unfinished += 1
        self.pending_starts += 1
        self._push(fs.arrival_ns, _FLOW, fs)

    def ser(self, size: int) -> float:
        return size * 8e9 / self.B

    def slice_of(self, t: float) -> int:
        return 0 if self.static else int(t // self.cfg.slice_duration_ns)

    # ------------------------------------------------------------ main loop
    def run(self) -> Metrics:
        cfg = self.cfg
        m = self.metrics
        D = cfg.slice_duration_ns
        m.sample_interval_ns = float(cfg.telemetry_interval_ns or (10_000 if self.static else D))
        if not self.static:
            for v in range(cfg.node_count):
                self._schedule_rotation(v, 1)
                if cfg.guardband_ns > 0:
                    self._push(float(cfg.guardband_ns), _KICK, v)
        self._push(m.sample_interval_ns, _SAMPLE)
        if cfg.estimator_audit:
            self._push(self.tick_T, _TICK)
        last_arrival = max((f.arrival_ns for f in self.flows.values()), default=0.0)
        horizon = cfg.horizon_ns if cfg.horizon_ns is not None else last_arrival + 1e9
        heap = self.heap
        while heap and (self.unfinished > 0 or self.pending_starts > 0):
            t, _, kind, a, b, c = heapq.heappop(heap)
            if t > horizon:
                heapq.heappush(heap, (t, 0, kind, a, b, c))
                break
            self.now = t
            m.events += 1
            if kind == _ARRIVE:
                self._on_arrive(a, b, c is not False)
            elif kind == _TX_DONE:
                self._on_tx_done(a, b, c)
            elif kind == _HOST_DONE:
                self._on_host_done(a, b)
            elif kind == _DELIVER:
                self._on_deliver(a)
            elif kind == _ROTATE:
                self._on_rotate(a, b)
            elif kind == _KICK:
                for p in range(cfg.uplinks):
                    self._kick(a, p)
            elif kind == _HOST_WAKE:
                h = self.hosts[a]
                if h.wake_at == t:
                    h.wake_at = math.inf
                    self._host_kick(h)
            elif kind == _FLOW:
                self._on_flow(a)
            elif kind == _SAMPLE:
                self._on_sample()
            elif kind == _TICK:
                self._on_tick()
            elif kind == _PB_SWITCH:
                for h in self.hosts[a * cfg.hosts_per_node : (a + 1) * cfg.hosts_per_node]:
                    self._push(t + cfg.propagation_delay_ns, _PB_HOST, h.hid, b, c)
            elif kind == _PB_HOST:
                h = self.hosts[a]
                h.blocks[(b, c)] = t + self.cycle * D
            elif kind == _OFF_HOST:
                self._on_offload_host(a, b)
            elif kind == _RETURN:
                self._on_return(a, b)
            elif kind == _CALL:
                a(self)
            elif kind == _ACK:
                self._on_ack(a, b)
            elif kind == _RET_WAKE:
                h = self.hosts[a]
                if h.ret_wake == t:
                    h.ret_wake = math.inf
                    self._host_kick(h)
            elif kind == _RET_DONE:
                h = self.hosts[a]
                h.busy = False
                self._push(t + cfg.propagation_delay_ns, _RETURN, h.node, b)
                self._host_kick(h)
        m.end_time_ns = self.now
        self._on_sample()
        m.switch_peak_bytes = max([0] + [max(s) for s in m.switch_buffer.values() if s])
        for fs in self.flows.values():
            m.reorders[fs.flow_id] = fs.reorders
        if cfg.check_invariants:
            inflight = m.injected_bytes - m.delivered_bytes - m.total_dropped_bytes
            if self.unfinished == 0 and inflight != 0:
                m.invariant_violations.append(f"byte conservation: {inflight} bytes unaccounted")
        if self.unfinished > 0:
            incomplete = sorted(f.flow_id for f in self.flows.values() if f.finish_ns is None)
            raise HorizonExceeded(incomplete, m)
        return m

    # ------------------------------------------------------------ switches
    def _schedule_rotation(self, v: int, s: int) -> None:
        cfg = self.cfg
        lo, hi = cfg.rotation_jitter_ns
        off = -(self.rng_jitter.uniform(lo, hi) if hi > 0 else 0.0)
        if cfg.sync_error_ns:
            off += self.rng_jitter.uniform(-cfg.sync_error_ns, cfg.sync_error_ns) - cfg.sync_error_ns
        self._push(s * cfg.slice_duration_ns + off, _ROTATE, v, s)

    def _on_rotate(self, v: int, s: int) -> None:
        cfg = self.cfg
        now = self.now
        if self.static:
            return
        win = (now + cfg.guardband_ns, now + cfg.slice_duration_ns)
        self.node_abs[v] = s
        self.node_start[v] = now
        for p, bank in enumerate(self.banks[v]):
            bank.settle(now)
            old = bank.active
            bank.rotate(s, win)
            bank.last_settle = now
            if cfg.check_invariants and sum(1 for x in bank.paused if not x) != 1:
                self.metrics.invariant_violations.append(f"N{v}.p{p}: not exactly one active queue")
            left = bank.queues[old]
            if left:
                self._slice_miss(v, p, bank, old)
        self._trace("rotate", v, None, s % cfg.K)
        if cfg.guardband_ns > 0:
            self._push(now + cfg.guardband_ns, _KICK, v)
        else:
            for p in range(cfg.uplinks):
                self._kick(v, p)
        self._schedule_rotation(v, s + 1)

    def _slice_miss(self, v: int, p: int, bank: CalendarQueueBank, old: int) -> None:
        """Packets still queued when their slice ended wait for the next
        occurrence of the same slice."""
        c = self.cycle
        pkts = list(bank.queues[old])
        bank.queues[old].clear()
        moved = sum(x.size_bytes for x in pkts)
        bank.true[old] -= moved
        bank.est[old] = max(0.0, bank.est[old] - moved)
        bank.total -= moved
        self.node_total[v] -= moved
        self.metrics.slice_misses += len(pkts)
        cur = self.node_abs[v]
        for pkt in pkts:
            pkt.abs_dep += c
            rank = pkt.abs_dep - cur
            if rank >= bank.K or (self.cfg.offloading and rank >= self.offload_horizon):
                if self.cfg.offloading:
                    self._offload(v, p, pkt)
                else:
                    self._drop(pkt, "slice_miss")
                continue
            self._place(v, p, bank, bank.target(rank), pkt)

    def _place(self, v: int, p: int, bank: CalendarQueueBank, q: int, pkt: Packet) -> None:
        bank.add(q, pkt)
        self.node_total[v] += pkt.size_bytes
        if self.node_total[v] > self.node_peak[v]:
            self.node_peak[v] = self.node_total[v]
        if bank.total > self.port_peak[v][p]:
            self.port_peak[v][p] = bank.total

    def _lookup(self, v: int, phase: Optional[int], pkt: Packet):
        for table in self.tables.get(v, ()):
            try:
                return match_entry(
                    table,
                    phase,
                    pkt.src_node,
                    pkt.dst_node,
                    (pkt.src_host, pkt.dst_host, pkt.flow_id),
                    pkt.ingress_ts_ns,
                    self.rng_path,
                    self.cfg.seed,
                )
            except NoMatch:
                continue
        return None

    def _on_arrive(self, v: int, pkt: Packet, from_fabric: bool = True) -> None:
        cur = self.node_abs[v]
        # a packet received inside the guardband crossed the fabric in the
        # previous slice, so it matches that slice's entries
        if from_fabric and not self.static and cur > 0 and self.now < self.node_start[v] + self.cfg.guardband_ns:
            cur -= 1
        pkt.visits.append((v, cur))
        if pkt.dst_node == v:
            h = self.hosts[pkt.dst_host]
            h.down_free = max(self.now, h.down_free) + self.ser(pkt.size_bytes)
            self._push(h.down_free + self.cfg.propagation_delay_ns, _DELIVER, pkt)
            return
        if len(pkt.visits) > 64:
            self._drop(pkt, "hop_limit")
            return
        self._forward(v, pkt, cur)

    def _resolve(self, v: int, phase: Optional[int], pkt: Packet):
        """(port, dep_ts, rest-of-source-route) for ``pkt`` at ``v``."""
        if pkt.route:
            port, dep = pkt.route[0]
            return port, dep, pkt.route[1:]
        entry = self._lookup(v, phase, pkt)
        if entry is None:
            return None
        act = entry.action
        if isinstance(act, NextHop):
            return act.egress_port, act.dep_ts, None
        port, dep = act.hops[0]
        return port, dep, list(act.hops[1:])

    def _forward(self, v: int, pkt: Packet, arr_abs: int) -> None:
        c = self.cycle
        pkt.hop_arrival, pkt.hop_planned = self.now, None
        phase = None if self.static else arr_abs % c
        res = self._resolve(v, phase, pkt)
        if res is None and pkt.src_node != v and len(pkt.visits) > 1:
            # stranded by a topology switch: route on as if it started here
            pkt.src_node = v
            self.metrics.reoriginated += 1
            res = self._resolve(v, phase, pkt)
        if res is None:
            self._drop(pkt, "no_match")
            return
        port, dep, rest = res
        pkt.route = rest
        rank = 0 if (dep is None or self.static) else (dep - phase) % c
        outcome = self._enqueue(v, port, pkt, arr_abs, rank, detect=True)
        if outcome == ENQUEUED:
            return
        if outcome == BEYOND_HORIZON:
            if self.cfg.offloading:
                self._offload(v, port, pkt)
            else:
                self._drop(pkt, BEYOND_HORIZON)
            return
        if outcome == BUFFER_OVERFLOW:
            self._drop(pkt, BUFFER_OVERFLOW)
            return
        if outcome == CONGESTION_FULL and self.cfg.pushback:
            self._pushback(v, pkt)
        self._react(v, pkt, outcome, arr_abs, bool(rest))

    def _react(self, v: int, pkt: Packet, reason: str, arr_abs: int, source_routed: bool) -> None:
        hook = self.cfg.congestion_reaction
        if callable(hook):
            hook(self, v, pkt, reason)
            return
        if hook == "defer" and not self.static and not source_routed:
            c = self.cycle
            # retry as if the packet had arrived j slices later
            for j in range(1, c):
                res = self._resolve(v, (arr_abs + j) % c, pkt)
                if res is None:
                    continue
                port, dep, rest = res
                if rest:
                    continue
                rank = j + (dep - (arr_abs + j)) % c
                if self._enqueue(v, port, pkt, arr_abs, rank, detect=True) == ENQUEUED:
                    self.metrics.deferred_packets += 1
                    return
        self._drop(pkt, reason)

    def _enqueue(self, v: int, p: int, pkt: Packet, arr_abs: int, rank: int, detect: bool) -> str:
        """Calendar-queue admission for a packet that arrived in slice
        ``arr_abs`` and must leave ``rank`` slices later."""
        cfg = self.cfg
        bank = self.banks[v][p]
        cur = self.node_abs[v]
        abs_dep = arr_abs + rank
        while abs_dep < cur:
            abs_dep += self.cycle
        eff = abs_dep - cur
        pkt.arr_abs, pkt.rank, pkt.abs_dep = arr_abs, rank, abs_dep
        if pkt.hop_planned is None:
            pkt.hop_planned = abs_dep
        if eff >= bank.K or (cfg.offloading and eff >= self.offload_horizon):
            return BEYOND_HORIZON
        q = bank.target(eff)
        size = pkt.size_bytes
        if detect and not self.static and (cfg.congestion_detection or cfg.congestion_threshold_bytes is not None):
            bank.settle(self.now)
            est = bank.est[q]
            if cfg.congestion_detection:
                usable = cfg.slice_duration_ns - cfg.guardband_ns
                if eff == 0:
                    elapsed = max(0.0, self.now - (self.node_start[v] + cfg.guardband_ns))
                    usable = max(0.0, usable - elapsed)
                admissible = self.B * usable / 8e9
                if est + size > admissible:
                    return CONGESTION_FULL
            if cfg.congestion_threshold_bytes is not None and est + size > cfg.congestion_threshold_bytes:
                return THRESHOLD
        if cfg.port_buffer_bytes is not None and bank.total + size > cfg.port_buffer_bytes:
            return BUFFER_OVERFLOW
        bank.settle(self.now)
        self._place(v, p, bank, q, pkt)
        self._trace("enqueue", v, p, q, pkt.pid)
        if eff == 0:
            self._kick(v, p)
        return ENQUEUED

    def _kick(self, v: int, p: int) -> None:
        if self.port_busy[v][p]:
            return
        bank = self.banks[v][p]
        q = bank.queues[bank.active]
        if not q:
            return
        now = self.now
        pkt = q[0]
        ser = self.ser(pkt.size_bytes)
        if not self.static:
            ws, we = bank.win
            if now < ws - 1e-9 or now + ser > we + 1e-9:
                return
        cfg = self.cfg
        bank.settle(now)
        depth = bank.true[bank.active]
        err = bank.est[bank.active] - depth
        m = self.metrics
        if abs(err) > m.estimator_max_error_bytes:
            m.estimator_max_error_bytes = abs(err)
        if cfg.estimator_audit:
            m.estimator_dequeue_samples.append(err)
        pkt = bank.pop()
        self.node_total[v] -= pkt.size_bytes
        if cfg.check_invariants:
            cur = self.node_abs[v]
            if bank.paused[bank.active]:
                m.invariant_violations.append(f"N{v}.p{p}: dequeue from paused queue")
            if not self.static and (pkt.abs_dep != cur or cur < pkt.arr_abs + pkt.rank):
                m.invariant_violations.append(
                    f"pkt {pkt.pid} departs slice {cur}, planned {pkt.abs_dep} (arr {pkt.arr_abs} rank {pkt.rank})"
                )
        pkt.queue_delay += now - pkt.hop_arrival
        ready = pkt.hop_arrival
        if not self.static and pkt.hop_planned is not None:
            ready = max(ready, pkt.hop_planned * cfg.slice_duration_ns + cfg.guardband_ns)
        pkt.congestion_delay += max(0.0, now - ready)
        self.port_busy[v][p] = True
        self.port_tx[v][p] += pkt.size_bytes
        self._trace("dequeue", v, p, bank.active, pkt.pid)
        self._push(now + ser, _TX_DONE, v, p, (pkt, now))

    def _on_tx_done(self, v: int, p: int, info) -> None:
        pkt, start = info
        self.port_busy[v][p] = False
        self._fabric_forward(v, p, pkt, start)
        self._kick(v, p)

    def _fabric_forward(self, v: int, p: int, pkt: Packet, start: float) -> None:
        """Deliver over the circuit iff it is live for the whole serialization."""
        now = self.now
        if self.static:
            peer = self.fabric.peer(v, p, None)
        else:
            D = self.cfg.slice_duration_ns
            s = int(start // D)
            live_from = s * D + self.cfg.reconfig_ns
            if start < live_from - 1e-9 or now > (s + 1) * D + 1e-9:
                self._drop(pkt, "no_circuit")
                return
            peer = self.fabric.peer(v, p, s)
        if peer is None:
            self._drop(pkt, "no_circuit")
            return
        self._push(now + self.cfg.propagation_delay_ns, _ARRIVE, peer[0], pkt)

    # ------------------------------------------------------------ services
    def _pushback(self, v: int, pkt: Packet) -> None:
        key = (pkt.src_node, pkt.dst_node, pkt.ingress_phase)
        horizon = self.cycle * self.cfg.slice_duration_ns
        if self.pb_sent.get(key, -math.inf) + horizon > self.now:
            return
        self.pb_sent[key] = self.now
        self.metrics.pushback_messages += 1
        self._trace("pushback", v, None, None, pkt.pid)
        self._push(self.now + self.cfg.propagation_delay_ns, _PB_SWITCH, pkt.src_node, pkt.dst_node, pkt.ingress_phase)

    def _offload(self, v: int, p: int, pkt: Packet) -> None:
        hosts = self.hosts[v * self.cfg.hosts_per_node : (v + 1) * self.cfg.hosts_per_node]
        h = hosts[self.rng_offload.randrange(len(hosts))]
        self.metrics.offloaded_packets += 1
        self._trace("offload", v, p, None, pkt.pid)
        h.down_free = max(self.now, h.down_free) + self.ser(pkt.size_bytes)
        self._push(h.down_free + self.cfg.propagation_delay_ns, _OFF_HOST, h.hid, (pkt, p))

    def _on_offload_host(self, hid: int, info) -> None:
        pkt, p = info
        h = self.hosts[hid]
        # back as soon as its rank falls inside the horizon, lead included,
        # but never before a calendar queue exists for it (rank <= K - 1)
        D = self.cfg.slice_duration_ns
        due = max(
            (pkt.abs_dep - self.offload_horizon + 1) * D - self.cfg.notify_lead_ns,
            (pkt.abs_dep - self.cfg.K + 1) * D,
        )
        heapq.heappush(h.returns, (due, pkt.pid, pkt, p))
        self._host_kick(h)

    def _host_return_kick(self, h: Host) -> bool:
        """Send the earliest-due offloaded packet back once it is due. Returns
        share the host uplink with fresh traffic and take priority over it."""
        if not h.returns:
            return False
        due = h.returns[0][0]
        if due > self.now:
            if due < h.ret_wake:
                h.ret_wake = due
                self._push(due, _RET_WAKE, h.hid)
            return False
        _, _, pkt, p = heapq.heappop(h.returns)
        h.busy = True
        self._push(self.now + self.ser(pkt.size_bytes), _RET_DONE, h.hid, (pkt, p))
        return True

    def _on_return(self, v: int, info) -> None:
        pkt, p = info
        cfg = self.cfg
        cur = self.node_abs[v]
        bank = self.banks[v][p]
        if cur > pkt.abs_dep:  # its slice already ended; try again next cycle
            self.metrics.return_missed += 1
            while pkt.abs_dep <= cur:
                pkt.abs_dep += self.cycle
            self._offload(v, p, pkt)
            return
        rank = pkt.abs_dep - cur
        if rank >= bank.K:
            self._offload(v, p, pkt)
            return
        if cfg.port_buffer_bytes is not None and bank.total + pkt.size_bytes > cfg.port_buffer_bytes:
            self._drop(pkt, BUFFER_OVERFLOW)
            return
        bank.settle(self.now)
        pkt.returned = True
        pkt.arr_abs, pkt.rank = cur, rank
        self._place(v, p, bank, bank.target(rank), pkt)
        if rank == 0:
            self._kick(v, p)

    # ------------------------------------------------------------ hosts
    def _on_flow(self, fs: FlowState) -> None:
        self.pending_starts -= 1
        h = self.hosts[fs.src_host]
        dst_node = self.hosts[fs.dst_host].node
        self.traffic_log.record(self.now, h.node, dst_node, fs.size_bytes)
        if dst_node not in h.flows:
            h.flows[dst_node] = deque()
            h.order.append(dst_node)
        h.flows[dst_node].append(fs)
        self._host_kick(h)

    def _eligible(self, h: Host, fs: FlowState, dst_node: int, t_arr: float, size: int) -> bool:
        cfg = self.cfg
        if self.static:
            return True
        D = cfg.slice_duration_ns
        s = int(t_arr // D)
        phase = s % self.cycle
        exp = h.blocks.get((dst_node, phase))
        if exp is not None:
            if exp > self.now:
                return False
            del h.blocks[(dst_node, phase)]
        if cfg.flow_pausing and fs.sent >= cfg.elephant_threshold_bytes:
            if self.schedule.port_between(h.node, dst_node, phase) is None:
                return False
            if t_arr < s * D + cfg.guardband_ns or t_arr + self.ser(size) > (s + 1) * D:
                return False
        return True

    def _next_try(self, t_arr: float) -> float:
        D = self.cfg.slice_duration_ns
        g = self.cfg.guardband_ns
        s = int(t_arr // D)
        for cand in (s * D + g, (s + 1) * D, (s + 1) * D + g):
            if cand > t_arr + 1e-6:
                return cand
        return (s + 2) * D

    def _host_kick(self, h: Host) -> None:
        if h.busy or self._host_return_kick(h) or not h.order:
            return
        cfg = self.cfg
        now = self.now
        k = len(h.order)
        earliest = math.inf
        windowed = cfg.transport == "aimd"
        for i in range(k):
            idx = (h.rr + i) % k
            dst = h.order[idx]
            for fs in h.flows[dst]:
                if windowed and fs.inflight >= int(fs.cwnd):
                    continue  # an ACK will wake the host
                size = min(cfg.mtu_bytes, fs.size_bytes - fs.sent)
                ser = self.ser(size)
                t_arr = now + ser + cfg.propagation_delay_ns
                if not self._eligible(h, fs, dst, t_arr, size):
                    earliest = min(earliest, self._next_try(t_arr) - ser - cfg.propagation_delay_ns)
                    continue
                h.rr = (idx + 1) % k
                self._host_send(h, fs, dst, size, ser)
                return
        if earliest < h.wake_at:
            h.wake_at = max(earliest, now + 1e-3)
            self._push(h.wake_at, _HOST_WAKE, h.hid)

    def _host_send(self, h: Host, fs: FlowState, dst: int, size: int, ser: float) -> None:
        self.pid += 1
        t_arr = self.now + ser + self.cfg.propagation_delay_ns
        pkt = Packet(
            self.pid, fs.flow_id, fs.next_seq, size, fs.src_host, fs.dst_host, h.node, dst,
            ingress_ts_ns=t_arr,
            ingress_phase=self.slice_of(t_arr) % self.cycle,
        )
        fs.next_seq += 1
        fs.sent += size
        fs.inflight += 1
        self.metrics.injected_bytes += size
        if fs.sent >= fs.size_bytes:
            q = h.flows[dst]
            q.remove(fs)
            if not q:
                del h.flows[dst]
                i = h.order.index(dst)
                h.order.pop(i)
                if h.rr > i:
                    h.rr -= 1
                if h.order:
                    h.rr %= len(h.order)
                else:
                    h.rr = 0
        h.busy = True
        self._push(self.now + ser, _HOST_DONE, h.hid, pkt)

    def _on_host_done(self, hid: int, pkt: Packet) -> None:
        h = self.hosts[hid]
        h.busy = False
        self._push(self.now + self.cfg.propagation_delay_ns, _ARRIVE, h.node, pkt, False)
        self._host_kick(h)

    # ------------------------------------------------------------ accounting
    def _on_deliver(self, pkt: Packet) -> None:
        m = self.metrics
        fs = self.flows[pkt.flow_id]
        m.delivered_bytes += pkt.size_bytes
        m.delivered_packets += 1
        self.sample_deliv += pkt.size_bytes
        m.queue_delay_sum_ns += pkt.queue_delay
        m.congestion_delay_sum_ns += pkt.congestion_delay
        m.latency_sum_ns += self.now - pkt.ingress_ts_ns
        if pkt.seq < fs.max_seq:
            fs.reorders += 1
        else:
            fs.max_seq = pkt.seq
        fs.delivered += pkt.size_bytes
        if self.cfg.transport == "aimd":
            self._receive(fs, pkt.seq)
        self._maybe_finish(fs)

    def _drop(self, pkt: Packet, reason: str) -> None:
        m = self.metrics
        m.dropped_bytes[reason] = m.dropped_bytes.get(reason, 0) + pkt.size_bytes
        m.dropped_packets[reason] = m.dropped_packets.get(reason, 0) + 1
        self._trace("drop:" + reason, None, None, None, pkt.pid)
        fs = self.flows[pkt.flow_id]
        fs.dropped += pkt.size_bytes
        if self.cfg.transport == "aimd":
            # the sender learns of the loss one ACK delay later
            self._push(self.now + self.cfg.ack_delay_ns, _ACK, fs, True)
        self._maybe_finish(fs)

    def _maybe_finish(self, fs: FlowState) -> None:
        if fs.finish_ns is None and fs.delivered + fs.dropped >= fs.size_bytes:
            fs.finish_ns = self.now
            self.unfinished -= 1
            if fs.dropped == 0:
                self.metrics.fct_ns[fs.flow_id] = self.now - fs.arrival_ns
            self.metrics.flows[fs.flow_id] = (fs.src_host, fs.dst_host, fs.size_bytes, fs.arrival_ns)

    def _receive(self, fs: FlowState, seq: int) -> None:
        """Cumulative-ACK receiver; ``dupack_threshold`` out-of-order arrivals
        in a row look like a loss to the sender."""
        signal = False
        if seq == fs.rcv_next:
            fs.rcv_next += 1
            while fs.rcv_next in fs.ooo:
                fs.ooo.discard(fs.rcv_next)
                fs.rcv_next += 1
            fs.dupacks = 0
        elif seq > fs.rcv_next:
            fs.ooo.add(seq)
            fs.dupacks += 1
            signal = fs.dupacks == self.cfg.dupack_threshold
        self._push(self.now + self.cfg.ack_delay_ns, _ACK, fs, signal)

    def _on_ack(self, fs: FlowState, signal: bool) -> None:
        """Window update; no data is retransmitted, only the rate reacts."""
        cfg = self.cfg
        fs.inflight -= 1
        if signal and fs.rcv_next > fs.recover:
            fs.ssthresh = fs.cwnd = max(2.0, fs.cwnd / 2)
            fs.recover = fs.next_seq
            self.metrics.window_cuts += 1
        elif not signal:
            fs.cwnd = min(cfg.max_cwnd, fs.cwnd + (1.0 if fs.cwnd < fs.ssthresh else 1.0 / fs.cwnd))
        self._host_kick(self.hosts[fs.src_host])

    def _on_sample(self) -> None:
        m = self.metrics
        n, u = self.cfg.node_count, self.cfg.uplinks
        for v in range(n):
            m.switch_buffer.setdefault(v, []).append(self.node_peak[v])
            self.node_peak[v] = self.node_total[v]
            for p in range(u):
                m.port_buffer.setdefault((v, p), []).append(self.port_peak[v][p])
                m.port_tx_bytes.setdefault((v, p), []).append(self.port_tx[v][p])
                self.port_peak[v][p] = self.banks[v][p].total
                self.port_tx[v][p] = 0
        m.throughput.append(self.sample_deliv)
        self.sample_deliv = 0
        if self.unfinished > 0 or self.pending_starts > 0:
            self._push(self.now + m.sample_interval_ns, _SAMPLE)

    def _on_tick(self) -> None:
        """Audit-mode estimator tick: settle every active queue and record
        the estimate against the resident bytes."""
        m = self.metrics
        for row in self.banks:
            for bank in row:
                bank.settle(self.now)
                q = bank.active
                diff = bank.est[q] - bank.true[q]
                m.estimator_min_margin_bytes = min(m.estimator_min_margin_bytes, diff)
        if self.unfinished > 0 or self.pending_starts > 0:
            self._push(self.now + self.tick_T, _TICK)


def run(config: SimConfig, schedule: OpticalSchedule, tables: dict, workload: Sequence = ()) -> Metrics:
    return Simulator(config, schedule, tables, workload).run()
