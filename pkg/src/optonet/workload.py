"""Flow generation from empirical size CDFs and traffic-matrix collection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class FlowSpec:
    src_host: int
    dst_host: int
    size_bytes: int
    arrival_time_ns: float
    flow_id: int

    def __post_init__(self):
        if self.size_bytes < 1:
            raise ValueError(f"flow {self.flow_id}: size must be >= 1")
        if self.src_host == self.dst_host:
            raise ValueError(f"flow {self.flow_id}: src and dst host are both {self.src_host}")


@dataclass(frozen=True)
class SizeDistribution:
    """Step CDF over flow sizes: ``points`` are (size_bytes, cumulative prob)."""

    points: tuple[tuple[int, float], ...]
    name: str = "custom"

    def __post_init__(self):
        pts = tuple((int(s), float(p)) for s, p in self.points)
        if not pts:
            raise ValueError("empty CDF")
        sizes = [s for s, _ in pts]
        probs = [p for _, p in pts]
        if any(s < 1 for s in sizes) or sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ValueError("CDF sizes must be positive and strictly increasing")
        if any(b < a for a, b in zip(probs, probs[1:])) or probs[0] < 0:
            raise ValueError("CDF probabilities must be non-decreasing")
        if abs(probs[-1] - 1.0) > 1e-9:
            raise ValueError(f"CDF must end at probability 1, got {probs[-1]}")
        object.__setattr__(self, "points", pts)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s for s, _ in self.points], dtype=np.int64)

    @property
    def cdf(self) -> np.ndarray:
        c = np.array([p for _, p in self.points])
        c[-1] = 1.0
        return c

    @property
    def mean(self) -> float:
        pmf = np.diff(np.concatenate([[0.0], self.cdf]))
        return float(np.dot(pmf, self.sizes))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        idx = np.searchsorted(self.cdf, u, side="right")
        return self.sizes[np.minimum(idx, len(self.points) - 1)]

    @classmethod
    def from_file(cls, path) -> "SizeDistribution":
        pts = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                s, p = line.split()
                pts.append((int(float(s)), float(p)))
        return cls(tuple(pts), name=Path(path).stem)

    def to_file(self, path) -> None:
        Path(path).write_text("".join(f"{s} {p!r}\n" for s, p in self.points), encoding="utf-8")


# Synthetic heavy-tailed mixes; shapes follow the usual published DCN
# size profiles but the numbers are illustrative, not measured.
BUILTIN_CDFS = {
    "rpc-like": ((100, 0.15), (300, 0.45), (1_000, 0.70), (3_000, 0.85), (10_000, 0.93),
                 (50_000, 0.97), (200_000, 0.99), (1_000_000, 1.0)),
    "hadoop-like": ((300, 0.10), (1_000, 0.35), (10_000, 0.55), (100_000, 0.75),
                    (1_000_000, 0.90), (3_000_000, 0.96), (10_000_000, 1.0)),
    "kv-like": ((64, 0.20), (200, 0.55), (500, 0.80), (1_500, 0.92), (5_000, 0.98),
                (20_000, 0.995), (100_000, 1.0)),
}


def builtin(name: str) -> SizeDistribution:
    if name not in BUILTIN_CDFS:
        raise KeyError(f"unknown distribution {name!r}; choose from {sorted(BUILTIN_CDFS)}")
    return SizeDistribution(BUILTIN_CDFS[name], name=name)


def fixed_size(size_bytes: int) -> SizeDistribution:
    return SizeDistribution(((size_bytes, 1.0),), name=f"fixed-{size_bytes}")


def arrival_rate_per_ns(load: float, core_bandwidth_bps: float, mean_size_bytes: float) -> float:
    """Poisson flow rate that offers ``load`` of the aggregate core bandwidth."""
    return load * core_bandwidth_bps / 8 / mean_size_bytes / 1e9


def gen_flows(
    dist: SizeDistribution,
    load: float,
    duration_ns: float,
    core_bandwidth_bps: float,
    host_count: int,
    seed: int = 0,
    hosts_per_node: int = 1,
    start_ns: float = 0.0,
    first_id: int = 0,
    hosts: Optional[Sequence[int]] = None,
) -> list[FlowSpec]:
    """Poisson arrivals over ``[start, start + duration)``; uniform host pairs
    drawn from ``hosts`` (default: all ``host_count`` hosts).

    Pairs of hosts under the same node are excluded too, since that traffic
    never reaches the fabric.
    """
    if not 0 <= load <= 1:
        raise ValueError(f"load must be in [0, 1], got {load}")
    pool = np.arange(host_count) if hosts is None else np.asarray(sorted(hosts))
    if len({int(h) // hosts_per_node for h in pool}) < 2:
        raise ValueError("need at least two nodes with hosts")
    lam = arrival_rate_per_ns(load, core_bandwidth_bps, dist.mean)
    if lam == 0 or duration_ns <= 0:
        return []
    rng = np.random.default_rng(seed)
    count = rng.poisson(lam * duration_ns)
    times = np.sort(rng.uniform(0.0, duration_ns, count)) + start_ns
    sizes = dist.sample(rng, count)
    src = pool[rng.integers(0, len(pool), count)]
    dst = pool[rng.integers(0, len(pool), count)]
    flows = []
    for i in range(count):
        s, d = int(src[i]), int(dst[i])
        while s // hosts_per_node == d // hosts_per_node:
            d = int(pool[rng.integers(0, len(pool))])
        flows.append(FlowSpec(s, d, int(sizes[i]), float(times[i]), first_id + i))
    return flows


_CSV_FIELDS = ("flow_id", "src_host", "dst_host", "size_bytes", "arrival_time_ns")


def flows_to_csv(flows: Iterable[FlowSpec], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_FIELDS)
        for f in flows:
            w.writerow([f.flow_id, f.src_host, f.dst_host, f.size_bytes, repr(f.arrival_time_ns)])


def flows_from_csv(path) -> list[FlowSpec]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            FlowSpec(int(r["src_host"]), int(r["dst_host"]), int(r["size_bytes"]), float(r["arrival_time_ns"]), int(r["flow_id"]))
            for r in csv.DictReader(fh)
        ]


@dataclass
class TrafficLog:
    """Offered bytes as reported by hosts: (time_ns, src_node, dst_node, bytes)."""

    node_count: int
    records: list = field(default_factory=list)

    def record(self, time_ns: float, src_node: int, dst_node: int, size_bytes: int) -> None:
        self.records.append((time_ns, src_node, dst_node, size_bytes))


def collect(interval_ns: float, telemetry: TrafficLog, now_ns: Optional[float] = None) -> np.ndarray:
    """Traffic matrix of bytes offered in ``(now - interval, now]``."""
    tm = np.zeros((telemetry.node_count, telemetry.node_count))
    if now_ns is None:
        now_ns = max((r[0] for r in telemetry.records), default=0.0)
    lo = now_ns - interval_ns
    for t, s, d, b in telemetry.records:
        if lo < t <= now_ns:
            tm[s, d] += b
    return tm


def offered_matrix(flows: Sequence[FlowSpec], node_count: int, hosts_per_node: int = 1) -> np.ndarray:
    tm = np.zeros((node_count, node_count))
    for f in flows:
        tm[f.src_host // hosts_per_node, f.dst_host // hosts_per_node] += f.size_bytes
    return tm
