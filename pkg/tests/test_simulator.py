import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fig2
from optonet.core import Circuit, NextHop, OpticalSchedule, TimeFlowEntry, TimeFlowTable
from optonet.routing import deploy_routing, direct_route, vlb
from optonet.simulator import (
    BEYOND_HORIZON,
    CONGESTION_FULL,
    ENQUEUED,
    THRESHOLD,
    CalendarQueueBank,
    HorizonExceeded,
    Packet,
    SimConfig,
    Simulator,
)
from optonet.topology import round_robin
from optonet.workload import FlowSpec, builtin, gen_flows

SER_1500 = 120.0  # 1500 B at 100 Gbps
PROP = 100.0


def table(*entries):
    return TimeFlowTable(tuple(entries))


def fig2_sim(tables, flows, **kw):
    return Simulator(SimConfig(node_count=4, uplinks=4, trace=True, **kw), fig2(), tables, flows)


def dequeues(sim, node):
    return [t for t, kind, v, *_ in sim.trace if kind == "dequeue" and v == node]


class Recorder(Simulator):
    """Simulator that keeps drops, pushbacks and injections with their keys."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.drops, self.pushbacks, self.sends = [], [], []

    def _drop(self, pkt, reason):
        self.drops.append((self.now, (pkt.src_node, pkt.dst_node, pkt.ingress_phase), reason))
        super()._drop(pkt, reason)

    def _pushback(self, v, pkt):
        before = self.metrics.pushback_messages
        super()._pushback(v, pkt)
        if self.metrics.pushback_messages > before:
            self.pushbacks.append((self.now, (pkt.src_node, pkt.dst_node, pkt.ingress_phase)))

    def _host_send(self, h, fs, dst, size, ser):
        super()._host_send(h, fs, dst, size, ser)
        self.sends.append((self.now + ser + self.cfg.propagation_delay_ns, h.node, dst, size, fs.flow_id))


# ---------------------------------------------------------------- run


def test_single_packet_static_fct():
    s = OpticalSchedule.static_topology([Circuit(0, 0, 1, 0)])
    m = Simulator(SimConfig(node_count=2), s, {0: table(TimeFlowEntry(1, NextHop(0)))}, [FlowSpec(0, 1, 1500, 0.0, 0)]).run()
    # host uplink, circuit and host downlink each add serialization + propagation
    assert m.fct_ns[0] == pytest.approx(3 * (SER_1500 + PROP))
    assert m.loss_rate == 0 and m.invariant_violations == []


def test_fig3b_tables_deliver_in_slice_1():
    tables = {
        0: table(TimeFlowEntry(3, NextHop(1, 0), 0, 0)),
        1: table(TimeFlowEntry(3, NextHop(2, 1), 0, 0)),
    }
    sim = fig2_sim(tables, [FlowSpec(0, 3, 1000, 0.0, 0)])
    m = sim.run()
    assert m.delivered_packets == 1
    (t0,) = dequeues(sim, 0)
    (t1,) = dequeues(sim, 1)
    assert 200 <= t0 < 2000  # N0 sends in slice 0 after the guardband
    assert 2200 <= t1 < 4000  # N1 holds it for slice 1
    assert m.fct_ns[0] < 4000


def test_run_is_deterministic():
    s = round_robin(8, 1)
    tables = deploy_routing(vlb(s), s, "hop", "packet")
    flows = gen_flows(builtin("rpc-like"), 0.3, 100_000, 8 * 100e9, 8, seed=2)
    a = Simulator(SimConfig(node_count=8, seed=4), s, tables, flows).run()
    b = Simulator(SimConfig(node_count=8, seed=4), s, tables, flows).run()
    assert a.dumps() == b.dumps()


def test_horizon_exceeded_lists_flows():
    s = OpticalSchedule.static_topology([Circuit(0, 0, 1, 0)])
    cfg = SimConfig(node_count=2, horizon_ns=100.0)
    with pytest.raises(HorizonExceeded) as err:
        Simulator(cfg, s, {0: table(TimeFlowEntry(1, NextHop(0)))}, [FlowSpec(0, 1, 10_000, 0.0, 7)]).run()
    assert err.value.incomplete == [7]


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(node_count=2, slice_duration_ns=200, guardband_ns=200)
    with pytest.raises(ValueError):
        SimConfig(node_count=2, update_interval_ns=0)
    with pytest.raises(ValueError):
        SimConfig(node_count=2, propagation_delay_ns=-1)


# ---------------------------------------------------------------- enqueue


def bare_sim(**kw):
    return Simulator(SimConfig(node_count=4, uplinks=4, **kw), fig2(), {}, [])


def pkt(size=1000, pid=1):
    return Packet(pid, 0, 0, size, 0, 3, 0, 3)


def test_rank0_goes_to_active_queue():
    sim = bare_sim()
    assert sim._enqueue(0, 2, pkt(), 0, 0, detect=True) == ENQUEUED
    assert len(sim.banks[0][2].queues[0]) == 1


def test_rank1_goes_one_queue_ahead():
    sim = bare_sim()
    bank = sim.banks[0][3]
    sim.node_abs[0] = 1
    bank.rotate(1, (2200.0, 4000.0))
    assert sim._enqueue(0, 3, pkt(), 1, 1, detect=True) == ENQUEUED
    assert len(bank.queues[2]) == 1


def test_congestion_full_boundary():
    sim = bare_sim(congestion_detection=True)
    bank = sim.banks[0][1]
    admissible = 100e9 * (2000 - 200) / 8e9
    assert admissible == 22500
    bank.est[0] = admissible
    assert sim._enqueue(0, 1, pkt(), 0, 0, detect=True) == CONGESTION_FULL
    bank.est[0] = admissible - 1000
    assert sim._enqueue(0, 1, pkt(), 0, 0, detect=True) == ENQUEUED


def test_admissible_shrinks_with_elapsed_time():
    sim = bare_sim(congestion_detection=True)
    sim.now = 200 + 900  # half the usable window gone
    bank = sim.banks[0][1]
    bank.last_settle = sim.now  # estimate already current
    bank.est[0] = 11250 - 1000
    assert sim._enqueue(0, 1, pkt(), 0, 0, detect=True) == ENQUEUED
    assert sim._enqueue(0, 1, pkt(pid=2), 0, 0, detect=True) == CONGESTION_FULL
    # a future slice still has the whole window
    assert sim._enqueue(0, 1, pkt(pid=3), 0, 1, detect=True) == ENQUEUED


def test_threshold_rejection():
    sim = bare_sim(congestion_threshold_bytes=2000)
    sim.banks[0][1].est[0] = 1500
    assert sim._enqueue(0, 1, pkt(), 0, 0, detect=True) == THRESHOLD


def test_beyond_horizon_without_offloading():
    sim = bare_sim(K=4)
    assert sim._enqueue(0, 1, pkt(), 0, 6, detect=True) == BEYOND_HORIZON


# ---------------------------------------------------------------- rotation


def test_rotation_index_arithmetic():
    bank = CalendarQueueBank(8, 625, 50)
    bank.rotate(5, (0, 1))
    bank.rotate(6, (1, 2))
    assert bank.paused[5] and not bank.paused[6]
    assert sum(not p for p in bank.paused) == 1


def test_rank2_departs_two_slices_later():
    # N0 waits from slice 0 for its direct circuit to N3 in slice 2
    sim = fig2_sim({0: table(TimeFlowEntry(3, NextHop(3, 2), 0, 0))}, [FlowSpec(0, 3, 1000, 0.0, 0)])
    m = sim.run()
    (t,) = dequeues(sim, 0)
    assert 4200 <= t < 6000
    assert m.invariant_violations == []


def test_rotation_times():
    sim = fig2_sim({0: table(TimeFlowEntry(3, NextHop(3, 2), 0, 0))}, [FlowSpec(0, 3, 1000, 0.0, 0)])
    sim.run()
    rot = [t for t, kind, *_ in sim.trace if kind == "rotate"]
    assert rot and all(t % 2000 == 0 for t in rot)
    sim = fig2_sim({0: table(TimeFlowEntry(3, NextHop(3, 2), 0, 0))}, [FlowSpec(0, 3, 1000, 0.0, 0)], rotation_jitter_ns=34)
    sim.run()
    rot = [t for t, kind, *_ in sim.trace if kind == "rotate"]
    assert all(0 <= (-t) % 2000 <= 34 for t in rot)
    assert any(t % 2000 for t in rot)


# ---------------------------------------------------------------- estimator


def test_decrement_quantum():
    sim = Simulator(SimConfig(node_count=2), fig2(), {}, [])
    assert sim.banks[0][0].quantum == 625


def test_estimator_floor_and_ticks():
    bank = CalendarQueueBank(4, 625, 50)
    bank.settle(1000)
    assert bank.est[0] == 0
    bank.est[0] = 2000
    bank.last_settle = 1000
    bank.settle(1100)  # ticks at 1050 and 1100
    assert bank.est[0] == 750
    bank.settle(2000)
    assert bank.est[0] == 0
    assert bank.true[0] == 0


# ---------------------------------------------------------------- services


def overload(**kw):
    s = round_robin(4, 1)
    tables = deploy_routing(direct_route(s), s, "hop", "none")
    flows = [FlowSpec(h, 2, 2_000_000, 0.0, h) for h in (0, 1)]
    cfg = SimConfig(node_count=4, hosts_per_node=2, congestion_detection=True, **kw)
    sim = Recorder(cfg, s, tables, flows)
    return sim, sim.run()


def test_pushback_silences_rejected_slice():
    sim, m = overload(pushback=True)
    assert sim.pushbacks
    # switch -> host relay, plus the one packet already on the host link
    horizon = 3 * PROP + 2 * SER_1500
    cycle_ns = 3 * 2000
    late = [
        (td, k)
        for t, k in sim.pushbacks
        for td, kd, _ in sim.drops
        if kd == k and t + horizon < td < t + cycle_ns
    ]
    assert late == []


def test_pushback_toggle_changes_drops():
    _, on = overload(pushback=True)
    _, off = overload(pushback=False)
    assert off.pushback_messages == 0
    assert off.dropped_packets["congestion_full"] > on.dropped_packets["congestion_full"]


def test_suppressed_packets_stay_on_host():
    sim, _ = overload(pushback=True)
    cycle_ns = 3 * 2000
    for t, (src, dst, phase) in sim.pushbacks:
        blocked_from = t + 2 * PROP
        for t_arr, node, d, _, _ in sim.sends:
            sent_at = t_arr - SER_1500 - PROP
            if d == dst and blocked_from <= sent_at and t_arr < blocked_from + cycle_ns:
                assert int(t_arr // 2000) % 3 != phase


def test_flow_pausing_threshold_zero_gates_on_circuits():
    s = round_robin(4, 1)
    tables = deploy_routing(direct_route(s), s, "hop", "none")
    cfg = SimConfig(node_count=4, flow_pausing=True, elephant_threshold_bytes=0)
    sim = Recorder(cfg, s, tables, [FlowSpec(0, 1, 200_000, 0.0, 0)])
    m = sim.run()
    assert m.loss_rate == 0
    for t_arr, node, dst, size, _ in sim.sends:
        ts = int(t_arr // 2000)
        assert s.port_between(node, dst, ts % 3) is not None
        assert ts * 2000 + 200 <= t_arr and t_arr + size * 8 / 100 <= (ts + 1) * 2000


def test_mice_are_never_held():
    s = round_robin(4, 1)
    tables = deploy_routing(direct_route(s), s, "hop", "none")
    flows = [FlowSpec(0, 1, 20_000, 0.0, 0)]
    held = Simulator(SimConfig(node_count=4, flow_pausing=True, elephant_threshold_bytes=10**9), s, tables, flows).run()
    free = Simulator(SimConfig(node_count=4), s, tables, flows).run()
    assert held.dumps() == free.dumps()


def rank6_run(offloading):
    s = round_robin(8, 1)
    dst = next(d for d in range(1, 8) if s.port_between(0, d, 6) is not None)
    port = s.port_between(0, dst, 6)
    tables = {0: table(TimeFlowEntry(dst, NextHop(port, 6), 0, 0))}
    cfg = SimConfig(node_count=8, K=4, offloading=offloading, trace=True)
    sim = Simulator(cfg, s, tables, [FlowSpec(0, dst, 1000, 0.0, 0)])
    return sim, sim.run()


def test_offload_returns_for_departure_slice():
    sim, m = rank6_run(True)
    assert m.offloaded_packets == 1 and m.return_missed == 0
    assert m.delivered_packets == 1
    (t,) = dequeues(sim, 0)
    assert 6 * 2000 + 200 <= t < 7 * 2000


def test_rank6_dropped_without_offloading():
    _, m = rank6_run(False)
    assert m.dropped_packets == {"beyond_horizon": 1}


# ---------------------------------------------------------------- fabric


def test_fabric_forward_window():
    sim = bare_sim(reconfig_ns=100)
    sim.add_flow(FlowSpec(0, 3, 1000, 1e12, 0))  # owner of the probe packet
    p = pkt()
    for start, drops in ((1950, 1), (2050, 2), (500, 2)):
        # crosses into slice 1; inside the reconfiguration time; mid-slice
        sim.now = start + SER_1500
        sim._fabric_forward(0, 1, p, start)
        assert sim.metrics.dropped_packets == {"no_circuit": drops}
    arrivals = [e for e in sim.heap if e[2] == 3]  # arrival events
    assert [(e[0], e[3]) for e in arrivals] == [(500 + SER_1500 + PROP, 1)]


def test_sync_error_beyond_guardband_drops():
    s = round_robin(8, 1)
    tables = deploy_routing(vlb(s), s, "hop", "packet")
    flows = gen_flows(builtin("rpc-like"), 0.3, 60_000, 8 * 100e9, 8, seed=1)
    clean = Simulator(SimConfig(node_count=8), s, tables, flows).run()
    skewed = Simulator(SimConfig(node_count=8, sync_error_ns=500), s, tables, flows).run()
    assert "no_circuit" not in clean.dropped_packets
    assert skewed.dropped_packets.get("no_circuit", 0) > 0


def test_static_fabric_never_drops_for_slicing():
    ring = [Circuit(i, 0, (i + 1) % 4, 1) for i in range(4)]
    s = OpticalSchedule.static_topology(ring)
    from optonet.routing import static_paths

    tables = deploy_routing(static_paths(s, "ecmp"), s, "hop", "flow", match_src=False)
    flows = gen_flows(builtin("rpc-like"), 0.5, 100_000, 4 * 100e9, 4, seed=3)
    m = Simulator(SimConfig(node_count=4, uplinks=2, rotation_jitter_ns=34), s, tables, flows).run()
    assert m.loss_rate == 0 and m.delivered_bytes == m.injected_bytes


# ---------------------------------------------------------------- telemetry


def test_telemetry_one_resident_mtu():
    sim = fig2_sim({0: table(TimeFlowEntry(1, NextHop(1, 0), 0, 0))}, [FlowSpec(0, 1, 1500, 0.0, 0)])
    m = sim.run()
    buf = m.buffer_usage(0, 1)
    assert buf[0] == 1500 and not any(buf[1:])
    assert m.bw_usage(0, 1)[0] == 12000
    assert not any(m.buffer_usage(2, 0)) and not any(m.bw_usage(2, 0))


# ---------------------------------------------------------------- properties


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["vlb", "direct"]), st.sampled_from([4, 6, 8]))
def test_conservation_and_queue_invariants(seed, routing, n):
    s = round_robin(n, 1)
    paths = vlb(s) if routing == "vlb" else direct_route(s)
    tables = deploy_routing(paths, s, "hop", "packet" if routing == "vlb" else "none")
    flows = gen_flows(builtin("rpc-like"), 0.4, 40_000, n * 100e9, n, seed=seed)
    m = Simulator(SimConfig(node_count=n, K=8, seed=seed), s, tables, flows).run()
    assert m.invariant_violations == []
    assert m.injected_bytes == m.delivered_bytes + m.total_dropped_bytes
    if routing == "direct":
        assert sum(m.reorders.values()) == 0


def test_estimator_error_at_default_interval():
    # 50 ns ticks: error seen by departing packets stays under half an MTU
    s = round_robin(4, 1)
    tables = deploy_routing(vlb(s), s, "hop", "packet")
    rng = random.Random(3)
    flows = []
    for h in range(16):
        for _ in range(20):
            dst = rng.choice([x for x in range(16) if x // 4 != h // 4])
            flows.append(FlowSpec(h, dst, rng.choice([64, 700, 1500, 3000]), rng.uniform(0, 20_000), len(flows)))
    cfg = SimConfig(node_count=4, hosts_per_node=4, guardband_ns=37, rotation_jitter_ns=34, estimator_audit=True)
    m = Simulator(cfg, s, tables, flows).run()
    assert m.estimator_max_error_bytes < 750
    quantum = 625
    assert min(m.estimator_dequeue_samples) >= -quantum
    assert m.estimator_min_margin_bytes >= -(quantum + 1500)
