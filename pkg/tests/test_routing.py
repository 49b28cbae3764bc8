import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fig2
from optonet.core import (
    Circuit,
    EntryConflict,
    NextHop,
    OpticalSchedule,
    Path,
    SourceRoute,
    TimeFlowEntry,
    Unreachable,
    earliest_path,
    match_entry,
)
from optonet.routing import (
    PathInvalid,
    SliceDisconnected,
    deploy_routing,
    direct_route,
    hoho_paths,
    hoho_plan,
    hoho_walk,
    opera_paths,
    static_paths,
    ucmp_paths,
    validate_paths,
    vlb,
)
from optonet.topology import round_robin
from test_core import random_schedule

RING = [Circuit(0, 0, 1, 1), Circuit(1, 0, 2, 1), Circuit(2, 0, 3, 1), Circuit(3, 0, 0, 1)]


# ---------------------------------------------------------------- static


def test_ecmp_ring():
    paths = static_paths(RING, "ecmp", pairs=[(0, 2)])
    assert sorted(p.nodes for p in paths) == [(0, 1, 2), (0, 3, 2)]
    assert [p.weight for p in paths] == [0.5, 0.5]
    assert all(dep is None for p in paths for _, dep in p.hops)


def test_ksp_capped_at_available_paths():
    paths = static_paths(RING, "ksp", k=3, pairs=[(0, 2)])
    assert len(paths) == 2


def test_wcmp_without_tm_is_ecmp():
    assert static_paths(RING, "wcmp", pairs=[(0, 2)]) == static_paths(RING, "ecmp", pairs=[(0, 2)])


def test_wcmp_shifts_weight_off_loaded_link():
    tm = np.zeros((4, 4))
    tm[0, 1] = 100  # loads link 0-1
    tm[0, 2] = 1
    ws = {p.nodes: p.weight for p in static_paths(RING, "wcmp", tm=tm, pairs=[(0, 1), (0, 2)]) if p.dst == 2}
    assert ws[(0, 3, 2)] > ws[(0, 1, 2)]


# ---------------------------------------------------------------- time-varying


def test_direct_route_fig2(fig2_schedule):
    paths = {p.ts: p for p in direct_route(fig2_schedule, pairs=[(0, 3)])}
    assert paths[0].hops == ((3, 2),)
    assert paths[2].hops == ((3, 2),)


def test_direct_route_max_wait_n4():
    s = round_robin(4, 1)
    waits = [p.arrival_offset(3) for p in direct_route(s)]
    assert max(waits) == 2 and min(waits) == 0


def test_vlb_fig2(fig2_schedule):
    paths = [p for p in vlb(fig2_schedule, pairs=[(0, 3)]) if p.ts == 0]
    assert [p.hops for p in paths] == [((1, 0), (3, 1))]


def test_vlb_includes_direct_when_connected():
    s = round_robin(8, 1)
    for p in vlb(s, pairs=[(0, 7)]):
        if s.port_between(0, 7, p.ts) is not None:
            break
    group = [q for q in vlb(s, pairs=[(0, 7)]) if q.ts == p.ts]
    assert ((7, p.ts),) in [q.hops for q in group]


def test_vlb_worst_wait_is_cycle_minus_one():
    s = round_robin(8, 1)
    assert max(p.arrival_offset(7) for p in vlb(s)) == 6


def test_opera_ring_and_disconnected():
    ring = OpticalSchedule((tuple(RING),), 2000, 200)
    paths = opera_paths(ring, pairs=[(0, 2), (0, 1)])
    two = [p for p in paths if p.dst == 2]
    assert sorted(p.nodes for p in two) == [(0, 1, 2), (0, 3, 2)]
    assert all(dep == 0 for p in two for _, dep in p.hops)
    assert [p.hops for p in paths if p.dst == 1] == [((1, 0),)]
    with pytest.raises(SliceDisconnected):
        opera_paths(round_robin(4, 1))


def test_ucmp_fig2_weights(fig2_schedule):
    paths = [p for p in ucmp_paths(fig2_schedule, max_hop=2, k=2, pairs=[(0, 3)]) if p.ts == 0]
    assert [p.hops for p in paths] == [((1, 0), (3, 1)), ((3, 2),)]
    # raw 1/3 and 1/4 normalized
    assert paths[0].weight == pytest.approx(4 / 7)
    assert paths[1].weight == pytest.approx(3 / 7)
    (best,) = [p for p in ucmp_paths(fig2_schedule, max_hop=2, k=1, pairs=[(0, 3)]) if p.ts == 0]
    assert best.weight == 1.0


def test_ucmp_weights_sum_to_one():
    s = round_robin(8, 2)
    sums = Counter()
    for p in ucmp_paths(s, max_hop=2, k=3):
        sums[(p.src, p.dst, p.ts)] += p.weight
    assert all(abs(v - 1) < 1e-12 for v in sums.values())


def test_hoho_fig2(fig2_schedule):
    plan = hoho_plan(fig2_schedule, 2)
    assert plan[(0, 3, 0)][:2] == (1, 0)
    assert plan[(1, 3, 0)][:2] == (3, 1)
    assert plan[(0, 1, 0)][:2] == (1, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 8), st.integers(2, 6))
def test_hoho_arrival_is_optimal(seed, n, cycle):
    s = random_schedule(random.Random(seed), n, cycle)
    n = s.node_count
    for d in range(n):
        try:
            plan = hoho_plan(s, 4, dsts=[d])
        except Unreachable:
            continue
        for (v, _, p), (_, _, arrival) in plan.items():
            best = earliest_path(s, v, d, p, 4)[0].arrival_offset(s.cycle_length)
            assert arrival == best
            walk = hoho_walk(plan, v, d, p, s.cycle_length)
            assert walk.arrival_offset(s.cycle_length) == best
            assert len(walk.hops) <= 4


# ---------------------------------------------------------------- compile


def test_fig3_per_hop_and_source(fig2_schedule):
    (p,) = earliest_path(fig2_schedule, 0, 3, 0, 2)
    hop = deploy_routing([p], fig2_schedule, "hop")
    assert hop[0].entries == (TimeFlowEntry(3, NextHop(1, 0), 0, 0),)
    assert hop[1].entries == (TimeFlowEntry(3, NextHop(2, 1), 0, 0),)
    src = deploy_routing([p], fig2_schedule, "source")
    assert list(src) == [0]
    assert src[0].entries == (TimeFlowEntry(3, SourceRoute(((1, 0), (2, 1))), 0, 0),)


def test_dst_only_keys():
    (p,) = earliest_path(fig2(), 0, 3, 0, 2)
    tables = deploy_routing([p], fig2(), "hop", match_src=False)
    assert tables[0].entries[0].src is None


def test_multipath_group_from_same_key():
    ring = OpticalSchedule.static_topology(RING)
    tables = deploy_routing(static_paths(ring, "ecmp", pairs=[(0, 2)]), ring, "hop", "flow")
    group = tables[0].entries
    assert len(group) == 2 and group[0].group.group_id == group[1].group.group_id
    assert {e.action.egress_port for e in group} == {0, 1}
    with pytest.raises(EntryConflict):
        deploy_routing(static_paths(ring, "ecmp", pairs=[(0, 2)]), ring, "hop", "none")


def test_path_without_circuit_is_invalid(fig2_schedule):
    bad = Path(0, 3, ((3, 0),), 0)
    with pytest.raises(PathInvalid):
        deploy_routing([bad], fig2_schedule)
    assert validate_paths([bad], fig2_schedule)


def test_vlb_per_packet_uniformity():
    s = round_robin(8, 1)
    tables = deploy_routing(vlb(s, pairs=[(0, 5)]), s, "hop", "packet")
    rng = random.Random(7)
    n = 12000
    counts = Counter(match_entry(tables[0], 0, 0, 5, ingress_ts_ns=i * 3.1, rng=rng).action for i in range(n))
    k = len(counts)
    assert k == 1  # u=1: one neighbor per slice
    s2 = round_robin(8, 3)
    tables = deploy_routing(vlb(s2, pairs=[(0, 5)]), s2, "hop", "packet")
    counts = Counter(match_entry(tables[0], 0, 0, 5, ingress_ts_ns=i * 3.1, rng=rng).action for i in range(n))
    k = len(counts)
    assert k == 3
    sigma = (n * (1 / k) * (1 - 1 / k)) ** 0.5
    assert all(abs(c - n / k) < 3 * sigma for c in counts.values())


def test_hoho_rules_compile(fig2_schedule):
    tables = deploy_routing(hoho_paths(fig2_schedule, 2), fig2_schedule, "hop")
    e = match_entry(tables[0], 0, 0, 3)
    assert e.action == NextHop(1, 0) and e.src is None


@pytest.mark.parametrize("u", [1, 2])
def test_hoho_optimal_on_round_robin(u):
    s = round_robin(8, u)
    plan = hoho_plan(s, 4)
    assert len(plan) == 8 * 7 * s.cycle_length
    for (v, d, p), (_, _, arrival) in plan.items():
        assert arrival == earliest_path(s, v, d, p, 4)[0].arrival_offset(s.cycle_length)
