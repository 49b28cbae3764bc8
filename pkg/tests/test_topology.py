import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optonet.core import Circuit
from optonet.topology import (
    InfeasibleTopology,
    InvalidGrid,
    InvalidNodeCount,
    ScheduleBuilder,
    bvn_decompose,
    bvn_schedule,
    connect,
    deploy_topo,
    edmonds_matching,
    jupiter_evolve,
    largest_remainder,
    matching_weight,
    multidim_round_robin,
    round_robin,
    sorn,
    uniform_mesh,
)


def perfect_matchings(nodes):
    if not nodes:
        yield []
        return
    a = nodes[0]
    for i in range(1, len(nodes)):
        b = nodes[i]
        rest = nodes[1:i] + nodes[i + 1 :]
        for m in perfect_matchings(rest):
            yield [(a, b)] + m


def brute_force_matching_weight(tm) -> float:
    w = np.asarray(tm) + np.asarray(tm).T
    return max(sum(w[a, b] for a, b in m) for m in perfect_matchings(list(range(len(tm)))))


def port_exclusive(schedule) -> bool:
    for sl in schedule.slices:
        ends = [e for c in sl for e in c.ends]
        if len(ends) != len(set(ends)):
            return False
    return True


# ---------------------------------------------------------------- connect


def test_connect_rejects_port_reuse():
    b = ScheduleBuilder(3)
    assert connect(Circuit(0, 0, 1, 0, 0), b)
    assert not connect(Circuit(0, 0, 2, 0, 0), b)
    assert b.slices[0] == [Circuit(0, 0, 1, 0, 0)]
    # a different port of N1 is free at ts 1
    assert connect(Circuit(1, 1, 3, 0, 1), b)


# ---------------------------------------------------------------- round robin


def test_round_robin_n4():
    s = round_robin(4, 1)
    assert s.cycle_length == 3
    edges = set()
    for sl in s.slices:
        assert len(sl) == 2
        assert sorted(v for c in sl for v in (c.n1, c.n2)) == [0, 1, 2, 3]
        edges |= {(c.n1, c.n2) for c in sl}
    assert len(edges) == 6


def test_round_robin_cycle_formula():
    assert round_robin(8, 2).cycle_length == 4


def test_round_robin_rejects_odd():
    with pytest.raises(InvalidNodeCount):
        round_robin(7, 1)


def test_multidim_degenerates_to_round_robin():
    assert multidim_round_robin(4, 1).slices == round_robin(4, 1).slices


def test_multidim_grid():
    s = multidim_round_robin(4, 2)
    assert s.cycle_length == 6
    for sl in s.slices:
        assert sorted(v for c in sl for v in (c.n1, c.n2)) == list(range(16))
    assert port_exclusive(s)
    seen = {(c.n1, c.n2) for sl in s.slices for c in sl}
    for a, b in itertools.combinations(range(16), 2):
        one_digit = sum(x != y for x, y in zip(divmod(a, 4), divmod(b, 4))) == 1
        assert ((a, b) in seen) == one_digit
    with pytest.raises(InvalidGrid):
        multidim_round_robin(3, 2)
    with pytest.raises(InvalidGrid):
        multidim_round_robin(4, 2, node_count=15)


# ---------------------------------------------------------------- matchings


def test_edmonds_example():
    tm = np.ones((4, 4))
    np.fill_diagonal(tm, 0)
    tm[0, 1] = tm[1, 0] = tm[2, 3] = tm[3, 2] = 10
    m = edmonds_matching(tm)
    assert {(c.n1, c.n2) for c in m} == {(0, 1), (2, 3)}
    # (10 + 10) per circuit; also the brute-force optimum
    assert matching_weight(tm, m) == 40 == brute_force_matching_weight(tm)
    assert all(c.port1 == 0 and c.port2 == 0 for c in m)


def test_edmonds_zero_and_uniform_are_perfect():
    for tm in (np.zeros((6, 6)), np.ones((6, 6))):
        m = edmonds_matching(tm)
        assert sorted(v for c in m for v in (c.n1, c.n2)) == list(range(6))
        assert edmonds_matching(tm) == m


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6))
def test_edmonds_matches_brute_force(half, seed):
    n = 2 * half
    tm = np.random.default_rng(seed).integers(0, 100, (n, n)).astype(float)
    assert matching_weight(tm, edmonds_matching(tm)) == pytest.approx(brute_force_matching_weight(tm))


# ---------------------------------------------------------------- BvN


def test_bvn_two_nodes():
    s = bvn_schedule([[0, 2], [2, 0]], 2)
    assert [(c.n1, c.n2) for c in s.slices[0]] == [(c.n1, c.n2) for c in s.slices[1]] == [(0, 1)]


def test_bvn_three_node_mixture():
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], float)
    cyc = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], float)
    tm = 3 * swap + 5 * cyc
    dec = bvn_decompose(tm)
    assert np.allclose(dec.reconstruct(), dec.normalized, atol=1e-9)
    assert np.allclose(dec.normalized.sum(axis=0), 1) and np.allclose(dec.normalized.sum(axis=1), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_bvn_permutations_valid(seed):
    tm = np.random.default_rng(seed).random((6, 6))
    dec = bvn_decompose(tm)
    for perm in dec.permutations:
        assert sorted(perm) == list(range(6))
    assert sum(dec.weights) == pytest.approx(1.0)
    assert len(dec.permutations) <= 6 * 6 - 2 * 6 + 2


def test_bvn_schedule_port_exclusive():
    tm = np.random.default_rng(3).random((6, 6))
    assert port_exclusive(bvn_schedule(tm, 12))


def test_largest_remainder():
    assert largest_remainder([0.5, 0.3, 0.2], 10) == [5, 3, 2]
    assert sum(largest_remainder([0.7, 0.2, 0.1], 7)) == 7
    assert min(largest_remainder([0.98, 0.01, 0.01], 3)) == 1


# ---------------------------------------------------------------- jupiter / sorn


def test_uniform_mesh_degrees():
    mesh = jupiter_evolve(node_count=4, uplinks=2)
    assert mesh == uniform_mesh(4, 2)
    deg = [0] * 4
    for c in mesh:
        deg[c.n1] += 1
        deg[c.n2] += 1
    assert deg == [2, 2, 2, 2]


def test_jupiter_follows_demand():
    tm = np.zeros((4, 4))
    tm[0, 3] = tm[3, 0] = 100
    prev = [Circuit(0, 0, 1, 0), Circuit(2, 0, 3, 0)]
    out = jupiter_evolve(tm, prev, change_budget=2)
    assert (0, 3) in {(c.n1, c.n2) for c in out}
    assert jupiter_evolve(tm, prev, change_budget=0) == sorted(prev)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 4))
def test_jupiter_respects_budget(seed, budget):
    rng = np.random.default_rng(seed)
    tm = rng.random((8, 8))
    prev = uniform_mesh(8, 2)
    out = jupiter_evolve(tm, prev, change_budget=budget)
    assert len(set(out) - set(prev)) <= budget
    deploy_topo(out)


def test_sorn_duplicates_hot_matching():
    tm = np.zeros((8, 8))
    tm[0, 7] = 1000
    s = sorn(tm, top_k=1)
    assert s.cycle_length == 8
    hits = sum(any((c.n1, c.n2) == (0, 7) for c in sl) for sl in s.slices)
    assert hits == 2
    assert port_exclusive(s)


# ---------------------------------------------------------------- deploy_topo


def test_deploy_topo(fig2_schedule):
    lookup = deploy_topo(fig2_schedule)
    assert lookup.cycle_length == 3
    assert lookup.peer(1, 2, 1) == (3, 2)
    assert lookup.peer(1, 2, 0) is None
    static = deploy_topo([Circuit(0, 0, 1, 0)])
    assert static.static and static.peer(0, 0, 12345) == (1, 0)


def test_deploy_topo_names_conflict():
    a, b = Circuit(0, 0, 1, 0), Circuit(0, 0, 2, 0)
    with pytest.raises(InfeasibleTopology) as err:
        deploy_topo([a, b])
    assert set(err.value.conflict) == {a, b}


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([4, 6, 8, 10, 12]), st.integers(1, 3))
def test_generators_port_exclusive(n, u):
    u = min(u, n - 1)
    s = round_robin(n, u)
    assert port_exclusive(s)
    assert s.cycle_length == math.ceil((n - 1) / u)
    deploy_topo(s)
