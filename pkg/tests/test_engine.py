import itertools
import re
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from shpcn.engine import Network, Simulation, run
from shpcn.loadgen import LoadProfile, ScenarioTable, generate_requests
from shpcn.metrics import write_latency_cdf, write_rebalance_per_minute
from shpcn.model import MS, US, EventKind, InvariantError, SimConfig, Status
from shpcn.topology import EURO, generate_topology

from conftest import CIT, LSP, MER, custom_topology, line_topology, small_params, stream

HOP = 100 * MS
NONE = SimConfig(rebalancing="none")
E = EventKind


def run_stream(topo, rows, config=NONE, trace=False):
    sim = Simulation(topo, config, trace=trace)
    log = sim.run(stream(rows))
    return sim, log


# --------------------------------------------------------------- routing


def brute_force_route(topo, src, dst, amount, excluded=()):
    """Smallest (hop count, node sequence) simple path satisfying the rules."""
    adj = {}
    for ch in topo.channels:
        adj.setdefault(ch.a, []).append((ch.b, ch.id, 0))
        adj.setdefault(ch.b, []).append((ch.a, ch.id, 1))
    bal = {(ch.id, 0): ch.balance_a for ch in topo.channels}
    bal.update({(ch.id, 1): ch.balance_b for ch in topo.channels})
    cap = {ch.id: ch.capacity for ch in topo.channels}
    best = None

    def walk(u, nodes, hops):
        nonlocal best
        if u == dst:
            key = (len(hops), nodes)
            if best is None or key < best[0]:
                best = (key, list(hops))
            return
        for v, c, s in adj.get(u, []):
            if v in nodes or cap[c] < amount or (c, s) in excluded:
                continue
            if not hops and bal[(c, s)] < amount:
                continue
            walk(v, nodes + (v,), hops + [(c, s)])

    if src != dst and amount > 0:
        walk(src, (src,), [])
    return None if best is None else best[1]


@st.composite
def small_graphs(draw, max_nodes=6):
    n = draw(st.integers(2, max_nodes))
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, min_size=1, max_size=len(pairs)))
    chans = []
    for a, b in chosen:
        cap = draw(st.integers(0, 10))
        ba = draw(st.integers(0, cap))
        chans.append((a, b, cap, ba, cap - ba))
    return custom_topology([LSP] * n, chans)


@given(topo=small_graphs(), data=st.data())
@settings(max_examples=300, deadline=None)
def test_routing_matches_brute_force(topo, data):
    n = len(topo.nodes)
    src = data.draw(st.integers(0, n - 1))
    dst = data.draw(st.integers(0, n - 1))
    amount = data.draw(st.integers(0, 11))
    hops = [(c.id, s) for c in topo.channels for s in (0, 1)]
    excluded = set(data.draw(st.lists(st.sampled_from(hops), max_size=3)))
    net = Network(topo)
    assert net.find_path(src, dst, amount, excluded or None) == brute_force_route(topo, src, dst, amount, excluded)


def test_route_examples():
    # two citizens on one LSP
    t = custom_topology([CIT, LSP, CIT], [(1, 0, 10, 5, 5), (1, 2, 10, 5, 5)])
    assert Network(t).find_path(0, 2, 3) == [(0, 1), (1, 0)]
    # sender balance too small and nothing else to use
    assert Network(t).find_path(0, 2, 6) is None
    # hop count = 2 + LSP mesh distance
    t = custom_topology([CIT, LSP, LSP, LSP, MER],
                        [(1, 0, 10, 5, 5), (1, 2, 10, 5, 5), (2, 3, 10, 5, 5), (3, 4, 10, 5, 5)])
    assert len(Network(t).find_path(0, 4, 1)) == 2 + 2


def test_route_ties_pick_smallest_next_node():
    # square 0-1-3 and 0-2-3: both two hops, node 1 wins
    t = custom_topology([LSP] * 4, [(0, 2, 10, 5, 5), (2, 3, 10, 5, 5), (0, 1, 10, 5, 5), (1, 3, 10, 5, 5)])
    route = Network(t).find_path(0, 3, 1)
    assert route == [(2, 0), (3, 0)]


def test_route_cache_respects_capacity(small_topology):
    net = Network(small_topology)
    cit = small_topology.ids_by_role("citizen")
    mer = small_topology.ids_by_role("merchant-S")
    for a, b in itertools.product(cit[:20], mer[:20]):
        for amount in (100, 150_000):
            got = net.find_path(a, b, amount)
            assert got == brute_force_route_fast(net, a, b, amount)


def brute_force_route_fast(net, src, dst, amount):
    """Plain BFS with sorted neighbours (no leaf shortcuts, no cache)."""
    # backwards distances, then greedy forward for the tie-break rule
    dist = {dst: 0}
    frontier = [dst]
    while frontier:
        nxt = []
        for v in frontier:
            for u, c, sv in net.nbrs[v]:
                s = 1 - sv
                if u in dist or net.cap[c] < amount:
                    continue
                if u == src and net.bal[2 * c + s] < amount:
                    continue
                if u != src and u != dst and net.leaf[u]:
                    continue
                dist[u] = dist[v] + 1
                nxt.append(u)
        frontier = nxt
    if src not in dist or src == dst:
        return None
    route, u = [], src
    while u != dst:
        for v, c, s in net.nbrs[u]:
            if dist.get(v) == dist[u] - 1 and net.cap[c] >= amount and (u != src or net.bal[2 * c + s] >= amount):
                route.append((c, s))
                u = v
                break
    return route


# ------------------------------------------------------- HTLC life cycle


def test_lock_and_settle_single_channel():
    t = custom_topology([LSP, LSP], [(0, 1, 100, 100, 0)])
    sim, log = run_stream(t, [(0.0, 0, 1, 40)])
    assert sim.channel_states() == [(60, 40, 0)]
    assert log.retail_status[0] == Status.SUCCEEDED


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_completion_time_is_two_n_hops(n):
    t = line_topology(caps=(100,) * n)
    _, log = run_stream(t, [(1.0, 0, n, 30)])
    assert log.retail_status[0] == Status.SUCCEEDED
    assert log.retail_completed[0] - log.retail_created[0] == 2 * n * HOP
    assert log.retail_latency_ms().tolist() == [2 * n * 100.0]


def test_middle_hop_failure_unwinds_to_initial_state():
    t = line_topology(caps=(100, 100, 100), balances=[(100, 0), (10, 90), (100, 0)])
    sim, log = run_stream(t, [(0.0, 0, 3, 50)], trace=True)
    assert sim.channel_states() == [(100, 0, 0), (10, 90, 0), (100, 0, 0)]
    assert log.retail_status[0] == Status.FAILED
    assert log.failure_reasons() == {"no-route": 1}
    kinds = [k for (_, k, pid, _) in sim.trace if pid == 0]
    # node 1 cannot forward, so the failure goes straight back to the sender
    assert kinds == [E.GENERATE_PAYMENT, E.FIND_PATH, E.SEND_PAYMENT, E.FORWARD_PAYMENT,
                     E.RECEIVE_FAIL, E.FIND_PATH]


def test_success_trace_follows_event_diagram():
    t = line_topology(caps=(100, 100, 100))
    sim, _ = run_stream(t, [(0.0, 0, 3, 5)], trace=True)
    got = [(k, hop) for (_, k, pid, hop) in sim.trace if pid == 0]
    assert got == [(E.GENERATE_PAYMENT, 0), (E.FIND_PATH, 0), (E.SEND_PAYMENT, 0), (E.FORWARD_PAYMENT, 1),
                   (E.FORWARD_PAYMENT, 2), (E.RECEIVE_PAYMENT, 3), (E.FORWARD_SUCCESS, 2),
                   (E.FORWARD_SUCCESS, 1), (E.RECEIVE_SUCCESS, 0)]
    times = [tt for (tt, _, pid, _) in sim.trace if pid == 0]
    assert times[3:] == [k * HOP for k in range(1, 7)]


def test_retry_excludes_failed_hop_and_takes_detour():
    # 0 -> 1 -> 3 is shortest but 1 -> 3 is empty on 1's side; 0 -> 2 -> 3 works
    t = custom_topology([LSP] * 4, [(0, 1, 100, 100, 0), (1, 3, 100, 0, 100), (0, 2, 100, 100, 0), (2, 3, 100, 100, 0)])
    sim, log = run_stream(t, [(0.0, 0, 3, 10)], trace=True)
    assert log.retail_status[0] == Status.SUCCEEDED
    assert log.retail_attempts[0] == 2
    # first attempt: 1 hop out and 1 back, then 2 hops each way
    assert log.retail_completed[0] == 2 * HOP + 4 * HOP
    assert sim.channel_states() == [(100, 0, 0), (0, 100, 0), (90, 10, 0), (90, 10, 0)]


def test_no_route_fails_immediately():
    t = custom_topology([LSP, LSP, LSP], [(0, 1, 5, 5, 0), (1, 2, 5, 5, 0)])
    _, log = run_stream(t, [(0.0, 0, 2, 6)])
    assert log.failure_reasons() == {"no-route": 1}
    assert log.retail_completed[0] == 0


def test_deadline_expiry_is_timeout():
    # every attempt fails 4 hops deep; 16 parallel 5-hop ladders keep giving new routes
    n_paths = 16
    nodes = [LSP, LSP]
    chans = []
    for i in range(n_paths):
        base = len(nodes)
        nodes += [LSP] * 4
        seq = [0, base, base + 1, base + 2, base + 3, 1]
        for j, (a, b) in enumerate(zip(seq, seq[1:])):
            bal = 0 if j == 4 else 100
            chans.append((a, b, 100, bal, 100 - bal))
    t = custom_topology(nodes, chans)
    _, log = run_stream(t, [(0.0, 0, 1, 10)])
    assert log.failure_reasons() == {"timeout": 1}
    assert log.retail_completed[0] >= 10 * US
    # an attempt costs 2 * 4 hops; retries only start before the deadline
    assert log.retail_attempts[0] == 13


def test_time_cannot_go_backwards():
    t = line_topology()
    sim = Simulation(t, NONE)
    sim.now = 5
    with pytest.raises(InvariantError):
        sim.schedule(4, E.FIND_PATH, None)


def test_empty_profile():
    t = generate_topology(small_params())
    sim = Simulation(t, SimConfig())
    before = sim.channel_states()
    log = sim.run(stream([]))
    assert log.n_retail == 0 and sim.channel_states() == before
    assert run(t, None).n_retail == 0


# ------------------------------------------------ brute-force executor


def sequential_oracle(topo, rows, hop=HOP, deadline=10 * US):
    """Balances after running ``rows`` one at a time without rebalancing."""
    bal = {}
    for ch in topo.channels:
        bal[(ch.id, 0)], bal[(ch.id, 1)] = ch.balance_a, ch.balance_b
    outcome = []
    for t0, src, dst, amount in rows:
        t = int(t0 * US)
        end = t + deadline
        excluded = set()
        result = None
        while result is None:
            if t >= end:
                result = "timeout"
                break
            cur = replace(topo, channels=tuple(replace(ch, balance_a=bal[(ch.id, 0)], balance_b=bal[(ch.id, 1)])
                                               for ch in topo.channels))
            route = brute_force_route(cur, src, dst, amount, excluded)
            if route is None:
                result = "no-route"
                break
            fail = next((k for k, h in enumerate(route) if bal[h] < amount), None)
            if fail is None:
                if t + 2 * len(route) * hop > end:
                    # the receiver refuses an HTLC it cannot settle in time
                    result = "timeout"
                    break
                for c, s in route:
                    bal[(c, s)] -= amount
                    bal[(c, 1 - s)] += amount
                result = "ok"
            else:
                excluded.add(route[fail])
                t += 2 * fail * hop
        outcome.append(result)
    return bal, outcome


@given(topo=small_graphs(), data=st.data())
@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_engine_matches_sequential_oracle(topo, data):
    n = len(topo.nodes)
    rows = []
    for i in range(data.draw(st.integers(1, 20))):
        src = data.draw(st.integers(0, n - 1))
        dst = (src + data.draw(st.integers(1, n - 1))) % n
        rows.append((30.0 * i, src, dst, data.draw(st.integers(1, 10))))
    sim, log = run_stream(topo, rows, SimConfig(rebalancing="none", check_every_event=True))
    bal, outcome = sequential_oracle(topo, rows)
    for c, (a, b, locked) in enumerate(sim.channel_states()):
        assert (a, b, locked) == (bal[(c, 0)], bal[(c, 1)], 0)
    ok = [o == "ok" for o in outcome]
    assert (log.retail_status == Status.SUCCEEDED).tolist() == ok


# ----------------------------------------------------- run properties


TRANSITIONS = {
    E.GENERATE_PAYMENT: {E.FIND_PATH},
    # FIND_PATH -> FIND_PATH: the payment waited for a withdrawal
    E.FIND_PATH: {E.SEND_PAYMENT, E.FIND_PATH},
    E.SEND_PAYMENT: {E.FORWARD_PAYMENT, E.RECEIVE_PAYMENT, E.FIND_PATH},
    E.FORWARD_PAYMENT: {E.FORWARD_PAYMENT, E.RECEIVE_PAYMENT, E.FORWARD_FAIL, E.RECEIVE_FAIL, E.NOTIFY_PAYMENT},
    E.NOTIFY_PAYMENT: {E.FORWARD_PAYMENT, E.FORWARD_FAIL, E.RECEIVE_FAIL},
    E.RECEIVE_PAYMENT: {E.FORWARD_SUCCESS, E.RECEIVE_SUCCESS, E.FORWARD_FAIL, E.RECEIVE_FAIL},
    E.FORWARD_SUCCESS: {E.FORWARD_SUCCESS, E.RECEIVE_SUCCESS},
    E.FORWARD_FAIL: {E.FORWARD_FAIL, E.RECEIVE_FAIL},
    E.RECEIVE_FAIL: {E.FIND_PATH},
    E.RECEIVE_SUCCESS: set(),
}


def short_profile(seconds=120.0, pps=20.0):
    return LoadProfile(((0.0, seconds, pps),))


@given(seed=st.integers(0, 2**31), mode=st.sampled_from(["full", "waterfall-only", "none"]),
       liq=st.sampled_from([0, 50 * EURO, 500 * EURO, 5000 * EURO]))
@settings(max_examples=12, deadline=None)
def test_invariants_hold_after_every_event(seed, mode, liq):
    topo = generate_topology(small_params(seed=seed % 1000, lsp_lsp_capacity=liq, cb_lsp_capacity=liq))
    cfg = SimConfig(rebalancing=mode, seed=seed, check_every_event=True)
    sim = Simulation(topo, cfg, trace=True)
    reqs = generate_requests(topo, short_profile(), ScenarioTable(), seed)
    total = sim.net.total_value()
    log = sim.run(reqs)
    assert sim.net.total_value() == total == sum(c.capacity for c in topo.channels)
    assert not any(sim.net.locked)
    for c, ch in enumerate(topo.channels):
        for s in (0, 1):
            assert 0 <= sim.net.bal[2 * c + s] <= ch.capacity
    # every retail payment ends, within its deadline when it succeeds
    assert (log.retail_status != Status.PENDING).all()
    ok = log.retail_status == Status.SUCCEEDED
    assert ((log.retail_completed - log.retail_created)[ok] <= 10 * US).all()
    # event diagram: per-payment kind sequences follow the allowed transitions
    seqs = {}
    for _, kind, pid, _ in sim.trace:
        if pid >= 0:
            seqs.setdefault(pid, []).append(E(kind))
    for pid, kinds in seqs.items():
        for a, b in zip(kinds, kinds[1:]):
            assert b in TRANSITIONS[a], (pid, kinds)
        if pid < len(reqs) and log.retail_status[pid] == Status.SUCCEEDED:
            assert kinds[-1] == E.RECEIVE_SUCCESS
    # no swap ever overlaps another on the same channel
    acts = [a for a in log.actions() if a.kind == 2]
    by_chan = {}
    for a in acts:
        by_chan.setdefault(a.channel, []).append((a.initiated_at, a.completed_at))
    for spans in by_chan.values():
        spans.sort()
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            assert e1 <= s2


def test_replay_is_byte_identical(tmp_path, small_topology):
    cfg = SimConfig(seed=7)
    logs = [run(small_topology, short_profile(300), ScenarioTable(), cfg) for _ in range(2)]
    assert logs[0].equals(logs[1])
    for i, log in enumerate(logs):
        write_latency_cdf(tmp_path / f"lat{i}.csv", log)
        write_rebalance_per_minute(tmp_path / f"reb{i}.csv", log)
    assert (tmp_path / "lat0.csv").read_bytes() == (tmp_path / "lat1.csv").read_bytes()
    assert (tmp_path / "reb0.csv").read_bytes() == (tmp_path / "reb1.csv").read_bytes()
    other = run(small_topology, short_profile(300), ScenarioTable(), SimConfig(seed=8))
    assert not other.equals(logs[0])


def test_rebalancing_off_is_plain_pcn(small_topology):
    """With every mechanism off no deposit, withdrawal or swap ever happens."""
    log = run(small_topology, short_profile(), ScenarioTable(), SimConfig(rebalancing="none", seed=3))
    assert len(log.action_kind) == 0 and len(log.other_kind) == 0 and len(log.l1_times) == 0
    reasons = set(log.failure_reasons())
    assert reasons <= {"no-route", "timeout", "cap-exceeded", "insufficient-balance"}


def test_trace_kinds_are_the_ten_of_the_diagram():
    assert len(EventKind) == 10
    names = {re.sub("_", "", k.name.lower()) for k in EventKind}
    assert names == {"generatepayment", "findpath", "sendpayment", "forwardpayment", "receivepayment",
                     "forwardsuccess", "receivesuccess", "forwardfail", "receivefail", "notifypayment"}


def test_invariant_breach_is_detected():
    t = line_topology()
    sim = Simulation(t, SimConfig(rebalancing="none", check_every_event=True))
    sim.net.bal[0] += 1  # corrupt channel 0
    with pytest.raises(InvariantError, match="channel 0"):
        sim.run(stream([(0.0, 0, 2, 5)]))


def test_mixed_run_counts(small_topology):
    log = run(small_topology, short_profile(600, 2), ScenarioTable(), SimConfig(seed=1))
    assert abs(log.n_retail - 1200) < 5 * np.sqrt(1200)


def test_bad_requests_rejected():
    topo = line_topology(caps=(1000, 1000))
    for rows, msg in (([(0.0, 0, 9, 10)], "not in the topology"), ([(0.0, 0, 2, 0)], "positive"),
                      ([(1.0, 0, 2, 5), (0.5, 0, 2, 5)], "sorted")):
        with pytest.raises(ValueError, match=msg):
            Simulation(topo, SimConfig()).run(stream(rows))
