import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shpcn.loadgen import (
    SCENARIOS,
    ArrivalProcess,
    LoadProfile,
    PaymentPools,
    RequestStream,
    ScenarioTable,
    arrival_times,
    build_profile,
    generate_requests,
    next_interarrival,
    sample_amount,
    sample_amounts,
    sample_payment,
    sample_payments,
)
from shpcn.topology import EURO, ROLE_CITIZEN, generate_topology

from conftest import small_params

N = 1_000_000
TOL = 0.005

# Mean of each amount bin in euro, written out by hand from the bin edges
# (uniform cents inside [lo, hi)). Used as an independent oracle.
BIN_MEANS_EUR = (2.50, 7.495, 14.995, 24.995, 39.995, 74.995, 550.0)
SHARES = (0.80, 0.17, 0.03)
ROWS = (
    (0.21, 0.17, 0.21, 0.13, 0.13, 0.10, 0.05),
    (0.10, 0.11, 0.20, 0.15, 0.17, 0.16, 0.11),
    (0.14, 0.11, 0.22, 0.16, 0.14, 0.11, 0.12),
)


def bin_of(amount, table):
    edges = [hi for _, hi in table.bins()]
    return np.searchsorted(edges, amount)


@pytest.fixture(scope="module")
def pools(small_topology):
    return PaymentPools(small_topology)


@pytest.fixture(scope="module")
def big_sample(pools):
    return sample_payments(N, pools, ScenarioTable(), np.random.default_rng(11))


def test_scenario_frequencies(big_sample):
    freq = np.bincount(big_sample["scenario"], minlength=3) / N
    assert np.allclose(freq, SHARES, atol=TOL), freq


def test_cross_border_fraction(big_sample):
    assert abs(big_sample["cross_border"].mean() - 0.05) < TOL


@pytest.mark.parametrize("scenario,row", [("POS", ROWS[0]), ("P2P", ROWS[2]), ("Online", ROWS[1])])
def test_bin_frequencies(scenario, row):
    table = ScenarioTable()
    idx = np.full(N, SCENARIOS.index(scenario))
    amounts = sample_amounts(idx, table, np.random.default_rng(5))
    freq = np.bincount(bin_of(amounts, table), minlength=7) / N
    assert np.allclose(freq, row, atol=TOL), freq


def test_bin_frequencies_chi_square():
    from scipy.stats import chisquare

    table = ScenarioTable()
    idx = np.zeros(N, dtype=np.int64)
    amounts = sample_amounts(idx, table, np.random.default_rng(9))
    obs = np.bincount(bin_of(amounts, table), minlength=7)
    assert chisquare(obs, np.asarray(ROWS[0]) * N).pvalue > 1e-4


def test_analytic_mean_oracle():
    oracle = sum(s * np.dot(r, BIN_MEANS_EUR) for s, r in zip(SHARES, ROWS))
    assert oracle == pytest.approx(56.18, abs=0.01)
    assert ScenarioTable().expected_amount() / EURO == pytest.approx(oracle, rel=1e-4)


def test_average_day_deterministic_count_and_volume(pools):
    stream = generate_requests(pools, build_profile("average_day", "deterministic"), ScenarioTable(), 0)
    assert len(stream) == 172_800
    volume_eur = stream.total_value() / EURO
    assert abs(volume_eur - 9.75e6) / 9.75e6 < 0.02, volume_eur


def test_peak_day_deterministic_count():
    t = arrival_times(build_profile("peak-day", ArrivalProcess.DETERMINISTIC), np.random.default_rng(0))
    assert len(t) == 2 * 7 * 3600 + 20 * 12 * 3600 + 2 * 5 * 3600 == 950_400
    assert np.all(np.diff(t) > 0)


def test_poisson_count_close_to_expectation():
    prof = build_profile("average_day")
    t = arrival_times(prof, np.random.default_rng(1))
    assert abs(len(t) - 172_800) < 5 * np.sqrt(172_800)
    assert np.all(np.diff(t) >= 0) and t[0] >= 0 and t[-1] < prof.duration


def test_next_interarrival():
    rng = np.random.default_rng(0)
    assert next_interarrival(4.0, rng, "deterministic") == 0.25
    gaps = [next_interarrival(2.0, rng) for _ in range(20000)]
    assert np.mean(gaps) == pytest.approx(0.5, rel=0.03)
    with pytest.raises(ValueError):
        next_interarrival(0.0, rng)


def test_receiver_roles_and_countries(small_topology, big_sample, pools):
    nodes = small_topology.nodes
    s, r, sc, cb = (big_sample[k][:50_000] for k in ("sender", "receiver", "scenario", "cross_border"))
    for i in range(len(s)):
        snd, rcv = nodes[s[i]], nodes[r[i]]
        assert snd.role == ROLE_CITIZEN and rcv.id != snd.id
        if sc[i] == 2:
            assert rcv.role == ROLE_CITIZEN
        else:
            assert rcv.is_merchant
        assert (rcv.country != snd.country) == bool(cb[i])


def test_amount_bounds(big_sample):
    a = big_sample["amount"]
    assert a.min() >= 1 and a.max() <= 1000 * EURO


@given(top=st.integers(100 * EURO, 5000 * EURO), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_amounts_within_bins(top, seed):
    table = ScenarioTable(top_bin_max=top)
    rng = np.random.default_rng(seed)
    a = sample_amounts(rng.integers(3, size=500), table, rng)
    assert a.min() >= 1 and a.max() <= top
    for sc in SCENARIOS:
        assert 1 <= sample_amount(sc, table, rng) <= top


def test_forced_choice():
    """Degenerate rows pin the bin; a one-bin row forces the top bin range."""
    rows = {s: (0, 0, 0, 0, 0, 0, 1) for s in SCENARIOS}
    table = ScenarioTable(bin_probs=rows, top_bin_max=100 * EURO)
    rng = np.random.default_rng(0)
    assert {sample_amount(s, table, rng) for s in SCENARIOS} == {100 * EURO}
    only_p2p = ScenarioTable(scenario_shares=(0, 0, 1), cross_border_prob=1.0)
    topo = generate_topology(small_params())
    req = sample_payment(only_p2p, topo, 12.5, rng, request_id=7)
    assert req.scenario == "P2P" and req.cross_border and req.id == 7 and req.created_at == 12.5
    assert topo.nodes[req.receiver].role == ROLE_CITIZEN
    assert topo.nodes[req.receiver].country != topo.nodes[req.sender].country


def test_table_validation():
    with pytest.raises(ValueError):
        ScenarioTable(cross_border_prob=1.5)
    with pytest.raises(ValueError):
        ScenarioTable(top_bin_max=99 * EURO)
    t = ScenarioTable(scenario_shares=(8, 1.7, 0.3))
    assert sum(t.scenario_shares) == pytest.approx(1.0)
    assert all(sum(r) == pytest.approx(1.0, abs=1e-9) for r in t.bin_probs.values())
    bins = t.bins()
    assert all(lo <= hi < nlo for (lo, hi), (nlo, _) in zip(bins, bins[1:]))


def test_profile_validation():
    with pytest.raises(ValueError):
        LoadProfile(())
    with pytest.raises(ValueError):
        LoadProfile(((0.0, 10.0, 0.0),))
    with pytest.raises(ValueError):
        LoadProfile(((0.0, 10.0, 1.0), (5.0, 20.0, 1.0)))
    with pytest.raises(ValueError):
        build_profile("weekend")
    assert build_profile("peak_day").expected_count() == 950_400


def test_pools_need_merchants_everywhere(small_topology):
    from dataclasses import replace

    nodes = tuple(replace(n, role=ROLE_CITIZEN) if n.is_merchant and n.country == 0 else n
                  for n in small_topology.nodes)
    with pytest.raises(ValueError, match="country 0"):
        PaymentPools(replace(small_topology, nodes=nodes))


def test_same_seed_same_stream(pools):
    prof = LoadProfile(((0.0, 600.0, 5.0),))
    a = generate_requests(pools, prof, ScenarioTable(), 4)
    b = generate_requests(pools, prof, ScenarioTable(), 4)
    c = generate_requests(pools, prof, ScenarioTable(), 5)
    assert a.to_csv() == b.to_csv() != c.to_csv()


def test_csv_round_trip(pools):
    s = generate_requests(pools, LoadProfile(((0.0, 300.0, 3.0),)), ScenarioTable(), 2)
    text = s.to_csv()
    assert text.splitlines()[0] == "id,time_s,sender,receiver,amount_cents,scenario,cross_border"
    back = RequestStream.from_csv(text)
    assert back.to_csv() == text
    assert np.array_equal(back.time_s, s.time_s)
    assert back[3] == s[3]
    with pytest.raises(ValueError, match="header"):
        RequestStream.from_csv("a,b\n1,2\n")
