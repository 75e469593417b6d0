import pytest

from shpcn.topology import (
    EURO,
    TIER_CB,
    TIER_EU,
    TIER_LSP,
    Channel,
    Node,
    Topology,
    TopologyParams,
    generate_topology,
)


def small_params(**kw) -> TopologyParams:
    base = dict(
        num_countries=2,
        country_populations=(300, 600),
        citizens_per_merchant=30,
        citizens_per_lsp=100,
        cb_lsp_capacity=2_000 * EURO,
        lsp_lsp_capacity=2_000 * EURO,
        seed=3,
    )
    base.update(kw)
    return TopologyParams(**base)


def line_topology(caps=(100, 100), balances=None) -> Topology:
    """Hand-built chain citizen(0) - lsp(1) - ... - merchant(n).

    Inner nodes are LSPs so that the engine treats the ends as end users.
    """
    n = len(caps) + 1
    nodes = []
    for i in range(n):
        if i == 0:
            nodes.append(Node(i, TIER_EU, "citizen", 0))
        elif i == n - 1:
            nodes.append(Node(i, TIER_EU, "merchant-S", 0))
        else:
            nodes.append(Node(i, TIER_LSP, "lsp", 0))
    chans = []
    for i, cap in enumerate(caps):
        a, b = (balances[i] if balances else (cap, 0))
        chans.append(Channel(i, i, i + 1, cap, a, b))
    return Topology(tuple(nodes), tuple(chans), TopologyParams(num_countries=1, country_populations=(1,)))


def custom_topology(node_specs, channel_specs) -> Topology:
    """node_specs: list of (tier, role); channel_specs: (a, b, cap, bal_a, bal_b)."""
    nodes = tuple(Node(i, t, r, 0) for i, (t, r) in enumerate(node_specs))
    chans = tuple(Channel(i, *spec) for i, spec in enumerate(channel_specs))
    return Topology(nodes, chans, TopologyParams(num_countries=1, country_populations=(1,)))


CB = (TIER_CB, "cb")
LSP = (TIER_LSP, "lsp")
CIT = (TIER_EU, "citizen")
MER = (TIER_EU, "merchant-S")


@pytest.fixture(scope="session")
def small_topology():
    return generate_topology(small_params())


def stream(rows):
    """RequestStream from (time_s, sender, receiver, amount) rows."""
    import numpy as np

    from shpcn.loadgen import RequestStream

    rows = list(rows)
    col = lambda i, dt: np.array([r[i] for r in rows], dtype=dt)
    n = len(rows)
    return RequestStream(col(0, float), col(1, np.int64), col(2, np.int64), col(3, np.int64),
                         np.zeros(n, np.int64), np.zeros(n, bool))
