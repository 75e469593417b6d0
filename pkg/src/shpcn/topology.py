"""Random semi-hierarchical PCN instances.

A topology has three tiers: central banks (one per country, fully meshed),
LSPs (each attached to the CB of its country and meshed among themselves
with a Watts-Strogatz graph) and end users (citizens and merchants, each
with exactly one channel to an LSP of their own country).

Money is always integer cents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

EURO = 100  # cents

TIER_CB = "central-bank"
TIER_LSP = "lsp"
TIER_EU = "end-user"
TIERS = (TIER_CB, TIER_LSP, TIER_EU)

ROLE_CB = "cb"
ROLE_LSP = "lsp"
ROLE_CITIZEN = "citizen"
MERCHANT_SIZES = ("S", "M", "L")
MERCHANT_ROLES = tuple(f"merchant-{s}" for s in MERCHANT_SIZES)
ROLES = (ROLE_CB, ROLE_LSP, ROLE_CITIZEN) + MERCHANT_ROLES

_TIER_OF_ROLE = {ROLE_CB: TIER_CB, ROLE_LSP: TIER_LSP, ROLE_CITIZEN: TIER_EU}
_TIER_OF_ROLE.update({r: TIER_EU for r in MERCHANT_ROLES})


class TopologyError(ValueError):
    """Invalid generator parameters or a malformed topology document."""


@dataclass(frozen=True)
class Node:
    id: int
    tier: str
    role: str
    country: int

    @property
    def is_eu(self) -> bool:
        return self.tier == TIER_EU

    @property
    def is_merchant(self) -> bool:
        return self.role in MERCHANT_ROLES


@dataclass(frozen=True)
class Channel:
    id: int
    a: int
    b: int
    capacity: int
    balance_a: int
    balance_b: int
    locked: int = 0


@dataclass(frozen=True)
class TopologyParams:
    """Inputs of :func:`generate_topology`.

    ``country_populations`` holds the number of citizens per country at model
    scale. Merchant and LSP totals are derived from it through
    ``citizens_per_merchant`` / ``citizens_per_lsp`` unless given explicitly.
    """

    num_countries: int = 3
    country_populations: tuple[int, ...] = (4477, 26866, 268657)
    citizens_per_merchant: int = 100
    citizens_per_lsp: int = 10_000
    num_lsps: int | None = None
    num_merchants: int | None = None
    cb_clique_capacity: int = 500_000_000 * EURO
    cb_lsp_capacity: int = 0
    lsp_lsp_capacity: int = 0
    ws_degree: int = 4
    ws_rewire_prob: float = 0.1
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 1.0
    citizen_cap: int = 3000 * EURO
    merchant_caps: tuple[int, int, int] = (5_000 * EURO, 50_000 * EURO, 500_000 * EURO)
    merchant_size_shares: tuple[float, float, float] = (0.80, 0.15, 0.05)
    initial_eu_balance_fraction: float = 0.5
    merchant_initial_balance_fraction: float = 0.0
    # "proportional": LSPs split among countries like the population.
    # "lognormal": subset sizes follow log-normal country weights.
    lsp_assignment: str = "proportional"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TopologyParams":
        d = dict(d)
        for key in ("country_populations", "merchant_caps", "merchant_size_shares"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TopologyError(f"params: unknown fields {sorted(unknown)}")
        return cls(**d)

    def with_capacities(self, lsp_lsp_capacity: int, cb_lsp_capacity: int) -> "TopologyParams":
        d = self.to_dict()
        d.update(lsp_lsp_capacity=int(lsp_lsp_capacity), cb_lsp_capacity=int(cb_lsp_capacity))
        return TopologyParams.from_dict(d)


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    channels: tuple[Channel, ...]
    params: TopologyParams = field(default_factory=TopologyParams)

    def node(self, node_id: int) -> Node:
        n = self.nodes[node_id]
        if n.id != node_id:  # ids are dense in generated topologies; fall back otherwise
            n = next(x for x in self.nodes if x.id == node_id)
        return n

    def ids_by_role(self, *roles: str) -> list[int]:
        return [n.id for n in self.nodes if n.role in roles]

    def summary(self) -> dict[str, int]:
        counts = {r: 0 for r in (ROLE_CB, ROLE_LSP, ROLE_CITIZEN)}
        counts["merchant"] = 0
        for n in self.nodes:
            counts["merchant" if n.is_merchant else n.role] += 1
        counts["nodes"] = len(self.nodes)
        counts["channels"] = len(self.channels)
        return counts


def apportion(total: int, weights: Sequence[float], minimum: Sequence[int] | None = None) -> list[int]:
    """Split ``total`` integer units proportionally to ``weights``.

    Largest-remainder rounding; the sum is always ``total``. ``minimum`` gives
    per-bucket floors that are satisfied first when feasible.
    """
    w = np.asarray(weights, dtype=float)
    if total < 0 or (w < 0).any():
        raise TopologyError("apportion: negative total or weight")
    floors = np.zeros(len(w), dtype=np.int64) if minimum is None else np.asarray(minimum, dtype=np.int64)
    if floors.sum() > total:
        raise TopologyError(f"apportion: cannot give {floors.tolist()} out of {total}")
    if w.sum() == 0:
        if total - floors.sum():
            raise TopologyError("apportion: all weights are zero")
        return floors.tolist()
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    rem = total - int(counts.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    # enforce floors by taking from the buckets with most slack
    while (counts < floors).any():
        i = int(np.argmax(floors - counts))
        slack = counts - floors
        slack[i] = -1
        j = int(np.argmax(slack))
        counts[i] += 1
        counts[j] -= 1
    return counts.tolist()


def watts_strogatz_edges(n: int, k: int, p: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Edges of a Watts-Strogatz graph over nodes ``0..n-1``.

    Ring lattice with ``k/2`` neighbours on each side; every lattice edge
    ``(u, u+j)`` is rewired to ``(u, w)`` with probability ``p``, with ``w``
    drawn uniformly among nodes that keep the graph simple. Edges are visited
    for ``j = 1..k/2`` and ``u = 0..n-1``.
    """
    if k % 2 or k < 0:
        raise TopologyError(f"ws_degree must be even and >= 0, got {k}")
    if k and k >= n:
        raise TopologyError(f"ws_degree {k} must be smaller than the number of LSPs ({n})")
    adj: list[set[int]] = [set() for _ in range(n)]
    for u in range(n):
        for j in range(1, k // 2 + 1):
            v = (u + j) % n
            adj[u].add(v)
            adj[v].add(u)
    for j in range(1, k // 2 + 1):
        for u in range(n):
            v = (u + j) % n
            if v not in adj[u] or rng.random() >= p:
                continue
            candidates = [w for w in range(n) if w != u and w not in adj[u]]
            if not candidates:
                continue
            w = candidates[int(rng.integers(len(candidates)))]
            adj[u].discard(v)
            adj[v].discard(u)
            adj[u].add(w)
            adj[w].add(u)
    return sorted((u, v) for u in range(n) for v in adj[u] if u < v)


def _check_params(p: TopologyParams) -> None:
    if p.num_countries < 1:
        raise TopologyError("num_countries must be >= 1")
    if len(p.country_populations) != p.num_countries:
        raise TopologyError("country_populations must have num_countries entries")
    if any(x < 0 for x in p.country_populations):
        raise TopologyError("country_populations must be >= 0")
    if not 0.0 <= p.ws_rewire_prob <= 1.0:
        raise TopologyError("ws_rewire_prob must lie in [0, 1]")
    if abs(sum(p.merchant_size_shares) - 1.0) > 1e-9 or min(p.merchant_size_shares) < 0:
        raise TopologyError("merchant_size_shares must be non-negative and sum to 1")
    for name in ("initial_eu_balance_fraction", "merchant_initial_balance_fraction"):
        if not 0.0 <= getattr(p, name) <= 1.0:
            raise TopologyError(f"{name} must lie in [0, 1]")
    money = [p.cb_clique_capacity, p.cb_lsp_capacity, p.lsp_lsp_capacity, p.citizen_cap, *p.merchant_caps]
    if any(int(m) != m or m < 0 for m in money):
        raise TopologyError("capacities must be non-negative integer cents")
    if p.lsp_assignment not in ("proportional", "lognormal"):
        raise TopologyError(f"unknown lsp_assignment {p.lsp_assignment!r}")


def generate_topology(params: TopologyParams) -> Topology:
    """Build a random SH-PCN. Deterministic for a fixed ``params.seed``."""
    _check_params(params)
    rng = np.random.default_rng(params.seed)
    nc = params.num_countries
    pops = list(params.country_populations)
    n_cit = sum(pops)
    n_lsp = params.num_lsps if params.num_lsps is not None else round(n_cit / params.citizens_per_lsp)
    n_mer = params.num_merchants if params.num_merchants is not None else round(n_cit / params.citizens_per_merchant)

    # every populated country keeps a merchant when there are enough to go round
    floor = [int(p > 0) for p in pops] if n_mer >= sum(p > 0 for p in pops) else None
    merchants_per_country = apportion(n_mer, pops, minimum=floor) if n_mer else [0] * nc
    has_eu = [int(pops[c] + merchants_per_country[c] > 0) for c in range(nc)]
    if params.lsp_assignment == "lognormal":
        lsp_weights = rng.lognormal(params.lognormal_mu, params.lognormal_sigma, size=nc)
    else:
        lsp_weights = np.asarray(pops, dtype=float)
    if n_lsp < sum(has_eu):
        raise TopologyError(f"{n_lsp} LSPs cannot serve {sum(has_eu)} countries with end users")
    if lsp_weights.sum() == 0:
        lsp_weights = np.ones(nc)
    lsps_per_country = apportion(n_lsp, lsp_weights, minimum=has_eu)

    nodes: list[Node] = []
    for c in range(nc):
        nodes.append(Node(len(nodes), TIER_CB, ROLE_CB, c))
    lsp_ids: list[list[int]] = [[] for _ in range(nc)]
    for c in range(nc):
        for _ in range(lsps_per_country[c]):
            lsp_ids[c].append(len(nodes))
            nodes.append(Node(len(nodes), TIER_LSP, ROLE_LSP, c))
    all_lsps = [i for c in range(nc) for i in lsp_ids[c]]

    ws = watts_strogatz_edges(len(all_lsps), params.ws_degree, params.ws_rewire_prob, rng)
    attach_w = rng.lognormal(params.lognormal_mu, params.lognormal_sigma, size=len(all_lsps))
    weight_of = dict(zip(all_lsps, attach_w))

    sizes = rng.choice(3, size=n_mer, p=np.asarray(params.merchant_size_shares) / sum(params.merchant_size_shares))
    eu_specs: list[tuple[str, int]] = []  # (role, country) in id order
    k = 0
    for c in range(nc):
        for _ in range(merchants_per_country[c]):
            eu_specs.append((MERCHANT_ROLES[int(sizes[k])], c))
            k += 1
    for c in range(nc):
        eu_specs.extend((ROLE_CITIZEN, c) for _ in range(pops[c]))

    by_country: list[list[int]] = [[] for _ in range(nc)]
    for idx, (_, c) in enumerate(eu_specs):
        by_country[c].append(idx)
    eu_lsp = [0] * len(eu_specs)
    for c in range(nc):
        idxs = by_country[c]
        if not idxs:
            continue
        w = np.array([weight_of[i] for i in lsp_ids[c]])
        picks = rng.choice(len(w), size=len(idxs), p=w / w.sum())
        for idx, pick in zip(idxs, picks):
            eu_lsp[idx] = lsp_ids[c][int(pick)]

    channels: list[Channel] = []

    def add(a: int, b: int, cap: int, bal_b: int | None = None) -> None:
        if bal_b is None:
            bal_b = cap - cap // 2
        channels.append(Channel(len(channels), a, b, cap, cap - bal_b, bal_b))

    for i in range(nc):
        for j in range(i + 1, nc):
            add(i, j, params.cb_clique_capacity)
    for c in range(nc):
        for lsp in lsp_ids[c]:
            add(c, lsp, params.cb_lsp_capacity)
    for u, v in ws:
        add(all_lsps[u], all_lsps[v], params.lsp_lsp_capacity)
    for idx, (role, c) in enumerate(eu_specs):
        eu = len(nodes)
        nodes.append(Node(eu, TIER_EU, role, c))
        if role == ROLE_CITIZEN:
            cap, frac = params.citizen_cap, params.initial_eu_balance_fraction
        else:
            cap = params.merchant_caps[MERCHANT_ROLES.index(role)]
            frac = params.merchant_initial_balance_fraction
        add(eu_lsp[idx], eu, cap, int(round(frac * cap)))
    return Topology(tuple(nodes), tuple(channels), params)


def scaled_europe_params(
    lsp_lsp_capacity: int,
    cb_lsp_capacity: int,
    seed: int = 0,
    total_citizens: int = 300_000,
) -> TopologyParams:
    """Three countries (~1M, ~6M, ~60M people) at 1:1000 scale.

    Below 50,000 citizens the LSP and merchant counts are floored (5 LSPs,
    3 merchants) so that shrunken variants stay valid for the default
    lattice degree.
    """
    if lsp_lsp_capacity < 0 or cb_lsp_capacity < 0:
        raise TopologyError("capacities must be >= 0")
    pops = apportion(total_citizens, [1, 6, 60])
    small = total_citizens < 50_000
    return TopologyParams(
        num_countries=3,
        country_populations=tuple(pops),
        citizens_per_merchant=100,
        citizens_per_lsp=10_000,
        cb_clique_capacity=500_000_000 * EURO,
        cb_lsp_capacity=int(cb_lsp_capacity),
        lsp_lsp_capacity=int(lsp_lsp_capacity),
        ws_degree=4,
        ws_rewire_prob=0.1,
        lognormal_mu=0.0,
        lognormal_sigma=1.0,
        citizen_cap=3000 * EURO,
        merchant_caps=(5_000 * EURO, 50_000 * EURO, 500_000 * EURO),
        num_lsps=max(5, round(total_citizens / 10_000)) if small else None,
        num_merchants=max(3, round(total_citizens / 100)) if small else None,
        seed=seed,
    )


def is_routing_channel(t: Topology, ch: Channel) -> bool:
    """LSP-LSP or CB-LSP channel (the liquidity Tier-2 operators lock in)."""
    tiers = {t.nodes[ch.a].tier, t.nodes[ch.b].tier}
    return tiers == {TIER_LSP} or tiers == {TIER_LSP, TIER_CB}


def total_routing_liquidity(t: Topology) -> int:
    return sum(ch.capacity for ch in t.channels if is_routing_channel(t, ch))


def routing_channel_count(params: TopologyParams) -> tuple[int, int]:
    """(#LSP-LSP, #CB-LSP) channels a topology built from ``params`` will have."""
    n_cit = sum(params.country_populations)
    n_lsp = params.num_lsps if params.num_lsps is not None else round(n_cit / params.citizens_per_lsp)
    return n_lsp * params.ws_degree // 2, n_lsp


def validate(t: Topology) -> list[str]:
    """Return the list of broken invariants, empty when ``t`` is well formed."""
    out: list[str] = []
    nodes = {}
    for n in t.nodes:
        if n.id in nodes:
            out.append(f"node {n.id}: duplicate id")
        nodes[n.id] = n
        if n.role not in _TIER_OF_ROLE:
            out.append(f"node {n.id}: unknown role {n.role!r}")
        elif _TIER_OF_ROLE[n.role] != n.tier:
            out.append(f"node {n.id}: tier {n.tier} inconsistent with role {n.role}")
        if not 0 <= n.country < t.params.num_countries:
            out.append(f"node {n.id}: country {n.country} out of range")

    pairs: set[tuple[int, int]] = set()
    eu_links: dict[int, list[int]] = {n.id: [] for n in t.nodes if n.is_eu}
    lsp_cbs: dict[int, int] = {n.id: 0 for n in t.nodes if n.tier == TIER_LSP}
    cb_pairs: set[tuple[int, int]] = set()
    ids: set[int] = set()
    for ch in t.channels:
        tag = f"channel {ch.id}"
        if ch.id in ids:
            out.append(f"{tag}: duplicate id")
        ids.add(ch.id)
        if ch.a not in nodes or ch.b not in nodes:
            out.append(f"{tag}: unknown endpoint")
            continue
        if ch.a == ch.b:
            out.append(f"{tag}: self loop")
            continue
        key = (min(ch.a, ch.b), max(ch.a, ch.b))
        if key in pairs:
            out.append(f"{tag}: second channel between {key[0]} and {key[1]}")
        pairs.add(key)
        if min(ch.balance_a, ch.balance_b, ch.locked) < 0:
            out.append(f"{tag}: negative balance")
        if ch.balance_a + ch.balance_b + ch.locked != ch.capacity:
            out.append(f"{tag}: balances do not add up to capacity (conservation)")
        na, nb = nodes[ch.a], nodes[ch.b]
        if na.is_eu and nb.is_eu:
            out.append(f"{tag}: EU-EU channel forbidden")
            continue
        for eu, other in ((na, nb), (nb, na)):
            if eu.is_eu:
                if other.tier != TIER_LSP:
                    out.append(f"{tag}: EU {eu.id} connected to non-LSP {other.id}")
                elif other.country != eu.country:
                    out.append(f"{tag}: EU {eu.id} attached to foreign LSP {other.id}")
                else:
                    eu_links[eu.id].append(other.id)
        if na.tier == TIER_CB and nb.tier == TIER_CB:
            cb_pairs.add(key)
        for lsp, other in ((na, nb), (nb, na)):
            if lsp.tier == TIER_LSP and other.tier == TIER_CB:
                lsp_cbs[lsp.id] += 1

    for eu, links in eu_links.items():
        if len(links) != 1:
            out.append(f"node {eu}: EU must have exactly one LSP channel, has {len(links)}")
    for lsp, k in lsp_cbs.items():
        if k != 1:
            out.append(f"node {lsp}: LSP must have exactly one CB channel, has {k}")
    cbs = sorted(n.id for n in t.nodes if n.tier == TIER_CB)
    for i, u in enumerate(cbs):
        for v in cbs[i + 1 :]:
            if (u, v) not in cb_pairs:
                out.append(f"nodes {u},{v}: CB clique edge missing")

    if t.nodes and not _connected(t):
        out.append("topology: graph is not connected")
    return out


def _connected(t: Topology) -> bool:
    index = {n.id: i for i, n in enumerate(t.nodes)}
    rows = [index[c.a] for c in t.channels if c.a in index and c.b in index]
    cols = [index[c.b] for c in t.channels if c.a in index and c.b in index]
    n = len(t.nodes)
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    k, _ = connected_components(g, directed=False)
    return k == 1


# ---------------------------------------------------------------- JSON I/O


def serialize_topology(t: Topology) -> bytes:
    doc = {
        "params": t.params.to_dict(),
        "nodes": [{"id": n.id, "tier": n.tier, "role": n.role, "country": n.country} for n in t.nodes],
        "channels": [
            {"id": c.id, "a": c.a, "b": c.b, "capacity": c.capacity, "balance_a": c.balance_a, "balance_b": c.balance_b}
            for c in t.channels
        ],
    }
    # one entity per line keeps the file diffable
    lines = ['{"params": ' + json.dumps(doc["params"], sort_keys=True) + ",", ' "nodes": [']
    lines.append(",\n".join("  " + json.dumps(n) for n in doc["nodes"]))
    lines.append(" ],")
    lines.append(' "channels": [')
    lines.append(",\n".join("  " + json.dumps(c) for c in doc["channels"]))
    lines.append(" ]}")
    return ("\n".join(lines) + "\n").encode()


def _int_field(obj: dict, key: str, where: str) -> int:
    if key not in obj:
        raise TopologyError(f"{where}: missing field {key!r}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise TopologyError(f"{where}: field {key!r} must be an integer, got {v!r}")
    return v


def parse_topology(data: bytes | str) -> Topology:
    """Inverse of :func:`serialize_topology`; raises :class:`TopologyError`."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise TopologyError(f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise TopologyError("top level must be an object")
    raw_nodes = doc.get("nodes")
    if not raw_nodes:
        raise TopologyError("no nodes")
    params = TopologyParams.from_dict(doc.get("params", {}))

    nodes: list[Node] = []
    seen: set[int] = set()
    for i, obj in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(obj, dict):
            raise TopologyError(f"{where}: expected an object")
        nid = _int_field(obj, "id", where)
        if nid in seen:
            raise TopologyError(f"{where}: duplicate node id {nid}")
        seen.add(nid)
        tier, role = obj.get("tier"), obj.get("role")
        if tier not in TIERS:
            raise TopologyError(f"{where}: unknown tier {tier!r}")
        if role not in ROLES:
            raise TopologyError(f"{where}: unknown role {role!r}")
        nodes.append(Node(nid, tier, role, _int_field(obj, "country", where)))

    channels: list[Channel] = []
    cseen: set[int] = set()
    for i, obj in enumerate(doc.get("channels", [])):
        where = f"channels[{i}]"
        if not isinstance(obj, dict):
            raise TopologyError(f"{where}: expected an object")
        cid = _int_field(obj, "id", where)
        where = f"channels[{i}] (id {cid})"
        if cid in cseen:
            raise TopologyError(f"{where}: duplicate channel id {cid}")
        cseen.add(cid)
        vals = [_int_field(obj, k, where) for k in ("a", "b", "capacity", "balance_a", "balance_b")]
        for k, v in zip(("capacity", "balance_a", "balance_b"), vals[2:]):
            if v < 0:
                raise TopologyError(f"{where}: negative {k} {v} on channel {cid}")
        for k in ("a", "b"):
            if obj[k] not in seen:
                raise TopologyError(f"{where}: endpoint {obj[k]} is not a known node")
        channels.append(Channel(cid, *vals))
    return Topology(tuple(nodes), tuple(channels), params)


def write_topology(t: Topology, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_topology(t))


def read_topology(path) -> Topology:
    with open(path, "rb") as f:
        return parse_topology(f.read())


def neighbours(t: Topology) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {n.id: [] for n in t.nodes}
    for c in t.channels:
        adj[c.a].append(c.b)
        adj[c.b].append(c.a)
    return adj


def lsp_of(t: Topology, eu_ids: Iterable[int]) -> dict[int, int]:
    eus = set(eu_ids)
    out = {}
    for c in t.channels:
        if c.b in eus:
            out[c.b] = c.a
        elif c.a in eus:
            out[c.a] = c.b
    return out
