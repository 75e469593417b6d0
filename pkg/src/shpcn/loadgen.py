"""Retail payment requests calibrated on the ECB SPACE 2022 diary survey."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .topology import EURO, ROLE_CITIZEN, Topology

SCENARIOS = ("POS", "Online", "P2P")

# Amount bins in cents: [lo, hi). The last bin's upper edge comes from
# ScenarioTable.top_bin_max and is inclusive.
BIN_EDGES = (1, 5 * EURO, 10 * EURO, 20 * EURO, 30 * EURO, 50 * EURO, 100 * EURO)

SPACE_2022 = {
    "POS": (0.21, 0.17, 0.21, 0.13, 0.13, 0.10, 0.05),
    "Online": (0.10, 0.11, 0.20, 0.15, 0.17, 0.16, 0.11),
    "P2P": (0.14, 0.11, 0.22, 0.16, 0.14, 0.11, 0.12),
}


class ArrivalProcess(str, Enum):
    POISSON = "poisson"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class ScenarioTable:
    scenario_shares: tuple[float, float, float] = (0.80, 0.17, 0.03)
    bin_probs: dict = field(default_factory=lambda: dict(SPACE_2022))
    top_bin_max: int = 1000 * EURO
    cross_border_prob: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.cross_border_prob <= 1.0:
            raise ValueError("cross_border_prob must lie in [0, 1]")
        if self.top_bin_max < BIN_EDGES[-1]:
            raise ValueError("top_bin_max must be >= 100 EUR")
        rows = {s: tuple(np.asarray(self.bin_probs[s], float) / sum(self.bin_probs[s])) for s in SCENARIOS}
        object.__setattr__(self, "bin_probs", rows)
        shares = np.asarray(self.scenario_shares, float)
        object.__setattr__(self, "scenario_shares", tuple(shares / shares.sum()))

    def bins(self) -> list[tuple[int, int]]:
        """Inclusive cent ranges of the seven amount bins."""
        hi = list(BIN_EDGES[1:])
        out = [(lo, h - 1) for lo, h in zip(BIN_EDGES[:-1], hi)]
        out.append((BIN_EDGES[-1], self.top_bin_max))
        return out

    def expected_amount(self) -> float:
        """Mean payment amount in cents."""
        means = np.array([(lo + hi) / 2 for lo, hi in self.bins()])
        return float(sum(share * np.dot(self.bin_probs[s], means) for s, share in zip(SCENARIOS, self.scenario_shares)))


@dataclass(frozen=True)
class LoadProfile:
    """Piecewise-constant payment rate. Segments are (start_s, end_s, rate_pps)."""

    segments: tuple[tuple[float, float, float], ...]
    arrival_process: ArrivalProcess = ArrivalProcess.POISSON

    def __post_init__(self):
        if not self.segments:
            raise ValueError("a load profile needs at least one segment")
        prev_end = None
        for start, end, rate in self.segments:
            if rate <= 0 or end <= start:
                raise ValueError(f"bad segment {(start, end, rate)}")
            if prev_end is not None and start < prev_end:
                raise ValueError("segments overlap or are out of order")
            prev_end = end
        object.__setattr__(self, "arrival_process", ArrivalProcess(self.arrival_process))

    @property
    def duration(self) -> float:
        return self.segments[-1][1]

    def expected_count(self) -> float:
        return sum((e - s) * r for s, e, r in self.segments)


@dataclass(frozen=True)
class PaymentRequest:
    id: int
    sender: int
    receiver: int
    amount: int
    scenario: str
    cross_border: bool
    created_at: float


HOUR = 3600.0


def build_profile(kind: str, arrival_process: ArrivalProcess | str = ArrivalProcess.POISSON) -> LoadProfile:
    kind = kind.replace("-", "_")
    if kind == "average_day":
        segs = ((0.0, 24 * HOUR, 2.0),)
    elif kind == "peak_day":
        segs = ((0.0, 7 * HOUR, 2.0), (7 * HOUR, 19 * HOUR, 20.0), (19 * HOUR, 24 * HOUR, 2.0))
    else:
        raise ValueError(f"unknown profile {kind!r}")
    return LoadProfile(segs, ArrivalProcess(arrival_process))


def next_interarrival(rate: float, rng: np.random.Generator, process: ArrivalProcess | str = ArrivalProcess.POISSON) -> float:
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if ArrivalProcess(process) is ArrivalProcess.DETERMINISTIC:
        return 1.0 / rate
    return float(rng.exponential(1.0 / rate))


def arrival_times(profile: LoadProfile, rng: np.random.Generator) -> np.ndarray:
    """All arrival instants (seconds) of ``profile``, sorted."""
    parts = []
    for start, end, rate in profile.segments:
        if profile.arrival_process is ArrivalProcess.DETERMINISTIC:
            n = int(np.ceil((end - start) * rate - 1e-9))
            parts.append(start + np.arange(n) / rate)
        else:
            expect = (end - start) * rate
            gaps = rng.exponential(1.0 / rate, size=int(expect + 10 * np.sqrt(expect) + 20))
            t = start + np.cumsum(gaps)
            while t[-1] < end:  # pragma: no cover - tail margin is ~10 sigma
                more = t[-1] + np.cumsum(rng.exponential(1.0 / rate, size=len(gaps)))
                t = np.concatenate([t, more])
            parts.append(t[t < end])
    return np.concatenate(parts) if parts else np.empty(0)


def sample_amounts(scenario_idx: np.ndarray, table: ScenarioTable, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_amount`; ``scenario_idx`` indexes SCENARIOS."""
    bins = np.array(table.bins())
    cdfs = np.cumsum([table.bin_probs[s] for s in SCENARIOS], axis=1)
    cdfs[:, -1] = 1.0
    u = rng.random(len(scenario_idx))
    b = (u[:, None] >= cdfs[scenario_idx]).sum(axis=1)
    lo, hi = bins[b, 0], bins[b, 1]
    return rng.integers(lo, hi + 1)


def sample_amount(scenario: str, table: ScenarioTable, rng: np.random.Generator) -> int:
    return int(sample_amounts(np.array([SCENARIOS.index(scenario)]), table, rng)[0])


class PaymentPools:
    """Citizens and merchants grouped by country, for receiver selection."""

    def __init__(self, topology: Topology):
        nc = topology.params.num_countries
        cit = [[] for _ in range(nc)]
        mer = [[] for _ in range(nc)]
        for n in topology.nodes:
            if n.role == ROLE_CITIZEN:
                cit[n.country].append(n.id)
            elif n.is_merchant:
                mer[n.country].append(n.id)
        self.num_countries = nc
        self.citizens = [np.array(c, dtype=np.int64) for c in cit]
        self.merchants = [np.array(m, dtype=np.int64) for m in mer]
        self.all_citizens = np.concatenate(self.citizens) if nc else np.empty(0, np.int64)
        self.country_of = {}
        for c in range(nc):
            for pool in (self.citizens[c], self.merchants[c]):
                for i in pool.tolist():
                    self.country_of[i] = c
        self.citizen_country = np.concatenate([np.full(len(self.citizens[c]), c) for c in range(nc)])
        if len(self.all_citizens) == 0:
            raise ValueError("topology has no citizens")
        for c in range(nc):
            if len(self.citizens[c]) == 0 or len(self.merchants[c]) == 0:
                raise ValueError(f"country {c} needs at least one citizen and one merchant")


def sample_payments(
    n: int,
    pools: PaymentPools,
    table: ScenarioTable,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Draw ``n`` independent requests. Returns column arrays.

    Columns: sender, receiver, amount, scenario (index into SCENARIOS),
    cross_border.
    """
    nc = pools.num_countries
    si = rng.integers(len(pools.all_citizens), size=n)
    sender = pools.all_citizens[si]
    s_country = pools.citizen_country[si]
    scenario = rng.choice(3, size=n, p=np.asarray(table.scenario_shares))
    cross = (rng.random(n) < table.cross_border_prob) if nc > 1 else np.zeros(n, bool)
    shift = rng.integers(1, max(nc, 2), size=n)
    r_country = np.where(cross, (s_country + shift) % max(nc, 1), s_country)
    pick = rng.random(n)
    receiver = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = r_country[i]
        if scenario[i] == 2 and (cross[i] or len(pools.citizens[c]) > 1):
            pool = pools.citizens[c]
            if not cross[i]:
                # uniform over the country's citizens other than the sender
                k = int(pick[i] * (len(pool) - 1))
                cand = pool[k]
                if cand >= sender[i]:
                    cand = pool[k + 1]
                receiver[i] = cand
                continue
        else:
            # P2P with a lone domestic citizen degenerates to a merchant payment
            pool = pools.merchants[c]
        receiver[i] = pool[int(pick[i] * len(pool))]
    amount = sample_amounts(scenario, table, rng)
    return {"sender": sender, "receiver": receiver, "amount": amount, "scenario": scenario, "cross_border": cross}


def sample_payment(table: ScenarioTable, topology: Topology | PaymentPools, now: float, rng: np.random.Generator, request_id: int = 0) -> PaymentRequest:
    pools = topology if isinstance(topology, PaymentPools) else PaymentPools(topology)
    cols = sample_payments(1, pools, table, rng)
    return PaymentRequest(
        id=request_id,
        sender=int(cols["sender"][0]),
        receiver=int(cols["receiver"][0]),
        amount=int(cols["amount"][0]),
        scenario=SCENARIOS[int(cols["scenario"][0])],
        cross_border=bool(cols["cross_border"][0]),
        created_at=now,
    )


@dataclass
class RequestStream:
    """Column-oriented batch of requests, sorted by creation time."""

    time_s: np.ndarray
    sender: np.ndarray
    receiver: np.ndarray
    amount: np.ndarray
    scenario: np.ndarray
    cross_border: np.ndarray

    def __len__(self) -> int:
        return len(self.time_s)

    def __getitem__(self, i: int) -> PaymentRequest:
        return PaymentRequest(
            i, int(self.sender[i]), int(self.receiver[i]), int(self.amount[i]),
            SCENARIOS[int(self.scenario[i])], bool(self.cross_border[i]), float(self.time_s[i]),
        )

    def total_value(self) -> int:
        return int(self.amount.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "time_s", "sender", "receiver", "amount_cents", "scenario", "cross_border"])
        for i in range(len(self)):
            w.writerow([i, repr(float(self.time_s[i])), int(self.sender[i]), int(self.receiver[i]),
                        int(self.amount[i]), SCENARIOS[int(self.scenario[i])], int(bool(self.cross_border[i]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RequestStream":
        rows = list(csv.DictReader(io.StringIO(text)))
        expected = ["id", "time_s", "sender", "receiver", "amount_cents", "scenario", "cross_border"]
        if rows and list(rows[0].keys()) != expected:
            raise ValueError(f"bad header, expected {','.join(expected)}")
        return cls(
            np.array([float(r["time_s"]) for r in rows]),
            np.array([int(r["sender"]) for r in rows], dtype=np.int64),
            np.array([int(r["receiver"]) for r in rows], dtype=np.int64),
            np.array([int(r["amount_cents"]) for r in rows], dtype=np.int64),
            np.array([SCENARIOS.index(r["scenario"]) for r in rows], dtype=np.int64),
            np.array([r["cross_border"] in ("1", "True", "true") for r in rows]),
        )


def generate_requests(
    topology: Topology | PaymentPools,
    profile: LoadProfile,
    table: ScenarioTable,
    seed: int,
) -> RequestStream:
    """The full request stream of ``profile``. Same seed, same stream."""
    rng = np.random.default_rng(seed)
    pools = topology if isinstance(topology, PaymentPools) else PaymentPools(topology)
    t = arrival_times(profile, rng)
    cols = sample_payments(len(t), pools, table, rng)
    return RequestStream(t, cols["sender"], cols["receiver"], cols["amount"], cols["scenario"], cols["cross_border"])
