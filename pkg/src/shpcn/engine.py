"""Sequential discrete-event simulator of the HTLC payment lifecycle.

Events are processed in (time, insertion order). A payment goes
FIND_PATH -> SEND_PAYMENT -> FORWARD_PAYMENT* -> RECEIVE_PAYMENT ->
FORWARD_SUCCESS* -> RECEIVE_SUCCESS, or unwinds through FORWARD_FAIL* ->
RECEIVE_FAIL and retries with the failing hop excluded until its deadline.

Routing is source based: the sender knows every capacity but only its own
balances, so depleted channels are discovered mid-route.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque

import numpy as np

from . import rebalancer
from .loadgen import LoadProfile, RequestStream, ScenarioTable, generate_requests
from .metrics import MetricsLog, MetricsRecorder
from .model import (
    MS,
    REASON_CODE,
    US,
    EventKind,
    InvariantError,
    Payment,
    PaymentKind,
    SimConfig,
    Status,
)
from .topology import TIER_EU, Topology, is_routing_channel

GEN = int(EventKind.GENERATE_PAYMENT)
FIND = int(EventKind.FIND_PATH)
SEND = int(EventKind.SEND_PAYMENT)
FWD = int(EventKind.FORWARD_PAYMENT)
RECV = int(EventKind.RECEIVE_PAYMENT)
FWD_OK = int(EventKind.FORWARD_SUCCESS)
RECV_OK = int(EventKind.RECEIVE_SUCCESS)
FWD_FAIL = int(EventKind.FORWARD_FAIL)
RECV_FAIL = int(EventKind.RECEIVE_FAIL)
NOTIFY = int(EventKind.NOTIFY_PAYMENT)

RETAIL = int(PaymentKind.RETAIL)
SUCCEEDED = int(Status.SUCCEEDED)
FAILED = int(Status.FAILED)


class Network:
    """Mutable channel state plus the routing structure of a topology.

    ``bal[2*c + s]`` is the balance of endpoint ``s`` (0 = a, 1 = b) of
    channel ``c``; ``locked[c]`` the sum of its in-flight HTLCs.
    """

    def __init__(self, topology: Topology):
        nodes = topology.nodes
        if any(n.id != i for i, n in enumerate(nodes)):
            raise ValueError("node ids must be dense 0..n-1")
        n = len(nodes)
        chans = topology.channels
        self.n_nodes = n
        self.ends = []
        self.cap = []
        self.bal = []
        self.locked = []
        for i, c in enumerate(chans):
            if c.id != i:
                raise ValueError("channel ids must be dense 0..m-1")
            self.ends.append((c.a, c.b))
            self.cap.append(c.capacity)
            self.bal.extend((c.balance_a, c.balance_b))
            self.locked.append(c.locked)
        self.is_eu = [nd.tier == TIER_EU for nd in nodes]
        self.routing = [is_routing_channel(topology, c) for c in chans]
        nbrs: list[list[tuple[int, int, int]]] = [[] for _ in range(n)]
        for c in chans:
            nbrs[c.a].append((c.b, c.id, 0))
            nbrs[c.b].append((c.a, c.id, 1))
        for lst in nbrs:
            lst.sort()
        self.nbrs = nbrs
        # Degree-1 nodes can only terminate a simple path; routing expands
        # core nodes only and handles leaf endpoints separately.
        self.leaf = [len(l) <= 1 for l in nbrs]
        self.core_nbrs = [[e for e in lst if not self.leaf[e[0]]] if not self.leaf[u] else [] for u, lst in enumerate(nbrs)]
        self.leaf_link = [lst[0] if len(lst) == 1 else None for lst in nbrs]
        core_caps = sorted({self.cap[c.id] for c in chans if not self.leaf[c.a] and not self.leaf[c.b]})
        self._cap_levels = core_caps
        self._cache: dict = {}
        self.pair = {}
        for c in chans:
            self.pair[(c.a, c.b)] = (c.id, 0)
            self.pair[(c.b, c.a)] = (c.id, 1)

    def channel_of(self, u: int, v: int) -> tuple[int, int]:
        """(channel, side of u) of the channel between u and v."""
        return self.pair[(u, v)]

    def node_at(self, route, k: int) -> int:
        """Node at position ``k`` (0 = sender) along ``route``."""
        if k < len(route):
            c, s = route[k]
            return self.ends[c][s]
        c, s = route[k - 1]
        return self.ends[c][1 - s]

    def total_value(self) -> int:
        return sum(self.bal) + sum(self.locked)

    def check_all(self) -> None:
        self.check_channels(range(len(self.cap)))

    def check_channels(self, channels) -> None:
        bal, locked, cap = self.bal, self.locked, self.cap
        for c in channels:
            a, b, l = bal[2 * c], bal[2 * c + 1], locked[c]
            if a < 0 or b < 0 or l < 0 or a + b + l != cap[c]:
                raise InvariantError(f"channel {c}: balances ({a}, {b}, locked {l}) vs capacity {cap[c]}")

    # ------------------------------------------------------------ routing

    def find_path(self, src: int, dst: int, amount: int, excluded=None):
        """Minimum-hop route ``[(channel, side), ...]`` or ``None``.

        Every hop needs capacity >= amount, the first hop also needs the
        sender's balance >= amount, and no hop may be in ``excluded``.
        Among shortest routes the one with the smallest next-node ids wins.
        """
        if src == dst or amount <= 0:
            return None
        cap, bal = self.cap, self.bal
        head: list = []
        start = src
        if self.leaf[src]:
            link = self.leaf_link[src]
            if link is None:
                return None
            v, c, s = link
            if cap[c] < amount or bal[2 * c + s] < amount or (excluded and (c, s) in excluded):
                return None
            head = [(c, s)]
            if v == dst:
                return head
            if self.leaf[v]:
                return None
            start = v
        tail: list = []
        goal = dst
        if self.leaf[dst]:
            link = self.leaf_link[dst]
            if link is None:
                return None
            u, c, s_dst = link
            s = 1 - s_dst
            if cap[c] < amount or (excluded and (c, s) in excluded):
                return None
            if u == src:
                if bal[2 * c + s] < amount:
                    return None
                return [(c, s)]
            tail = [(c, s)]
            goal = u
            if goal == start:
                return head + tail
            if self.leaf[goal]:
                return None
        first = src if start == src else None
        if not excluded and first is None:
            key = (start, goal, bisect.bisect_left(self._cap_levels, amount))
            mid = self._cache.get(key, 0)
            if mid == 0:
                mid = self._core_path(start, goal, amount, None, None)
                self._cache[key] = mid
        else:
            mid = self._core_path(start, goal, amount, excluded, first)
        if mid is None:
            return None
        return head + mid + tail

    def _core_path(self, start, goal, amount, excluded, first):
        cap, bal, core = self.cap, self.bal, self.core_nbrs
        dist = {goal: 0}
        frontier = [goal]
        d = 0
        while frontier and start not in dist:
            d += 1
            nxt = []
            for v in frontier:
                for u, c, sv in core[v]:
                    if u in dist or cap[c] < amount:
                        continue
                    s = 1 - sv  # side of u, the payer on hop u -> v
                    if excluded and (c, s) in excluded:
                        continue
                    if u == first and bal[2 * c + s] < amount:
                        continue
                    dist[u] = d
                    nxt.append(u)
            frontier = nxt
        if start not in dist:
            return None
        route = []
        u = start
        while u != goal:
            want = dist[u] - 1
            for v, c, s in core[u]:
                if dist.get(v) != want or cap[c] < amount:
                    continue
                if excluded and (c, s) in excluded:
                    continue
                if u == first and bal[2 * c + s] < amount:
                    continue
                route.append((c, s))
                u = v
                break
            else:  # pragma: no cover - dist guarantees a successor
                raise InvariantError("route reconstruction failed")
        return route


class Simulation:
    def __init__(self, topology: Topology, config: SimConfig = SimConfig(), trace: bool = False):
        self.topology = topology
        self.config = config
        self.net = Network(topology)
        self.hop = int(round(config.hop_delay_ms * MS))
        self.roundtrip = int(round(config.deposit_roundtrip_ms * MS))
        self.wf_timeout = int(round(config.waterfall_timeout_s * US))
        self.block = int(round(config.block_time_s * US))
        self.deadline = int(round(config.payment_deadline_s * US))
        self.queue: list = []
        self.seq = 0
        self.now = 0
        self.trace = [] if trace else None
        self.active: dict[int, Payment] = {}
        self.next_id = 0
        self.withdraw_queue: dict[int, deque] = {}
        self.swaps: dict = {}
        self.l1_admitted: deque = deque()
        self.recorder = MetricsRecorder(0)
        self.events_processed = 0
        self.touched: set | None = set() if config.check_every_event else None

    # ------------------------------------------------------------ plumbing

    def schedule(self, t: int, kind: int, p, k: int = 0) -> None:
        if t < self.now:
            raise InvariantError(f"event scheduled in the past ({t} < {self.now})")
        self.seq += 1
        heapq.heappush(self.queue, (t, self.seq, kind, p, k))

    def _log(self, t, kind, p, k=0):
        # GENERATE events carry the request index (= retail payment id) in k
        self.trace.append((t, kind, p.id, k) if p is not None else (t, kind, k, 0))

    def new_payment(self, kind, sender, receiver, amount, t, deadline=None) -> Payment:
        p = Payment(self.next_id, kind, sender, receiver, amount, t, deadline)
        self.next_id += 1
        self.active[p.id] = p
        return p

    def lock(self, c: int, s: int, amount: int) -> bool:
        bal = self.net.bal
        i = 2 * c + s
        if bal[i] < amount:
            return False
        bal[i] -= amount
        self.net.locked[c] += amount
        if self.touched is not None:
            self.touched.add(c)
        return True

    def settle(self, c: int, s: int, amount: int) -> None:
        net = self.net
        net.locked[c] -= amount
        net.bal[2 * c + 1 - s] += amount
        if self.touched is not None:
            self.touched.add(c)
        if net.locked[c] < 0:
            raise InvariantError(f"channel {c}: settled more than locked")

    def unwind(self, c: int, s: int, amount: int) -> None:
        net = self.net
        net.locked[c] -= amount
        net.bal[2 * c + s] += amount
        if self.touched is not None:
            self.touched.add(c)
        if net.locked[c] < 0:
            raise InvariantError(f"channel {c}: unwound more than locked")

    def finish(self, p: Payment, t: int, ok: bool, reason: str = "") -> None:
        p.status = SUCCEEDED if ok else FAILED
        p.completed = t
        if not ok:
            p.reason = REASON_CODE[reason]
        del self.active[p.id]
        if p.kind == RETAIL:
            self.recorder.retail_done(p)
        else:
            self.recorder.other_done(p)

    # ------------------------------------------------------------ main loop

    def run(self, requests: RequestStream, until_us: int | None = None) -> MetricsLog:
        n = len(requests)
        if n:
            ids = np.concatenate([requests.sender, requests.receiver])
            if ids.min() < 0 or ids.max() >= len(self.net.leaf):
                raise ValueError("request names a node that is not in the topology")
            if requests.amount.min() <= 0:
                raise ValueError("request amounts must be positive")
            if np.any(np.diff(requests.time_s) < 0):
                raise ValueError("requests must be sorted by time")
        self.requests = requests
        self.req_time = [int(round(x * US)) for x in requests.time_s.tolist()]
        self.req_sender = requests.sender.tolist()
        self.req_receiver = requests.receiver.tolist()
        self.req_amount = requests.amount.tolist()
        self.req_scenario = requests.scenario.tolist()
        self.next_id = n
        self.recorder = MetricsRecorder(n)
        if n:
            self.schedule(self.req_time[0], GEN, None, 0)
        handlers = {
            GEN: self.on_generate, FIND: self.on_find_path, FWD: self.on_forward,
            RECV: self.on_receive, FWD_OK: self.on_forward_success, RECV_OK: self.on_receive_success,
            FWD_FAIL: self.on_forward_fail, RECV_FAIL: self.on_receive_fail,
            NOTIFY: self.on_notify,
        }
        queue = self.queue
        pop = heapq.heappop
        check = self.config.check_every_event
        trace = self.trace
        last = 0
        count = 0
        while queue:
            t, _, kind, p, k = pop(queue)
            if t < last:
                raise InvariantError(f"event time went backwards: {t} < {last}")
            last = self.now = t
            if trace is not None:
                self._log(t, kind, p, k)
            handlers[kind](t, p, k)
            count += 1
            if check:
                # only channels the event touched can have changed
                self.net.check_channels(self.touched)
                self.touched.clear()
        if check:
            self.net.check_all()
        self.events_processed = count
        end = max(last, int(round((requests.time_s[-1] if n else 0) * US)))
        duration = until_us if until_us is not None else end
        return self.recorder.freeze(duration, self.config.to_dict())

    # ------------------------------------------------------------ handlers

    def on_generate(self, t, _p, i):
        if i + 1 < len(self.req_time):
            self.schedule(self.req_time[i + 1], GEN, None, i + 1)
        p = Payment(i, RETAIL, self.req_sender[i], self.req_receiver[i], self.req_amount[i], t, t + self.deadline)
        p.scenario = self.req_scenario[i]
        self.active[i] = p
        if self.trace is not None:
            self._log(t, FIND, p)
        self.on_find_path(t, p, 0)

    def on_find_path(self, t, p, _k):
        if p.kind != RETAIL:
            rebalancer.leg_find_path(self, t, p)
            return
        if t >= p.deadline:
            self.finish(p, t, False, "timeout")
            return
        net = self.net
        if net.is_eu[p.sender] and self.config.waterfall:
            _, c, s = net.leaf_link[p.sender]
            if net.bal[2 * c + s] < p.amount:
                rebalancer.handle_reverse_waterfall(self, t, p)
                return
        route = net.find_path(p.sender, p.receiver, p.amount, p.excluded)
        if route is None:
            self.finish(p, t, False, "no-route")
            return
        p.route = route
        p.attempts += 1
        self.send(t, p)

    def send(self, t, p):
        if self.trace is not None:
            self._log(t, SEND, p)
        c, s = p.route[0]
        if not self.lock(c, s, p.amount):
            p.failed_hop = 0
            self.fail_at(t, p, 0, "insufficient-balance")
            return
        self.schedule(t + self.hop, RECV if len(p.route) == 1 else FWD, p, 1)

    def on_forward(self, t, p, k):
        route = p.route
        c, s = route[k]
        amount = p.amount
        net = self.net
        if net.bal[2 * c + s] < amount:
            if k == len(route) - 1 and p.kind == RETAIL and net.is_eu[p.receiver]:
                if amount > net.cap[c]:
                    self.fail_at(t, p, k, "cap-exceeded")
                elif self.config.waterfall:
                    rebalancer.handle_waterfall(self, t, p, k)
                else:
                    self.fail_at(t, p, k, "cap-exceeded")
                return
            self.fail_at(t, p, k, "insufficient-balance")
            return
        self.lock(c, s, amount)
        if self.config.swaps:
            ci, si = route[k - 1]
            if net.routing[ci] and ci not in self.swaps:
                rebalancer.maybe_swap(self, t, ci, 1 - si, amount)
        self.schedule(t + self.hop, RECV if k == len(route) - 1 else FWD, p, k + 1)

    def fail_at(self, t, p, k, reason):
        """Node ``k`` could not forward; unwind towards the sender."""
        p.failed_hop = k if reason in ("insufficient-balance", "cap-exceeded", "waterfall-failed", "waterfall-timeout") else None
        p.reason = REASON_CODE[reason]
        if k == 0:
            self.retry_or_fail(t, p)
        else:
            self.schedule(t + self.hop, FWD_FAIL if k - 1 > 0 else RECV_FAIL, p, k - 1)

    def on_forward_fail(self, t, p, k):
        c, s = p.route[k]
        self.unwind(c, s, p.amount)
        self.schedule(t + self.hop, FWD_FAIL if k - 1 > 0 else RECV_FAIL, p, k - 1)

    def on_receive_fail(self, t, p, _k):
        c, s = p.route[0]
        self.unwind(c, s, p.amount)
        self.retry_or_fail(t, p)

    def retry_or_fail(self, t, p):
        if p.kind != RETAIL:
            rebalancer.leg_failed(self, t, p)
            return
        if p.failed_hop is not None:
            if p.excluded is None:
                p.excluded = set()
            p.excluded.add(p.route[p.failed_hop])
        if t < p.deadline:
            self.schedule(t, FIND, p)
        else:
            self.finish(p, t, False, "timeout")

    def on_receive(self, t, p, k):
        route = p.route
        n = len(route)
        if p.kind == RETAIL and t + n * self.hop > p.deadline:
            # the receiver refuses an HTLC it could not settle in time
            p.failed_hop = None
            p.reason = REASON_CODE["timeout"]
            self.schedule(t + self.hop, FWD_FAIL if n - 1 > 0 else RECV_FAIL, p, n - 1)
            return
        c, s = route[n - 1]
        self.settle(c, s, p.amount)
        if p.kind != RETAIL:
            rebalancer.leg_received(self, t, p)
        self.schedule(t + self.hop, FWD_OK if n - 1 > 0 else RECV_OK, p, n - 1)

    def on_forward_success(self, t, p, k):
        c, s = p.route[k - 1]
        self.settle(c, s, p.amount)
        self.schedule(t + self.hop, FWD_OK if k - 1 > 0 else RECV_OK, p, k - 1)

    def on_receive_success(self, t, p, _k):
        self.finish(p, t, True)
        if p.kind == PaymentKind.SWAP_LEG:
            rebalancer.swap_done(self, t, p)

    def on_notify(self, t, p, k):
        rebalancer.on_notify(self, t, p, k)

    # ------------------------------------------------------------ inspection

    def channel_states(self) -> list[tuple[int, int, int]]:
        b = self.net.bal
        return [(b[2 * c], b[2 * c + 1], self.net.locked[c]) for c in range(len(self.net.cap))]


def run(
    topology: Topology,
    profile: LoadProfile | RequestStream | None,
    table: ScenarioTable = ScenarioTable(),
    config: SimConfig = SimConfig(),
    trace: bool = False,
) -> MetricsLog:
    """Simulate ``profile`` (or an explicit request stream) on ``topology``."""
    if isinstance(profile, RequestStream):
        requests = profile
        duration = None
    elif profile is None:
        requests = RequestStream(*([np.empty(0)] * 6))
        duration = 0
    else:
        requests = generate_requests(topology, profile, table, config.seed)
        duration = int(round(profile.duration * US))
    sim = Simulation(topology, config, trace=trace)
    return sim.run(requests, until_us=duration)
