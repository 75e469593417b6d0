"""Waterfall, reverse waterfall and submarine swaps.

The decision functions at the top are pure. The handlers below them run
inside the engine's event loop and are the only code that starts deposit,
withdrawal and swap legs. Every leg is a single-hop payment on the channel
being rebalanced (the LSP doubles as the end user's custodian).
"""

from __future__ import annotations

from collections import deque
from typing import TYPE_CHECKING

from .model import US, ActionKind, EventKind, PaymentKind, SwapState

if TYPE_CHECKING:  # pragma: no cover
    from .engine import Simulation

FIND = int(EventKind.FIND_PATH)
FWD = int(EventKind.FORWARD_PAYMENT)
NOTIFY = int(EventKind.NOTIFY_PAYMENT)


def waterfall_trigger(balance: int, amount: int, capacity: int) -> bool:
    return balance + amount > capacity


def waterfall_deposit_amount(balance: int, amount: int, capacity: int, min_deposit: int) -> int:
    """max(B + P - C, L_D), never more than the balance B that funds it."""
    return min(max(balance + amount - capacity, min_deposit), balance)


def reverse_trigger(balance: int, amount: int) -> bool:
    return balance < amount


def withdrawal_amount(balance: int, amount: int, min_reserve: int, capacity: int | None = None) -> int:
    """max(L_W - B, P - B), clamped to the channel headroom C - B."""
    w = max(min_reserve - balance, amount - balance)
    if capacity is not None:
        w = min(w, capacity - balance)
    return w


def swap_needed(balance_after: int, capacity: int, threshold: float, in_flight: bool = False) -> bool:
    return not in_flight and balance_after > threshold * capacity


def swap_amount(balance: int, capacity: int) -> int:
    """Amount that brings ``balance`` back to half the capacity."""
    return balance - capacity // 2


# ------------------------------------------------------------------ waterfall


def handle_waterfall(sim: "Simulation", t: int, p, k: int) -> None:
    """Node ``k`` (the receiver's LSP) cannot forward ``p`` because the
    receiver's wallet would overflow. Hold the payment and notify."""
    if p.wf_hop != k:
        p.wf_hop = k
        p.wf_deadline = t + sim.wf_timeout
    elif t > p.wf_deadline:
        sim.fail_at(t, p, k, "waterfall-timeout")
        return
    sim.schedule(t + sim.hop, NOTIFY, p, k)


def on_notify(sim: "Simulation", t: int, p, k: int) -> None:
    """The receiver learns about the held payment and deposits the excess."""
    net = sim.net
    c, s = p.route[k]
    eu = 1 - s
    cap = net.cap[c]
    balance = net.bal[2 * c + eu]
    # in-flight HTLCs on the wallet channel count as already received
    effective = cap - net.bal[2 * c + s]
    d = min(waterfall_deposit_amount(effective, p.amount, cap, sim.config.min_deposit), balance)
    if d <= 0:
        sim.fail_at(t, p, k, "waterfall-failed")
        return
    leg = sim.new_payment(PaymentKind.DEPOSIT, p.receiver, net.ends[c][s], d, t)
    leg.route = [(c, eu)]
    leg.parent = p
    leg.action = sim.recorder.action_started(ActionKind.WATERFALL_DEPOSIT, p.receiver, c, d, t)
    sim.schedule(t + sim.roundtrip, FIND, leg)


def _deposit_arrived(sim: "Simulation", t: int, leg) -> None:
    sim.recorder.action_finished(leg.action, t, True)
    p = leg.parent
    if t > p.wf_deadline:
        sim.fail_at(t, p, p.wf_hop, "waterfall-timeout")
        return
    if sim.trace is not None:
        sim._log(t, FWD, p, p.wf_hop)
    sim.on_forward(t, p, p.wf_hop)


# ---------------------------------------------------------- reverse waterfall


def handle_reverse_waterfall(sim: "Simulation", t: int, p) -> None:
    """The sender lacks funds: queue ``p`` and withdraw from the custodian."""
    net = sim.net
    lsp, c, s = net.leaf_link[p.sender]
    cap = net.cap[c]
    balance = net.bal[2 * c + s]
    if p.amount > cap:
        sim.finish(p, t, False, "cap-exceeded")
        return
    w = withdrawal_amount(balance, p.amount, sim.config.min_wallet_reserve, cap)
    w = min(w, net.bal[2 * c + 1 - s])  # the LSP side funds the withdrawal
    if w < p.amount - balance:
        sim.finish(p, t, False, "reverse-waterfall-failed")
        return
    sim.withdraw_queue.setdefault(p.sender, deque()).append(p)
    leg = sim.new_payment(PaymentKind.WITHDRAWAL, lsp, p.sender, w, t)
    leg.route = [(c, 1 - s)]
    leg.parent = p
    leg.action = sim.recorder.action_started(ActionKind.REVERSE_WITHDRAWAL, p.sender, c, w, t)
    sim.schedule(t + sim.roundtrip, FIND, leg)


def _withdrawal_arrived(sim: "Simulation", t: int, leg) -> None:
    sim.recorder.action_finished(leg.action, t, True)
    head = sim.withdraw_queue[leg.receiver].popleft()
    sim.schedule(t, FIND, head)


# -------------------------------------------------------------- submarine swap


def maybe_swap(sim: "Simulation", t: int, c: int, side: int, incoming: int) -> None:
    """Called when the node on ``side`` of channel ``c`` forwards a payment
    that will add ``incoming`` to its balance there."""
    net = sim.net
    cap = net.cap[c]
    bal = net.bal[2 * c + side]
    after = bal + incoming
    if not swap_needed(after, cap, sim.config.swap_threshold, c in sim.swaps):
        return
    amount = min(swap_amount(after, cap), bal)
    if amount <= 0:
        return
    cfg = sim.config
    if cfg.l1_max_tps is not None:
        window = sim.l1_admitted
        while window and window[0] <= t - US:
            window.popleft()
        if (len(window) + 1) * cfg.swap_l1_tx_count > cfg.l1_max_tps:
            sim.recorder.swaps_deferred.append(t)
            return
        window.append(t)
    initiator = net.ends[c][side]
    counterparty = net.ends[c][1 - side]
    state = SwapState(c, initiator, side, amount)
    state.action = sim.recorder.action_started(ActionKind.SUBMARINE_SWAP, initiator, c, amount, t)
    sim.swaps[c] = state
    leg = sim.new_payment(PaymentKind.SWAP_LEG, initiator, counterparty, amount, t)
    leg.route = [(c, side)]
    leg.parent = state
    sim.schedule(t + sim.block, FIND, leg)


def swap_done(sim: "Simulation", t: int, leg) -> None:
    state = sim.swaps.pop(leg.route[0][0])
    state.phase = "Done"
    sim.recorder.action_finished(state.action, t, True)
    sim.recorder.l1_times.extend([t] * sim.config.swap_l1_tx_count)


# ------------------------------------------------------------------ leg flow


def leg_find_path(sim: "Simulation", t: int, leg) -> None:
    c, s = leg.route[0]
    if sim.net.bal[2 * c + s] < leg.amount:
        leg_failed(sim, t, leg)
        return
    if leg.kind == PaymentKind.SWAP_LEG:
        leg.parent.phase = "OffChainLeg"
    leg.attempts = 1
    sim.send(t, leg)


def leg_received(sim: "Simulation", t: int, leg) -> None:
    if leg.kind == PaymentKind.DEPOSIT:
        _deposit_arrived(sim, t, leg)
    elif leg.kind == PaymentKind.WITHDRAWAL:
        _withdrawal_arrived(sim, t, leg)


def leg_failed(sim: "Simulation", t: int, leg) -> None:
    sim.finish(leg, t, False, "insufficient-balance")
    if leg.kind == PaymentKind.DEPOSIT:
        sim.recorder.action_finished(leg.action, t, False)
        p = leg.parent
        sim.fail_at(t, p, p.wf_hop, "waterfall-failed")
    elif leg.kind == PaymentKind.WITHDRAWAL:
        sim.recorder.action_finished(leg.action, t, False)
        head = sim.withdraw_queue[leg.receiver].popleft()
        sim.finish(head, t, False, "reverse-waterfall-failed")
    else:
        state = sim.swaps.pop(leg.route[0][0])
        sim.recorder.action_finished(state.action, t, False)
