"""Types shared by the engine, the rebalancer and the metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import IntEnum

from .topology import EURO

US = 1_000_000  # simulation clock ticks (microseconds) per second
MS = 1_000


class EventKind(IntEnum):
    GENERATE_PAYMENT = 0
    FIND_PATH = 1
    SEND_PAYMENT = 2
    FORWARD_PAYMENT = 3
    RECEIVE_PAYMENT = 4
    FORWARD_SUCCESS = 5
    RECEIVE_SUCCESS = 6
    FORWARD_FAIL = 7
    RECEIVE_FAIL = 8
    NOTIFY_PAYMENT = 9


class PaymentKind(IntEnum):
    RETAIL = 0
    DEPOSIT = 1
    WITHDRAWAL = 2
    SWAP_LEG = 3


class Status(IntEnum):
    PENDING = 0
    SUCCEEDED = 1
    FAILED = 2


FAIL_REASONS = (
    "",
    "no-route",
    "timeout",
    "cap-exceeded",
    "insufficient-balance",
    "reverse-waterfall-failed",
    "waterfall-failed",
    "waterfall-timeout",
    "swap-aborted",
)
REASON_CODE = {r: i for i, r in enumerate(FAIL_REASONS)}


class ActionKind(IntEnum):
    WATERFALL_DEPOSIT = 0
    REVERSE_WITHDRAWAL = 1
    SUBMARINE_SWAP = 2


class Outcome(IntEnum):
    PENDING = 0
    COMPLETED = 1
    EXPIRED = 2


REBALANCING_MODES = ("full", "waterfall-only", "none")


class InvariantError(RuntimeError):
    """Raised when the simulation state breaks a conservation rule."""


@dataclass(frozen=True)
class SimConfig:
    hop_delay_ms: float = 100.0
    deposit_roundtrip_ms: float = 300.0
    waterfall_timeout_s: float = 5.0
    block_time_s: float = 10.0
    payment_deadline_s: float = 10.0
    swap_threshold: float = 0.8
    min_deposit: int = 0  # L_D, cents
    min_wallet_reserve: int = 50 * EURO  # L_W, cents
    swap_l1_tx_count: int = 2
    l1_max_tps: float | None = None
    rebalancing: str = "full"
    seed: int = 0
    check_every_event: bool = False

    def __post_init__(self):
        for name in ("hop_delay_ms", "deposit_roundtrip_ms", "block_time_s", "payment_deadline_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.waterfall_timeout_s < 0:
            raise ValueError("waterfall_timeout_s must be >= 0")
        if not 0.5 < self.swap_threshold <= 1.0:
            raise ValueError("swap_threshold must lie in (0.5, 1]")
        if self.min_deposit < 0 or self.min_wallet_reserve < 0:
            raise ValueError("L_D and L_W must be >= 0")
        if self.rebalancing not in REBALANCING_MODES:
            raise ValueError(f"rebalancing must be one of {REBALANCING_MODES}")
        if self.l1_max_tps is not None and self.l1_max_tps <= 0:
            raise ValueError("l1_max_tps must be > 0")

    @property
    def waterfall(self) -> bool:
        return self.rebalancing != "none"

    @property
    def swaps(self) -> bool:
        return self.rebalancing == "full"

    def to_dict(self) -> dict:
        return asdict(self)


class Payment:
    """One value transfer in flight. Route hops are ``(channel, side)``
    where ``side`` is the index (0 = endpoint a) of the paying endpoint."""

    __slots__ = (
        "id", "kind", "sender", "receiver", "amount", "created", "deadline",
        "route", "attempts", "excluded", "status", "reason", "completed",
        "failed_hop", "parent", "wf_hop", "wf_deadline", "scenario", "action",
    )

    def __init__(self, pid, kind, sender, receiver, amount, created, deadline=None):
        self.id = pid
        self.kind = kind
        self.sender = sender
        self.receiver = receiver
        self.amount = amount
        self.created = created
        self.deadline = deadline
        self.route = None
        self.attempts = 0
        self.excluded = None
        self.status = Status.PENDING
        self.reason = 0
        self.completed = -1
        self.failed_hop = None
        self.parent = None
        self.wf_hop = -1
        self.wf_deadline = -1
        self.scenario = -1
        self.action = -1

    def __repr__(self) -> str:
        return (f"Payment(id={self.id}, kind={PaymentKind(self.kind).name}, {self.sender}->{self.receiver}, "
                f"amount={self.amount}, status={Status(self.status).name})")


@dataclass(frozen=True)
class RebalanceAction:
    kind: ActionKind
    actor: int
    channel: int
    amount: int
    initiated_at: float
    completed_at: float | None
    outcome: Outcome


@dataclass
class SwapState:
    channel: int
    initiator: int
    side: int
    amount: int
    phase: str = "OnChainPrep"  # -> OffChainLeg -> Done
    action: int = -1
