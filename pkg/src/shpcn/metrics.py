"""Aggregation of simulation logs into success rates, latency CDFs,
per-minute rebalancing series and the liquidity/swap cost trade-off."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import (
    FAIL_REASONS,
    MS,
    US,
    ActionKind,
    Outcome,
    PaymentKind,
    RebalanceAction,
    Status,
)
from .topology import EURO


class MetricsRecorder:
    """Append-only sink the engine writes into while a run is in progress."""

    def __init__(self, n_retail: int):
        self.r_created = [0] * n_retail
        self.r_completed = [-1] * n_retail
        self.r_status = [0] * n_retail
        self.r_reason = [0] * n_retail
        self.r_attempts = [0] * n_retail
        self.r_hops = [0] * n_retail
        self.o_kind: list[int] = []
        self.o_created: list[int] = []
        self.o_completed: list[int] = []
        self.o_status: list[int] = []
        self.o_hops: list[int] = []
        self.a_kind: list[int] = []
        self.a_actor: list[int] = []
        self.a_channel: list[int] = []
        self.a_amount: list[int] = []
        self.a_initiated: list[int] = []
        self.a_completed: list[int] = []
        self.a_outcome: list[int] = []
        self.l1_times: list[int] = []
        self.swaps_deferred: list[int] = []

    def retail_done(self, p) -> None:
        i = p.id
        self.r_created[i] = p.created
        self.r_completed[i] = p.completed
        self.r_status[i] = p.status
        self.r_reason[i] = p.reason
        self.r_attempts[i] = p.attempts
        self.r_hops[i] = len(p.route) if p.route else 0

    def other_done(self, p) -> None:
        self.o_kind.append(p.kind)
        self.o_created.append(p.created)
        self.o_completed.append(p.completed)
        self.o_status.append(p.status)
        self.o_hops.append(len(p.route) if p.route else 0)

    def action_started(self, kind: int, actor: int, channel: int, amount: int, t: int) -> int:
        self.a_kind.append(kind)
        self.a_actor.append(actor)
        self.a_channel.append(channel)
        self.a_amount.append(amount)
        self.a_initiated.append(t)
        self.a_completed.append(-1)
        self.a_outcome.append(Outcome.PENDING)
        return len(self.a_kind) - 1

    def action_finished(self, idx: int, t: int, ok: bool) -> None:
        self.a_completed[idx] = t
        self.a_outcome[idx] = Outcome.COMPLETED if ok else Outcome.EXPIRED

    def freeze(self, duration_us: int, config: dict) -> "MetricsLog":
        def arr(x, dt=np.int64):
            a = np.asarray(x, dtype=dt)
            a.setflags(write=False)
            return a

        return MetricsLog(
            retail_created=arr(self.r_created),
            retail_completed=arr(self.r_completed),
            retail_status=arr(self.r_status, np.int8),
            retail_reason=arr(self.r_reason, np.int8),
            retail_attempts=arr(self.r_attempts, np.int32),
            retail_hops=arr(self.r_hops, np.int32),
            other_kind=arr(self.o_kind, np.int8),
            other_created=arr(self.o_created),
            other_completed=arr(self.o_completed),
            other_status=arr(self.o_status, np.int8),
            other_hops=arr(self.o_hops, np.int32),
            action_kind=arr(self.a_kind, np.int8),
            action_actor=arr(self.a_actor),
            action_channel=arr(self.a_channel),
            action_amount=arr(self.a_amount),
            action_initiated=arr(self.a_initiated),
            action_completed=arr(self.a_completed),
            action_outcome=arr(self.a_outcome, np.int8),
            l1_times=arr(self.l1_times),
            swaps_deferred=arr(self.swaps_deferred),
            duration_us=int(duration_us),
            config=dict(config),
        )


@dataclass(frozen=True, eq=False)
class MetricsLog:
    """Immutable outcome of one run. Times are integer microseconds."""

    retail_created: np.ndarray
    retail_completed: np.ndarray
    retail_status: np.ndarray
    retail_reason: np.ndarray
    retail_attempts: np.ndarray
    retail_hops: np.ndarray
    other_kind: np.ndarray
    other_created: np.ndarray
    other_completed: np.ndarray
    other_status: np.ndarray
    other_hops: np.ndarray
    action_kind: np.ndarray
    action_actor: np.ndarray
    action_channel: np.ndarray
    action_amount: np.ndarray
    action_initiated: np.ndarray
    action_completed: np.ndarray
    action_outcome: np.ndarray
    l1_times: np.ndarray
    swaps_deferred: np.ndarray
    duration_us: int
    config: dict = field(default_factory=dict)

    @property
    def n_retail(self) -> int:
        return len(self.retail_status)

    @property
    def duration_s(self) -> float:
        return self.duration_us / US

    def retail_latency_ms(self) -> np.ndarray:
        ok = self.retail_status == Status.SUCCEEDED
        return (self.retail_completed[ok] - self.retail_created[ok]) / MS

    def failure_reasons(self) -> dict[str, int]:
        failed = self.retail_reason[self.retail_status == Status.FAILED]
        codes, counts = np.unique(failed, return_counts=True)
        return {FAIL_REASONS[c]: int(n) for c, n in zip(codes, counts)}

    def actions(self) -> Iterator[RebalanceAction]:
        for i in range(len(self.action_kind)):
            done = int(self.action_completed[i])
            yield RebalanceAction(
                ActionKind(int(self.action_kind[i])), int(self.action_actor[i]), int(self.action_channel[i]),
                int(self.action_amount[i]), self.action_initiated[i] / US, None if done < 0 else done / US,
                Outcome(int(self.action_outcome[i])),
            )

    def count_actions(self, kind: ActionKind, completed_only: bool = True) -> int:
        m = self.action_kind == kind
        if completed_only:
            m &= self.action_outcome == Outcome.COMPLETED
        return int(m.sum())

    def other_count(self, kind: PaymentKind) -> int:
        return int((self.other_kind == kind).sum())

    def equals(self, other: "MetricsLog") -> bool:
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True)
class CostModel:
    annual_lending_rate: float = 0.0475
    l1_fee_per_tx: int = 10  # cents
    horizon_days: float = 1.0

    def __post_init__(self):
        if self.annual_lending_rate < 0 or self.l1_fee_per_tx < 0:
            raise ValueError("rate and fee must be >= 0")


# ----------------------------------------------------------------- queries


def success_rate(log: MetricsLog) -> float | None:
    """Share of retail payments that succeeded; ``None`` for an empty log."""
    if log.n_retail == 0:
        return None
    return float(np.count_nonzero(log.retail_status == Status.SUCCEEDED)) / log.n_retail


def completion_cdf(log: MetricsLog, resolution_ms: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Latency grid (ms) and the share of all retail payments completed
    within each latency. The last value equals :func:`success_rate`."""
    lat = np.sort(log.retail_latency_ms())
    if log.n_retail == 0:
        return np.zeros(1), np.zeros(1)
    top = math.ceil(lat[-1] / resolution_ms) * resolution_ms if len(lat) else 0.0
    grid = np.arange(0.0, top + resolution_ms / 2, resolution_ms)
    frac = np.searchsorted(lat, grid + 1e-9, side="right") / log.n_retail
    return grid, frac


def per_minute_series(log: MetricsLog, kind: ActionKind | Sequence[ActionKind]) -> tuple[np.ndarray, np.ndarray]:
    """Completed actions of ``kind`` per minute of initiation."""
    kinds = [kind] if isinstance(kind, (int, ActionKind)) else list(kind)
    n_min = max(1, math.ceil(log.duration_us / (60 * US)))
    m = np.isin(log.action_kind, kinds) & (log.action_outcome == Outcome.COMPLETED)
    minutes = (log.action_initiated[m] // (60 * US)).astype(np.int64)
    counts = np.bincount(minutes, minlength=n_min)
    return np.arange(len(counts)), counts


def liquidity_cost_per_day(liquidity: int, model: CostModel = CostModel()) -> int:
    """Interest on ``liquidity`` cents over the model horizon, in cents."""
    if liquidity < 0:
        raise ValueError("liquidity must be >= 0")
    return int(round(liquidity * model.annual_lending_rate / 365.0 * model.horizon_days))


def l1_transactions(log: MetricsLog) -> int:
    return len(log.l1_times)


def swap_cost(log: MetricsLog, model: CostModel = CostModel()) -> int:
    return l1_transactions(log) * model.l1_fee_per_tx


def total_cost(liquidity: int, log: MetricsLog, model: CostModel = CostModel()) -> int:
    return liquidity_cost_per_day(liquidity, model) + swap_cost(log, model)


@dataclass(frozen=True)
class SweepRow:
    liquidity: int
    success_rate: float
    swaps: int
    l1_txs: int
    liquidity_cost: int
    swap_cost: int
    total_cost: int


@dataclass(frozen=True)
class SweepSummary:
    rows: tuple[SweepRow, ...]
    min_cost_liquidity: int
    min_full_success_liquidity: int | None


def sweep_summary(runs: Sequence[tuple[int, MetricsLog]], model: CostModel = CostModel()) -> SweepSummary:
    if len(runs) < 2:
        raise ValueError("a sweep needs at least two runs")
    rows = []
    for liq, log in sorted(runs, key=lambda r: r[0]):
        lc, sc = liquidity_cost_per_day(liq, model), swap_cost(log, model)
        rows.append(SweepRow(int(liq), success_rate(log) or 0.0, log.count_actions(ActionKind.SUBMARINE_SWAP),
                             l1_transactions(log), lc, sc, lc + sc))
    best = min(rows, key=lambda r: (r.total_cost, r.liquidity))
    full = [r.liquidity for r in rows if r.success_rate == 1.0]
    return SweepSummary(tuple(rows), best.liquidity, full[0] if full else None)


def local_minima(values: Sequence[float]) -> list[int]:
    """Indices of strict-or-plateau local minima of a sequence."""
    v = list(values)
    out = []
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[j + 1] == v[i]:
            j += 1
        left = i == 0 or v[i - 1] > v[i]
        right = j == len(v) - 1 or v[j + 1] > v[i]
        if left and right:
            out.append(i)
        i = j + 1
    return out


# -------------------------------------------------------------------- CSV


def _write(path: Path | str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    return repr(float(x))


def write_success_vs_liquidity(path, rows: Sequence[tuple[int, float, str]]) -> None:
    _write(path, ["liquidity_cents", "success_rate", "mode"], [(int(l), _num(s), m) for l, s, m in rows])


def write_latency_cdf(path, log: MetricsLog, resolution_ms: float = 100.0) -> None:
    grid, frac = completion_cdf(log, resolution_ms)
    _write(path, ["latency_ms", "cumulative_fraction"], [(_num(g), _num(f)) for g, f in zip(grid, frac)])


def write_rebalance_per_minute(path, log: MetricsLog) -> None:
    _, wf = per_minute_series(log, ActionKind.WATERFALL_DEPOSIT)
    _, rw = per_minute_series(log, ActionKind.REVERSE_WITHDRAWAL)
    _, sw = per_minute_series(log, ActionKind.SUBMARINE_SWAP)
    _write(path, ["minute", "waterfall", "reverse_waterfall", "swaps"],
           [(i, int(a), int(b), int(c)) for i, (a, b, c) in enumerate(zip(wf, rw, sw))])


def write_cost_sweep(path, summary: SweepSummary) -> None:
    _write(path, ["liquidity_cents", "liquidity_cost", "swap_cost", "total_cost"],
           [(r.liquidity, r.liquidity_cost, r.swap_cost, r.total_cost) for r in summary.rows])


def write_cost_rows(path, runs: Sequence[tuple[int, MetricsLog]], model: CostModel = CostModel()) -> None:
    """cost_sweep.csv for any number of runs, sorted by liquidity."""
    rows = []
    for liq, log in sorted(runs, key=lambda r: r[0]):
        lc, sc = liquidity_cost_per_day(liq, model), swap_cost(log, model)
        rows.append((int(liq), lc, sc, lc + sc))
    _write(path, ["liquidity_cents", "liquidity_cost", "swap_cost", "total_cost"], rows)


def read_csv(path, header: Sequence[str]) -> list[dict[str, str]]:
    """Read one of the emitted files, checking its header."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != list(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    out = []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        out.append(dict(zip(header, r)))
    return out


def euros(cents: int) -> float:
    return cents / EURO
