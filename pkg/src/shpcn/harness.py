"""Experiment plumbing shared by the CLI, the demos and the acceptance suite.

A sweep point is (total routing liquidity, rebalancing mode, seed). The
topology is always the scaled-Europe preset drawn with the base seed, so every
point in a sweep shares node attachment and only the channel capacities and
the payment stream differ.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .engine import run
from .loadgen import ArrivalProcess, ScenarioTable, build_profile
from .metrics import MetricsLog
from .model import SimConfig
from .topology import (
    Topology,
    TopologyParams,
    generate_topology,
    routing_channel_count,
    scaled_europe_params,
    total_routing_liquidity,
)

SPLITS = ("lsp", "even")


def split_liquidity(total: int, params: TopologyParams, split: str = "lsp") -> tuple[int, int]:
    """Per-channel (LSP-LSP, CB-LSP) capacities for ``total`` routing cents.

    ``lsp`` puts everything on the LSP mesh; ``even`` spreads it over every
    routing channel. Remainders are dropped, so the realised total can be a
    few cents short of ``total``.
    """
    if total < 0:
        raise ValueError("liquidity must be >= 0")
    n_ll, n_cl = routing_channel_count(params)
    if split == "lsp":
        return (total // n_ll if n_ll else 0), (0 if n_ll else total // max(n_cl, 1))
    if split == "even":
        per = total // max(n_ll + n_cl, 1)
        return per, per
    raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")


def preset_topology(liquidity: int, split: str = "lsp", seed: int = 0, base: TopologyParams | None = None) -> Topology:
    params = base if base is not None else scaled_europe_params(0, 0, seed=seed)
    ll, cl = split_liquidity(liquidity, params, split)
    return generate_topology(replace(params.with_capacities(ll, cl), seed=seed))


def log_grid(start: int, stop: int, n: int, include_zero: bool = False) -> list[int]:
    """``n`` log-spaced integer points from ``start`` to ``stop`` inclusive."""
    if n < 1 or start <= 0 or stop < start:
        raise ValueError("log grid needs n >= 1 and 0 < start <= stop")
    pts = np.unique(np.rint(np.geomspace(start, stop, n)).astype(np.int64)).tolist()
    return ([0] if include_zero else []) + pts


@dataclass(frozen=True)
class PointSpec:
    index: int
    liquidity: int
    mode: str
    seed: int
    topo_seed: int = 0
    split: str = "lsp"
    profile: str = "average_day"
    arrival: str = "poisson"
    config: SimConfig = SimConfig()
    table: ScenarioTable = ScenarioTable()
    base_params: TopologyParams | None = None


@dataclass(frozen=True)
class PointResult:
    spec: PointSpec
    realised_liquidity: int
    log: MetricsLog
    wall_s: float


def run_point(spec: PointSpec) -> PointResult:
    t0 = time.perf_counter()
    topo = preset_topology(spec.liquidity, spec.split, spec.topo_seed, spec.base_params)
    cfg = replace(spec.config, rebalancing=spec.mode, seed=spec.seed)
    profile = build_profile(spec.profile, ArrivalProcess(spec.arrival))
    log = run(topo, profile, spec.table, cfg)
    return PointResult(spec, total_routing_liquidity(topo), log, time.perf_counter() - t0)


class PointError(RuntimeError):
    def __init__(self, spec: PointSpec, cause: BaseException):
        super().__init__(f"sweep point {spec.index} (liquidity={spec.liquidity}, mode={spec.mode}) failed: {cause}")
        self.spec = spec
        self.cause = cause

    def __reduce__(self):
        return PointError, (self.spec, self.cause)


def _guarded(spec: PointSpec) -> PointResult:
    try:
        return run_point(spec)
    except Exception as e:  # re-raised with the point attached
        raise PointError(spec, e) from e


def thread_cap(default: int | None = None) -> int:
    env = os.environ.get("SHPCN_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"SHPCN_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return default or os.cpu_count() or 1


def sweep_specs(liquidities, modes, base_seed: int = 0, **kw) -> list[PointSpec]:
    """Point ``i`` of the liquidity list runs with seed ``base_seed + i`` in every mode."""
    return [
        PointSpec(i, int(liq), mode, base_seed + i, topo_seed=base_seed, **kw)
        for mode in modes
        for i, liq in enumerate(liquidities)
    ]


def run_sweep(specs: list[PointSpec], workers: int | None = None) -> list[PointResult]:
    """Run every point, in parallel when more than one worker is allowed.

    Results come back in ``specs`` order whatever the worker count.
    """
    workers = min(workers or thread_cap(), len(specs)) if specs else 1
    if workers <= 1:
        return [_guarded(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_guarded, specs))
