"""``shpcn`` command line: generate, run, sweep, report.

Exit codes: 0 success, 2 input error, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import metrics as M
from .engine import run
from .harness import SPLITS, PointError, log_grid, preset_topology, run_sweep, sweep_specs, thread_cap
from .loadgen import ArrivalProcess, ScenarioTable, build_profile
from .model import REBALANCING_MODES, ActionKind, InvariantError, PaymentKind, SimConfig, Status
from .topology import (
    EURO,
    TopologyError,
    TopologyParams,
    generate_topology,
    read_topology,
    scaled_europe_params,
    total_routing_liquidity,
    validate,
    write_topology,
)

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3

SIM_FIELDS = {f.name for f in fields(SimConfig)}
TOPO_FIELDS = {f.name for f in fields(TopologyParams)}
TABLE_FIELDS = {"top_bin_max", "cross_border_prob", "scenario_shares"}

FILES = {
    "success": ("success_vs_liquidity.csv", ["liquidity_cents", "success_rate", "mode"]),
    "latency": ("latency_cdf.csv", ["latency_ms", "cumulative_fraction"]),
    "rebalance": ("rebalance_per_minute.csv", ["minute", "waterfall", "reverse_waterfall", "swaps"]),
    "cost": ("cost_sweep.csv", ["liquidity_cents", "liquidity_cost", "swap_cost", "total_cost"]),
}


class InputError(Exception):
    pass


# ------------------------------------------------------------------ config


def load_config(path: str | None) -> dict:
    """Flat JSON object whose keys are SimConfig, TopologyParams or
    scenario-table field names."""
    if not path:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise InputError(f"config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"config {path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"config {path}: expected a flat object")
    unknown = set(cfg) - SIM_FIELDS - TOPO_FIELDS - TABLE_FIELDS
    if unknown:
        raise InputError(f"config {path}: unknown keys {sorted(unknown)}")
    for k, v in cfg.items():
        if isinstance(v, dict):
            raise InputError(f"config {path}: key {k!r} is nested; the format is flat")
    return cfg


def _pick(cfg: dict, names: set) -> dict:
    return {k: v for k, v in cfg.items() if k in names}


def sim_config(args, cfg: dict) -> SimConfig:
    d = _pick(cfg, SIM_FIELDS)
    overrides = {
        "rebalancing": args.rebalancing,
        "hop_delay_ms": args.hop_delay_ms,
        "swap_threshold": args.swap_threshold,
        "min_deposit": args.min_deposit,
        "min_wallet_reserve": args.min_reserve,
        "l1_max_tps": args.l1_max_tps,
        "swap_l1_tx_count": args.l1_txs_per_swap,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.check_invariants:
        d["check_every_event"] = True
    d["seed"] = args.seed
    try:
        return SimConfig(**d)
    except (TypeError, ValueError) as e:
        raise InputError(f"simulation config: {e}") from None


def scenario_table(args, cfg: dict) -> ScenarioTable:
    d = _pick(cfg, TABLE_FIELDS)
    if getattr(args, "top_bin_max", None) is not None:
        d["top_bin_max"] = args.top_bin_max
    if "scenario_shares" in d:
        d["scenario_shares"] = tuple(d["scenario_shares"])
    try:
        return ScenarioTable(**d)
    except (TypeError, ValueError) as e:
        raise InputError(f"scenario table: {e}") from None


def preset_params(args, cfg: dict, need_capacities: bool = True) -> TopologyParams:
    if getattr(args, "total_citizens", None) is not None:
        if args.total_citizens < 1:
            raise InputError("--total-citizens must be >= 1")
        d = scaled_europe_params(0, 0, total_citizens=args.total_citizens).to_dict()
    else:
        d = scaled_europe_params(0, 0).to_dict()
    d.update(_pick(cfg, TOPO_FIELDS))
    if getattr(args, "lsp_capacity", None) is not None:
        d["lsp_lsp_capacity"] = args.lsp_capacity
    if getattr(args, "cb_lsp_capacity", None) is not None:
        d["cb_lsp_capacity"] = args.cb_lsp_capacity
    if need_capacities and "lsp_lsp_capacity" not in cfg and getattr(args, "lsp_capacity", None) is None:
        raise InputError("--lsp-capacity is required (or lsp_lsp_capacity in --config)")
    d["seed"] = args.seed
    try:
        return TopologyParams.from_dict(d)
    except (TypeError, ValueError) as e:
        raise InputError(f"topology params: {e}") from None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"output directory {out}: {e.strerror}") from None
    if not os.access(out, os.W_OK):
        raise InputError(f"output directory {out} is not writable")
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    params = preset_params(args, cfg)
    topo = generate_topology(params)
    bad = validate(topo)
    if bad:
        print("generated topology is invalid: " + "; ".join(bad[:5]), file=sys.stderr)
        return EXIT_INVARIANT
    path = Path(args.output) if args.output else _out_dir(args) / "topology.json"
    write_topology(topo, path)
    s = topo.summary()
    print(f"nodes={s['nodes']} channels={s['channels']} cb={s['cb']} lsp={s['lsp']} merchants={s['merchant']} "
          f"citizens={s['citizen']} routing_liquidity_cents={total_routing_liquidity(topo)} file={path}")
    return EXIT_OK


def _load_topology(args, cfg: dict):
    if args.topology:
        try:
            topo = read_topology(args.topology)
        except OSError as e:
            raise InputError(f"topology {args.topology}: {e.strerror}") from None
        bad = validate(topo)
        if bad:
            raise InputError(f"topology {args.topology}: " + "; ".join(bad[:5]))
        return topo
    if args.liquidity is not None:
        return preset_topology(args.liquidity, args.split, args.seed, preset_params(args, cfg, False))
    return generate_topology(preset_params(args, cfg))


def summary_line(log: M.MetricsLog, wall_s: float) -> str:
    sr = M.success_rate(log)
    lat = log.retail_latency_ms()
    ok = int((log.retail_status == Status.SUCCEEDED).sum())
    parts = {
        "payments": log.n_retail,
        "succeeded": ok,
        "failed": log.n_retail - ok,
        "success_rate": "nan" if sr is None else repr(round(sr, 6)),
        "waterfalls": log.count_actions(ActionKind.WATERFALL_DEPOSIT),
        "reverse_waterfalls": log.count_actions(ActionKind.REVERSE_WITHDRAWAL),
        "swaps": log.count_actions(ActionKind.SUBMARINE_SWAP),
        "swaps_deferred": len(log.swaps_deferred),
        "l1_txs": M.l1_transactions(log),
        "deposits": log.other_count(PaymentKind.DEPOSIT),
        "withdrawals": log.other_count(PaymentKind.WITHDRAWAL),
        "max_latency_ms": repr(float(lat.max())) if len(lat) else "nan",
        "wall_s": f"{wall_s:.2f}",
    }
    for reason, n in sorted(log.failure_reasons().items()):
        parts["fail_" + reason.replace("-", "_")] = n
    return " ".join(f"{k}={v}" for k, v in parts.items())


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    config = sim_config(args, cfg)
    table = scenario_table(args, cfg)
    out = _out_dir(args)
    topo = _load_topology(args, cfg)
    t0 = time.perf_counter()
    log = run(topo, build_profile(args.profile, ArrivalProcess(args.arrival)), table, config)
    wall = time.perf_counter() - t0
    M.write_latency_cdf(out / FILES["latency"][0], log)
    M.write_rebalance_per_minute(out / FILES["rebalance"][0], log)
    print(summary_line(log, wall))
    return EXIT_OK


def _points(args) -> list[int]:
    pts: list[int] = []
    if args.points:
        try:
            pts = [int(x) for x in args.points.split(",") if x.strip()]
        except ValueError:
            raise InputError("--points must be comma-separated integer cents") from None
    if args.log_space:
        start, stop, n = args.log_space
        try:
            pts += log_grid(start, stop, n)
        except ValueError as e:
            raise InputError(str(e)) from None
    if args.include_zero:
        pts.append(0)
    pts = sorted(set(pts))
    if not pts:
        raise InputError("no sweep points: give --points and/or --log-space")
    if pts[0] < 0:
        raise InputError("liquidity points must be >= 0")
    return pts


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    config = sim_config(args, cfg)
    table = scenario_table(args, cfg)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in REBALANCING_MODES]
    if bad or not modes:
        raise InputError(f"--modes must be drawn from {','.join(REBALANCING_MODES)}")
    pts = _points(args)
    out = _out_dir(args)
    base = preset_params(args, cfg, need_capacities=False)
    specs = sweep_specs(pts, modes, args.seed, split=args.split, profile=args.profile.replace("-", "_"),
                        arrival=args.arrival, config=config, table=table, base_params=base)
    try:
        workers = thread_cap(args.jobs)
    except ValueError as e:
        raise InputError(str(e)) from None
    results = run_sweep(specs, workers)
    rows = []
    by_mode: dict[str, list] = {m: [] for m in modes}
    for r in results:
        rows.append((r.realised_liquidity, M.success_rate(r.log) or 0.0, r.spec.mode))
        by_mode[r.spec.mode].append((r.realised_liquidity, r.log))
        print(f"point={r.spec.index} mode={r.spec.mode} liquidity_cents={r.realised_liquidity} "
              f"seed={r.spec.seed} {summary_line(r.log, r.wall_s)}", flush=True)
    M.write_success_vs_liquidity(out / FILES["success"][0], rows)
    cost_mode = "full" if "full" in modes else modes[0]
    M.write_cost_rows(out / FILES["cost"][0], by_mode[cost_mode])
    if len(pts) == 1 and len(modes) == 1:
        log = results[0].log
        M.write_latency_cdf(out / FILES["latency"][0], log)
        M.write_rebalance_per_minute(out / FILES["rebalance"][0], log)
    return EXIT_OK


def _read(dir_: Path, key: str):
    name, header = FILES[key]
    path = dir_ / name
    if not path.exists():
        return None
    try:
        rows = M.read_csv(path, header)
        return [{k: float(v) for k, v in r.items() if k != "mode"} | ({"mode": r["mode"]} if "mode" in r else {})
                for r in rows]
    except (ValueError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: corrupted ({e})") from None


def report_rows(dir_: Path) -> list[tuple[str, str]]:
    if not dir_.is_dir():
        raise InputError(f"{dir_}: not a directory")
    data = {k: _read(dir_, k) for k in FILES}
    if all(v is None for v in data.values()):
        raise InputError(f"{dir_}: no metrics files found")
    out: list[tuple[str, str]] = []
    if data["success"] is not None:
        modes = sorted({r["mode"] for r in data["success"]})
        for m in modes:
            full = sorted(r["liquidity_cents"] for r in data["success"] if r["mode"] == m and r["success_rate"] == 1.0)
            out.append((f"min liquidity for 100% ({m})", f"{full[0] / EURO:,.0f} EUR" if full else "not reached"))
    if data["cost"] is not None:
        if not data["cost"]:
            raise InputError(f"{dir_ / FILES['cost'][0]}: no rows")
        best = min(data["cost"], key=lambda r: (r["total_cost"], r["liquidity_cents"]))
        out.append(("cost minimum at", f"{best['liquidity_cents'] / EURO:,.0f} EUR"))
        out.append(("minimum daily cost", f"{best['total_cost'] / EURO:,.2f} EUR"))
        n_min = len(M.local_minima([r["total_cost"] for r in data["cost"]]))
        out.append(("local minima on grid", str(n_min)))
    if data["latency"] is not None:
        lat = data["latency"]
        if lat:
            final = lat[-1]["cumulative_fraction"]
            reached = next(r["latency_ms"] for r in lat if r["cumulative_fraction"] >= final)
            within3 = max((r["cumulative_fraction"] for r in lat if r["latency_ms"] <= 3000), default=0.0)
            out.append(("max latency", f"{reached:,.0f} ms"))
            out.append(("share within 3 s", f"{within3:.4f}"))
        else:
            out.append(("max latency", "no successful payments"))
    if data["rebalance"] is not None:
        reb = data["rebalance"]
        peak = max((r["swaps"] for r in reb), default=0)
        out.append(("peak swap rate", f"{peak:.0f} /min"))
        out.append(("waterfall events", f"{sum(r['waterfall'] for r in reb):.0f}"))
        out.append(("reverse waterfall events", f"{sum(r['reverse_waterfall'] for r in reb):.0f}"))
    return out


def cmd_report(args) -> int:
    rows = report_rows(Path(args.dir or args.out_dir))
    w = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{w}}  {v}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _cents(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer cents, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("money must be >= 0")
    return v


def _log_space(s: str):
    try:
        a, b, n = s.split(":")
        return int(a), int(b), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("expected START:STOP:N in cents") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--out-dir", default=".", help="output directory (default .)")
    common.add_argument("--config", help="flat JSON file of config fields; flags override it")

    topo = argparse.ArgumentParser(add_help=False)
    topo.add_argument("--preset", choices=["scaled-europe"], default="scaled-europe")
    topo.add_argument("--lsp-capacity", type=_cents, help="capacity of each LSP-LSP channel, cents")
    topo.add_argument("--cb-lsp-capacity", type=_cents, help="capacity of each CB-LSP channel, cents (default 0)")
    topo.add_argument("--total-citizens", type=int, help="shrink or grow the preset population")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--profile", choices=["average-day", "peak-day"], default="average-day")
    sim.add_argument("--arrival", choices=[a.value for a in ArrivalProcess], default="poisson")
    sim.add_argument("--hop-delay-ms", type=float)
    sim.add_argument("--swap-threshold", type=float)
    sim.add_argument("--min-deposit", type=_cents, help="L_D, cents")
    sim.add_argument("--min-reserve", type=_cents, help="L_W, cents")
    sim.add_argument("--l1-max-tps", type=float)
    sim.add_argument("--l1-txs-per-swap", type=int)
    sim.add_argument("--top-bin-max", type=_cents, help="upper bound of the top amount bin, cents")
    sim.add_argument("--check-invariants", action="store_true", help="check conservation after every event")
    sim.add_argument("--split", choices=SPLITS, default="lsp",
                     help="how total liquidity is spread over routing channels")

    p = argparse.ArgumentParser(prog="shpcn", description="Semi-hierarchical payment channel network simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common, topo], help="write a topology file")
    g.add_argument("-o", "--output", help="topology path (default OUT_DIR/topology.json)")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", parents=[common, topo, sim], help="simulate one day")
    r.add_argument("--topology", help="topology JSON; otherwise the preset is generated")
    r.add_argument("--liquidity", type=_cents, help="total routing liquidity for the preset, cents")
    r.add_argument("--rebalancing", choices=REBALANCING_MODES)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common, topo, sim], help="run the preset over a liquidity grid")
    s.add_argument("--points", help="comma-separated total liquidity points, cents")
    s.add_argument("--log-space", type=_log_space, help="START:STOP:N log-spaced points, cents")
    s.add_argument("--include-zero", action="store_true")
    s.add_argument("--modes", default="full", help="comma-separated rebalancing modes (default full)")
    s.add_argument("--jobs", type=int, help="worker processes (SHPCN_THREADS caps this)")
    s.set_defaults(func=cmd_sweep, rebalancing=None)

    rp = sub.add_parser("report", parents=[common], help="summarise metrics files in a directory")
    rp.add_argument("dir", nargs="?", help="directory with metrics files (default OUT_DIR)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "topology", None) and getattr(args, "liquidity", None) is not None:
            raise InputError("give either --topology or --liquidity, not both")
        return args.func(args)
    except InvariantError as e:
        print(f"shpcn {args.command}: invariant breach: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except PointError as e:
        print(f"shpcn {args.command}: {e}", file=sys.stderr)
        if isinstance(e.cause, InvariantError):
            return EXIT_INVARIANT
        return EXIT_INPUT if isinstance(e.cause, (ValueError, TopologyError)) else EXIT_INVARIANT
    except (InputError, TopologyError, ValueError) as e:
        print(f"shpcn {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
