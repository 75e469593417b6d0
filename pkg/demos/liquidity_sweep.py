"""Success rate and daily cost against total routing liquidity.

Runs the scaled-Europe preset on a log grid in the given modes and prints one
row per point. The default grid is coarse (one point per decade), so it
finishes in a few minutes on one core.

    python demos/liquidity_sweep.py --per-decade 4 --modes full,waterfall-only
"""

import argparse
import math

from shpcn.harness import log_grid, run_sweep, sweep_specs, thread_cap
from shpcn.metrics import liquidity_cost_per_day, success_rate, swap_cost
from shpcn.model import ActionKind
from shpcn.topology import EURO


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--start", type=float, default=1e5, help="first point, EUR")
    ap.add_argument("--stop", type=float, default=1e7, help="last point, EUR")
    ap.add_argument("--per-decade", type=int, default=1)
    ap.add_argument("--modes", default="full,waterfall-only,none")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    n = round(math.log10(args.stop / args.start) * args.per_decade) + 1
    grid = log_grid(int(args.start * EURO), int(args.stop * EURO), n)
    specs = sweep_specs(grid, args.modes.split(","), base_seed=args.seed)
    print(f"{'mode':<15}{'liquidity EUR':>16}{'success':>10}{'swaps':>8}{'cost EUR/day':>14}")
    for r in run_sweep(specs, thread_cap()):
        cost = liquidity_cost_per_day(r.realised_liquidity) + swap_cost(r.log)
        print(f"{r.spec.mode:<15}{r.realised_liquidity / EURO:>16,.0f}{success_rate(r.log):>10.5f}"
              f"{r.log.count_actions(ActionKind.SUBMARINE_SWAP):>8}{cost / EURO:>14.2f}")


if __name__ == "__main__":
    main()
