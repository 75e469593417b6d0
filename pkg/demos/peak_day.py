"""Rebalancing activity per hour through a peak day.

Prints hourly waterfall, reverse-waterfall and swap counts for one liquidity
level. The rate jumps tenfold between 07:00 and 19:00. Takes about a minute.

    python demos/peak_day.py --liquidity-eur 3000000
"""

import argparse

import numpy as np

from shpcn.harness import PointSpec, run_point
from shpcn.metrics import per_minute_series, success_rate
from shpcn.model import ActionKind
from shpcn.topology import EURO


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--liquidity-eur", type=float, default=3e6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    res = run_point(PointSpec(0, int(args.liquidity_eur * EURO), "full", args.seed, profile="peak_day"))
    log = res.log
    hourly = {}
    for name, kind in (("waterfall", ActionKind.WATERFALL_DEPOSIT), ("reverse", ActionKind.REVERSE_WITHDRAWAL),
                       ("swaps", ActionKind.SUBMARINE_SWAP)):
        _, per_min = per_minute_series(log, kind)
        hourly[name] = np.add.reduceat(per_min, np.arange(0, len(per_min), 60))
    print(f"payments {log.n_retail:,}  success {success_rate(log):.5f}  wall {res.wall_s:.0f} s")
    print(f"{'hour':>4}{'waterfall':>11}{'reverse':>9}{'swaps':>7}")
    for h in range(len(hourly["swaps"])):
        print(f"{h:>4}{hourly['waterfall'][h]:>11}{hourly['reverse'][h]:>9}{hourly['swaps'][h]:>7}")


if __name__ == "__main__":
    main()
