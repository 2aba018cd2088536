"""Compare the table-based probability model with direct Monte Carlo.

Draws random in-range queries for one and two lane changes, evaluates the
model and a chained Monte Carlo simulation of the same event model, and prints
every case with its absolute error.

    python3 scripts/oracle_check.py --n2 20 --n3 10 --trials 1000000
"""

import argparse
import sys
import time

from divergesim.oracle import compare, format_cases


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--n2", type=int, default=20, help="queries needing one lane change")
    parser.add_argument("--n3", type=int, default=10, help="queries needing two lane changes")
    parser.add_argument("--trials", type=int, default=1_000_000)
    parser.add_argument("--tolerance", type=float, default=0.04)
    args = parser.parse_args()

    worst = 0.0
    for lanes, count in ((2, args.n2), (3, args.n3)):
        if count <= 0:
            continue
        start = time.perf_counter()
        cases = compare(lanes, count, args.trials, seed=lanes)
        print(format_cases(cases))
        err = max(c.error for c in cases)
        worst = max(worst, err)
        print(f"{lanes} lanes: max |error| {err:.4f} over {count} queries ({time.perf_counter() - start:.0f} s)\n")
    ok = worst <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: max |error| {worst:.4f} (tolerance {args.tolerance})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
