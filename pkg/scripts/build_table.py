"""Regenerate the packaged base-case lookup table.

    python3 scripts/build_table.py                # 10^6 trials per cell, about 5 min
    python3 scripts/build_table.py --trials 100000 --out /tmp/table.npz
"""

import argparse
import time
from pathlib import Path

from divergesim.probability import DEFAULT_TABLE_PATH, build_base_table


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--trials", type=int, default=1_000_000)
    parser.add_argument("--seed", type=int, default=20240)
    parser.add_argument("--out", type=Path, default=DEFAULT_TABLE_PATH)
    args = parser.parse_args()

    start = time.perf_counter()
    table = build_base_table(trials_per_cell=args.trials, seed=args.seed, progress=lambda k, n: print(f"sigma slice {k}/{n}", flush=True))
    table.save(args.out)
    print(f"wrote {args.out}: shape {table.values.shape}, isotonic correction {table.correction:.3g}, {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
