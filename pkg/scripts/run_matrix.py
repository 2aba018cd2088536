"""Run the delay experiment and write tables, histograms and per-run logs.

    python3 scripts/run_matrix.py --reduced --out results/reduced   # 15 runs, ~10 min
    python3 scripts/run_matrix.py --out results/full --jobs 4        # 126 runs

The reduced set holds the cells behind the directional checks; the full set
covers both flows, three smart-car shares and six thresholds plus baselines.
"""

import argparse
import time
from pathlib import Path

from divergesim import experiment as ex


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--reduced", action="store_true")
    parser.add_argument("--seeds", type=int, nargs="+", default=list(ex.DEFAULT_SEEDS))
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("results"))
    args = parser.parse_args()

    build = ex.directional_matrix if args.reduced else ex.paper_matrix
    scenarios = build(seeds=tuple(args.seeds))
    start = time.perf_counter()

    def progress(run):
        print(f"{run.scenario.label} seed {run.seed}: avg {run.all.avg:.2f} s, max {run.all.max:.2f} s, "
              f"missed exits {run.missed_exits}  [{time.perf_counter() - start:.0f} s]", flush=True)

    result = ex.run_matrix(scenarios, jobs=args.jobs, out_dir=args.out, progress=progress)
    print()
    print(ex.render_text(result.table()))
    for pl in (0.8, 0.99):
        print(f"mean last lane change (9600, 10%, p_l={pl}): {ex.mean_last_change(result.runs, 9600.0, 10.0, pl):.0f} m")
    print(f"outputs in {args.out}")


if __name__ == "__main__":
    main()
