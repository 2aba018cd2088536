"""Command line entry point: ``divergesim {table build, run, matrix, report, oracle}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from divergesim import experiment as ex
from divergesim.config import load_scenarios
from divergesim.microsim import SegmentParams
from divergesim.probability import DEFAULT_TABLE_PATH, build_base_table

log = logging.getLogger("divergesim")


def _table_build(args) -> int:
    def progress(done, total):
        log.info("sigma slice %d/%d", done, total)

    table = build_base_table(trials_per_cell=args.trials, seed=args.seed, progress=progress)
    table.save(args.out)
    print(f"wrote {args.out} (shape {table.values.shape}, isotonic correction {table.correction:.3g})")
    return 0


def _scenarios(args) -> list[ex.ScenarioConfig]:
    scenarios = load_scenarios(args.config) if args.config else [ex.ScenarioConfig()]
    if getattr(args, "horizon", None):
        scenarios = [replace(s, horizon=args.horizon) for s in scenarios]
    if getattr(args, "warmup", None) is not None:
        scenarios = [replace(s, warmup=args.warmup) for s in scenarios]
    return scenarios


def _print_run(result: ex.RunResult) -> None:
    s = result.scenario
    line = f"q_i={s.q_i:g} r={s.r:g} p_l={'baseline' if s.p_l is None else f'{s.p_l:g}'} seed={result.seed}"
    if result.all is not None:
        line += f"  all avg/std/max = {result.all.avg:.2f}/{result.all.std:.2f}/{result.all.max:.2f} s"
    if result.smart is not None:
        line += f"  smart avg = {result.smart.avg:.2f} s"
    line += f"  missed exits = {result.missed_exits}"
    print(line, flush=True)


def _run(args) -> int:
    scenarios = _scenarios(args)
    if len(scenarios) != 1:
        print("run expects a single scenario; use matrix for sweeps", file=sys.stderr)
        return 2
    scenario = scenarios[0]
    if args.p_l is not None:
        scenario = replace(scenario, p_l=None if args.p_l == "baseline" else float(args.p_l))
    params = None
    if scenario.p_l is not None and scenario.param_mode == "offline":
        if args.params is None:
            print("advised runs in offline mode need --params (lane statistics from a baseline run)", file=sys.stderr)
            return 2
        params = SegmentParams.from_rows(pd.read_csv(args.params).to_dict("records"))
    seed = args.seed if args.seed is not None else scenario.seeds[0]
    out = Path(args.out) if args.out else None
    result, output = ex.run_scenario(scenario, seed, params, record_probabilities=args.record_probabilities, out_dir=out)
    if out is not None and scenario.p_l is None:
        layout = scenario.layout
        rows = SegmentParams.from_records(output.detectors, len(layout.detector_positions), layout.lane_count).to_rows()
        pd.DataFrame(rows).to_csv(out / f"{scenario.label}_s{seed}" / "lane_params.csv", index=False)
    _print_run(result)
    return 0


def _matrix(args) -> int:
    if args.config:
        scenarios = _scenarios(args)
    else:
        build = ex.directional_matrix if args.reduced else ex.paper_matrix
        scenarios = build()
        if args.horizon:
            scenarios = [replace(s, horizon=args.horizon) for s in scenarios]
    if args.seeds:
        scenarios = [replace(s, seeds=tuple(args.seeds)) for s in scenarios]
    result = ex.run_matrix(scenarios, jobs=args.jobs, out_dir=args.out, progress=_print_run)
    print()
    print(ex.render_text(result.table()))
    return 0


def _report(args) -> int:
    runs = ex.load_results(Path(args.results) / "runs.json")
    table = ex.write_report(runs, Path(args.out or args.results))
    print(ex.render_text(table))
    cells = sorted({(r.scenario.q_i, r.scenario.r) for r in runs})
    for q, r in cells:
        pls = sorted({x.scenario.p_l for x in runs if x.scenario.cell == (q, r)}, key=lambda p: p or 2.0)
        means = ", ".join(f"{'baseline' if p is None else f'{p:g}'}: {ex.mean_last_change(runs, q, r, p):.0f} m" for p in pls)
        print(f"mean last change into the rightmost lane (q_i={q:g}, r={r:g}): {means}")
    return 0


def _oracle(args) -> int:
    from divergesim.oracle import compare, format_cases

    worst = 0.0
    for n_lanes, count in ((2, args.n2), (3, args.n3)):
        if count <= 0:
            continue
        cases = compare(n_lanes, count, args.trials, args.seed + n_lanes)
        print(format_cases(cases))
        err = max(c.error for c in cases)
        worst = max(worst, err)
        print(f"{n_lanes} lanes: max |model - MC| = {err:.4f} over {count} queries\n")
    return 0 if worst <= args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divergesim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    table = sub.add_parser("table", help="base-case lookup table")
    table_sub = table.add_subparsers(dest="table_command", required=True)
    tb = table_sub.add_parser("build", help="generate and save the table")
    tb.add_argument("--trials", type=int, default=1_000_000)
    tb.add_argument("--seed", type=int, default=20240)
    tb.add_argument("--out", type=Path, default=DEFAULT_TABLE_PATH)
    tb.set_defaults(func=_table_build)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--p-l", dest="p_l", help="threshold or 'baseline' (overrides the config)")
    run.add_argument("--params", type=Path, help="lane statistics CSV for offline advised runs")
    run.add_argument("--horizon", type=float)
    run.add_argument("--warmup", type=float, help="exclude vehicles entering before this time from statistics")
    run.add_argument("--record-probabilities", action="store_true")
    run.set_defaults(func=_run)

    matrix = sub.add_parser("matrix", help="run a scenario sweep")
    matrix.add_argument("--config", type=Path)
    matrix.add_argument("--reduced", action="store_true", help="only the cells behind the directional checks")
    matrix.add_argument("--jobs", type=int, default=1)
    matrix.add_argument("--seeds", type=int, nargs="+")
    matrix.add_argument("--horizon", type=float)
    matrix.add_argument("--warmup", type=float)
    matrix.add_argument("--out", type=Path, default=Path("results"))
    matrix.set_defaults(func=_matrix)

    report = sub.add_parser("report", help="tables and histograms from stored matrix results")
    report.add_argument("--results", type=Path, default=Path("results"))
    report.add_argument("--out", type=Path)
    report.set_defaults(func=_report)

    oracle = sub.add_parser("oracle", help="model versus Monte Carlo comparison")
    oracle.add_argument("--n2", type=int, default=20)
    oracle.add_argument("--n3", type=int, default=10)
    oracle.add_argument("--trials", type=int, default=100_000)
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--tolerance", type=float, default=0.04)
    oracle.set_defaults(func=_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
