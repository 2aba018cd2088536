"""Scenario matrix execution, delay statistics and result tables.

Every advised scenario is compared with the baseline run at the same flow and
smart-car share. Lane statistics for the advisor come from the baseline runs
(pooled over their seeds) unless rolling estimation is requested.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from divergesim.advisor import AdvisoryConfig
from divergesim.microsim import Route, RunOutput, SegmentParams, SimConfig, Simulation, VehicleClass
from divergesim.microsim.params import DEFAULT_SPECS, CarFollowingParams, LaneChangeParams, RoadLayout

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (32, 37, 42)
FLOWS = (6400.0, 9600.0)
SMART_PERCENTS = (2.0, 6.0, 10.0)
THRESHOLDS = (0.99, 0.95, 0.9, 0.85, 0.8, 0.75)
HGV_PERCENT = 2.0
HISTOGRAM_BINS = 120
HISTOGRAM_RANGE = (0.0, 6000.0)
TABLE_COLUMNS = ["q_i", "r", "p_l", "class", "avg_s", "std_s", "max_s", "pct_avg", "pct_std", "pct_max"]


class ConfigError(ValueError):
    """Raised for inconsistent scenario sets."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the matrix. ``p_l is None`` means the baseline."""

    q_i: float = 9600.0
    r: float = 10.0
    p_l: float | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    horizon: float = 3600.0
    dt: float = 0.1
    hgv_percent: float = HGV_PERCENT
    param_mode: str = "offline"
    warmup: float = 0.0
    layout: RoadLayout = field(default_factory=RoadLayout)
    car_following: CarFollowingParams = field(default_factory=CarFollowingParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)
    advisory: AdvisoryConfig = field(default_factory=AdvisoryConfig)
    specs: tuple = tuple(DEFAULT_SPECS.items())

    def __post_init__(self):
        if self.r < 0 or self.r + self.hgv_percent > 100:
            raise ConfigError(f"smart share {self.r}% plus {self.hgv_percent}% HGVs exceeds 100%")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.p_l is not None and not 0 < self.p_l < 1:
            raise ConfigError(f"p_l must lie in (0, 1), got {self.p_l}")

    @property
    def mode(self) -> str:
        return "baseline" if self.p_l is None else "advised"

    @property
    def cell(self) -> tuple[float, float]:
        return (self.q_i, self.r)

    @property
    def label(self) -> str:
        pl = "baseline" if self.p_l is None else f"{self.p_l:g}"
        return f"q{self.q_i:g}_r{self.r:g}_{pl}"

    def baseline(self) -> "ScenarioConfig":
        return replace(self, p_l=None)

    def sim_config(self, seed: int, **overrides) -> SimConfig:
        advisory = self.advisory if self.p_l is None else replace(self.advisory, p_l=self.p_l)
        kwargs = dict(
            flow=self.q_i,
            smart_share=self.r / 100.0,
            hgv_share=self.hgv_percent / 100.0,
            mode=self.mode,
            seed=seed,
            dt=self.dt,
            horizon=self.horizon,
            layout=self.layout,
            car_following=self.car_following,
            lane_change=self.lane_change,
            advisory=advisory,
            specs=dict(self.specs),
            param_mode=self.param_mode,
        )
        kwargs.update(overrides)
        return SimConfig(**kwargs)


@dataclass(frozen=True)
class DelayStats:
    avg: float
    std: float
    max: float
    count: int
    class_filter: str = "all"


@dataclass
class RunResult:
    scenario: ScenarioConfig
    seed: int
    all: DelayStats | None
    smart: DelayStats | None
    lane_changes: dict
    missed_exits: int
    last_change_positions: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """JSON-friendly record for storage and later reporting."""
        return {
            "q_i": self.scenario.q_i,
            "r": self.scenario.r,
            "p_l": self.scenario.p_l,
            "seed": self.seed,
            "all": None if self.all is None else asdict(self.all),
            "smart": None if self.smart is None else asdict(self.smart),
            "lane_changes": self.lane_changes,
            "missed_exits": self.missed_exits,
            "last_change_positions": [float(x) for x in self.last_change_positions],
            "diagnostics": {k: (int(v) if isinstance(v, (int, np.integer)) else v) for k, v in self.diagnostics.items()},
        }


def compute_delay(entry_time, exit_time, desired_speed, route_length: float = RoadLayout().offramp_travel_length):
    """Travel time over ``route_length`` minus the time it takes at desired speed."""
    return np.asarray(exit_time) - np.asarray(entry_time) - route_length / np.asarray(desired_speed)


def aggregate_stats(delays: Sequence[float], class_filter: str = "all") -> DelayStats | None:
    """Per-run average, population standard deviation and maximum; ``None`` if empty."""
    d = np.asarray(delays, dtype=float)
    if d.size == 0:
        return None
    return DelayStats(float(d.mean()), float(d.std()), float(d.max()), int(d.size), class_filter)


def mean_of_runs(stats: Iterable[DelayStats | None]) -> DelayStats | None:
    """Cross-seed aggregate: arithmetic mean of each per-run statistic."""
    stats = [s for s in stats if s is not None]
    if not stats:
        return None
    return DelayStats(
        float(np.mean([s.avg for s in stats])),
        float(np.mean([s.std for s in stats])),
        float(np.mean([s.max for s in stats])),
        int(sum(s.count for s in stats)),
        stats[0].class_filter,
    )


def retired_delays(output: RunOutput, warmup: float = 0.0) -> pd.DataFrame:
    """Delay per retired vehicle with a travel-time record; missed exits are left out."""
    rt = output.retired
    rt = rt[~rt["missed_exit"] & rt["exit_time"].notna() & (rt["entry_time"] >= warmup)].copy()
    rt["delay"] = compute_delay(rt["entry_time"], rt["exit_time"], rt["desired_speed"], output.config.layout.offramp_travel_length)
    return rt


def last_lane_change_positions(output: RunOutput) -> np.ndarray:
    """Start position of each smart car's final change into the rightmost mainline lane."""
    lc = output.lane_changes
    smart = output.vehicle_classes[lc["id"].to_numpy()] == VehicleClass.SMART_CAR
    sel = lc[smart & (lc["to_lane"] == output.config.layout.lane_count).to_numpy()]
    return sel.groupby("id")["position"].last().to_numpy()


def last_lane_change_histogram(positions, bins: int = HISTOGRAM_BINS, range: tuple[float, float] = HISTOGRAM_RANGE) -> pd.DataFrame:
    """Histogram of last-change positions. Positions outside ``range`` are counted
    in the nearest edge bin so the mass equals the number of vehicles."""
    pos = np.clip(np.asarray(positions, dtype=float), range[0], range[1])
    counts, edges = np.histogram(pos, bins=bins, range=range)
    return pd.DataFrame({"bin_lo_m": edges[:-1], "bin_hi_m": edges[1:], "count": counts})


def summarize_run(scenario: ScenarioConfig, seed: int, output: RunOutput) -> RunResult:
    d = retired_delays(output, scenario.warmup)
    smart = d[d["cls"] == VehicleClass.SMART_CAR]
    counts = output.lane_changes["cause"].value_counts()
    return RunResult(
        scenario=scenario,
        seed=seed,
        all=aggregate_stats(d["delay"], "all"),
        smart=aggregate_stats(smart["delay"], "smart_cars"),
        lane_changes={c: int(counts.get(c, 0)) for c in ("advised", "mandatory", "discretionary")},
        missed_exits=int(output.diagnostics["missed_exits"]),
        last_change_positions=last_lane_change_positions(output),
        diagnostics=dict(output.diagnostics),
    )


def run_scenario(
    scenario: ScenarioConfig,
    seed: int,
    segment_params: SegmentParams | None = None,
    record_probabilities: bool = False,
    out_dir: Path | None = None,
) -> tuple[RunResult, RunOutput]:
    sim = Simulation(scenario.sim_config(seed, record_probabilities=record_probabilities), segment_params=segment_params)
    output = sim.run()
    result = summarize_run(scenario, seed, output)
    logger.info("%s seed %d: %s", scenario.label, seed, output.diagnostics)
    if out_dir is not None:
        write_run_outputs(Path(out_dir), scenario, seed, output)
    return result, output


def write_run_outputs(out_dir: Path, scenario: ScenarioConfig, seed: int, output: RunOutput) -> None:
    """Event logs of one run as CSV files under ``out_dir/<label>_s<seed>/``."""
    run_dir = out_dir / f"{scenario.label}_s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    rt = output.retired.copy()
    rt["class"] = rt["cls"].map(lambda c: VehicleClass(c).name.lower())
    rt["route"] = rt["route"].map(lambda c: Route(c).name.lower())
    rt["delay"] = compute_delay(rt["entry_time"], rt["exit_time"], rt["desired_speed"], output.config.layout.offramp_travel_length)
    rt[["id", "class", "route", "entry_time", "exit_time", "delay", "missed_exit"]].to_csv(run_dir / "retired.csv", index=False)
    output.detector_frame().to_csv(run_dir / "detectors.csv", index=False)
    output.lane_changes.to_csv(run_dir / "lane_changes.csv", index=False)
    output.advisories.to_csv(run_dir / "advisories.csv", index=False)
    if len(output.traces):
        output.traces.to_csv(run_dir / "probability_traces.csv", index=False)


def _run_job(args):
    scenario, seed, params_rows, out_dir = args
    params = SegmentParams.from_rows(params_rows) if params_rows is not None else None
    result, output = run_scenario(scenario, seed, params, out_dir=out_dir)
    return result, output.detectors if scenario.p_l is None else None


def _map(jobs: int, fn, items):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class MatrixResult:
    runs: list[RunResult]
    segment_params: dict = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return results_table(self.runs)


def check_baselines(scenarios: Sequence[ScenarioConfig]) -> None:
    cells = {s.cell for s in scenarios if s.p_l is None}
    missing = sorted({s.cell for s in scenarios if s.p_l is not None} - cells)
    if missing:
        raise ConfigError(f"advised scenarios without a matching baseline: {missing}")


def run_matrix(scenarios: Sequence[ScenarioConfig], jobs: int = 1, out_dir: Path | None = None, progress=None) -> MatrixResult:
    """Run baselines first, derive lane statistics from them, then the advised runs."""
    check_baselines(scenarios)
    out_dir = Path(out_dir) if out_dir is not None else None
    baselines = [s for s in scenarios if s.p_l is None]
    advised = [s for s in scenarios if s.p_l is not None]
    runs: list[RunResult] = []

    jobs_list = [(s, seed, None, out_dir) for s in baselines for seed in s.seeds]
    detector_runs: dict[tuple, list] = {}
    for (s, seed, _, _), (result, detectors) in zip(jobs_list, _map(jobs, _run_job, jobs_list)):
        runs.append(result)
        detector_runs.setdefault(s.cell, []).append(detectors)
        if progress:
            progress(result)

    params: dict[tuple, SegmentParams] = {}
    for cell, arrays in detector_runs.items():
        layout = next(s.layout for s in baselines if s.cell == cell)
        params[cell] = SegmentParams.pooled(arrays, len(layout.detector_positions), layout.lane_count)
        if out_dir is not None:
            path = out_dir / "params" / f"q{cell[0]:g}_r{cell[1]:g}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(params[cell].to_rows()).to_csv(path, index=False)

    jobs_list = [(s, seed, params[s.cell].to_rows() if s.param_mode == "offline" else None, out_dir) for s in advised for seed in s.seeds]
    for result, _ in _map(jobs, _run_job, jobs_list):
        runs.append(result)
        if progress:
            progress(result)

    if out_dir is not None:
        save_results(runs, out_dir / "runs.json")
        write_report(runs, out_dir)
    return MatrixResult(runs, params)


def _pct(value: float | None, base: float | None) -> float | None:
    if value is None or base is None or base == 0:
        return None
    return round(100.0 * (value - base) / base, 2)


def results_table(runs: Sequence[RunResult]) -> pd.DataFrame:
    """One row per (q_i, r, p_l, class) with the three-run means and deltas vs baseline."""
    groups: dict[tuple, list[RunResult]] = {}
    for run in runs:
        groups.setdefault((run.scenario.q_i, run.scenario.r, run.scenario.p_l), []).append(run)
    rows = []
    for cls in ("all", "smart_cars"):
        agg = {}
        for key, group in groups.items():
            agg[key] = mean_of_runs(r.all if cls == "all" else r.smart for r in group)
        for (q, r, pl), stats in sorted(agg.items(), key=lambda kv: (kv[0][0], kv[0][1], -(kv[0][2] or 2.0))):
            base = agg.get((q, r, None))
            row = {"q_i": q, "r": r, "p_l": "baseline" if pl is None else pl, "class": cls}
            for name in ("avg", "std", "max"):
                v = None if stats is None else getattr(stats, name)
                b = None if base is None else getattr(base, name)
                row[f"{name}_s"] = v
                row[f"pct_{name}"] = None if pl is None else _pct(v, b)
            rows.append(row)
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def render_text(table: pd.DataFrame) -> str:
    """Aligned text rendering: ``avg (pct)`` per statistic, one block per class."""
    lines = []
    for cls, block in table.groupby("class", sort=False):
        lines.append(f"delay statistics: {cls}")
        header = f"{'q_i':>6} {'r':>4} {'p_l':>9} {'avg (s)':>18} {'std (s)':>18} {'max (s)':>19}"
        lines.append(header)
        lines.append("-" * len(header))
        for _, row in block.iterrows():
            cells = []
            for name, width in (("avg", 18), ("std", 18), ("max", 19)):
                v = row[f"{name}_s"]
                p = row[f"pct_{name}"]
                text = "absent" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"
                if p is not None and not (isinstance(p, float) and math.isnan(p)):
                    text += f" ({p:+.2f})"
                cells.append(f"{text:>{width}}")
            pl = row["p_l"] if isinstance(row["p_l"], str) else f"{row['p_l']:g}"
            lines.append(f"{row['q_i']:>6g} {row['r']:>4g} {pl:>9} " + " ".join(cells))
        lines.append("")
    return "\n".join(lines)


def histogram_for(runs: Sequence[RunResult], q_i: float, r: float, p_l: float | None) -> pd.DataFrame:
    positions = [run.last_change_positions for run in runs if (run.scenario.q_i, run.scenario.r, run.scenario.p_l) == (q_i, r, p_l)]
    return last_lane_change_histogram(np.concatenate(positions) if positions else [])


def mean_last_change(runs: Sequence[RunResult], q_i: float, r: float, p_l: float | None) -> float:
    """Mean over seeds of each run's mean last-change position."""
    means = [
        float(np.mean(run.last_change_positions))
        for run in runs
        if (run.scenario.q_i, run.scenario.r, run.scenario.p_l) == (q_i, r, p_l) and len(run.last_change_positions)
    ]
    return float(np.mean(means)) if means else math.nan


def write_report(runs: Sequence[RunResult], out_dir: Path) -> pd.DataFrame:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = results_table(runs)
    table.to_csv(out_dir / "results.csv", index=False)
    (out_dir / "results.txt").write_text(render_text(table))
    hist_dir = out_dir / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for q, r, pl in sorted({(x.scenario.q_i, x.scenario.r, x.scenario.p_l) for x in runs}, key=lambda k: (k[0], k[1], k[2] or 2.0)):
        label = "baseline" if pl is None else f"{pl:g}"
        histogram_for(runs, q, r, pl).to_csv(hist_dir / f"q{q:g}_r{r:g}_{label}.csv", index=False)
    return table


def save_results(runs: Sequence[RunResult], path: Path) -> None:
    Path(path).write_text(json.dumps([r.summary() for r in runs], indent=1))


def load_results(path: Path) -> list[RunResult]:
    """Rebuild run summaries written by :func:`save_results` (scenario fields that
    affect reporting only)."""
    runs = []
    for rec in json.loads(Path(path).read_text()):
        scenario = ScenarioConfig(q_i=rec["q_i"], r=rec["r"], p_l=rec["p_l"], seeds=(rec["seed"],))
        runs.append(
            RunResult(
                scenario=scenario,
                seed=rec["seed"],
                all=None if rec["all"] is None else DelayStats(**rec["all"]),
                smart=None if rec["smart"] is None else DelayStats(**rec["smart"]),
                lane_changes=rec["lane_changes"],
                missed_exits=rec["missed_exits"],
                last_change_positions=np.asarray(rec["last_change_positions"], dtype=float),
                diagnostics=rec.get("diagnostics", {}),
            )
        )
    return runs


def paper_matrix(seeds: Sequence[int] = DEFAULT_SEEDS, **kwargs) -> list[ScenarioConfig]:
    """Full sweep: both flows, three smart-car shares, baseline plus six thresholds."""
    return [
        ScenarioConfig(q_i=q, r=r, p_l=pl, seeds=tuple(seeds), **kwargs)
        for q in FLOWS
        for r in SMART_PERCENTS
        for pl in (None, *THRESHOLDS)
    ]


def directional_matrix(seeds: Sequence[int] = DEFAULT_SEEDS, **kwargs) -> list[ScenarioConfig]:
    """The reduced set behind the directional checks: (9600, 10%) baseline, 0.8 and
    0.99; (6400, 10%) baseline and 0.99."""
    cells = [(9600.0, None), (9600.0, 0.8), (9600.0, 0.99), (6400.0, None), (6400.0, 0.99)]
    return [ScenarioConfig(q_i=q, r=10.0, p_l=pl, seeds=tuple(seeds), **kwargs) for q, pl in cells]

