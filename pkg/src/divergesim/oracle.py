"""Comparison of the table-based probability model with direct Monte Carlo."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from divergesim.gap_acceptance import gipps_critical_gap
from divergesim.headway import LogNormalHeadway
from divergesim.probability import BaseCaseTable, GoalQuery, LaneParams, default_table, fn, simulate_chain


@dataclass(frozen=True)
class OracleCase:
    query: GoalQuery
    model: float
    monte_carlo: float

    @property
    def error(self) -> float:
        return abs(self.model - self.monte_carlo)


def _in_range(table: BaseCaseTable, d: float, v_prev: float, lane: LaneParams) -> bool:
    m = math.exp(lane.headway.mu)
    dv = abs(lane.v - v_prev)
    D_ax, G_ax, S_ax, T_ax = table.axes
    return (
        dv * d / v_prev / m <= D_ax[-1]
        and G_ax[0] <= lane.g / m <= G_ax[-1]
        and S_ax[0] <= lane.headway.sigma <= S_ax[-1]
        and lane.t * dv / m <= T_ax[-1]
    )


def random_query(n_lanes: int, rng: np.random.Generator, table: BaseCaseTable | None = None, max_tries: int = 10_000) -> GoalQuery:
    """A random highway-like query whose every lane stays inside the table grid.

    Lane speeds differ from the previous lane by 4 to 10 m/s, critical gaps follow
    the Gipps rule and lane changes take 3 s.
    """
    table = table or default_table()
    for _ in range(max_tries):
        v1 = rng.uniform(15.0, 33.0)
        d = rng.uniform(30.0, 1500.0)
        lanes = []
        v_prev = v1
        for _ in range(n_lanes - 1):
            v = v_prev + rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 10.0)
            if v <= 8.0:
                break
            hw = LogNormalHeadway(rng.uniform(math.log(20.0), math.log(80.0)), rng.uniform(0.1, 1.1))
            lane = LaneParams(v, hw, gipps_critical_gap(v), 3.0)
            if not _in_range(table, d, v_prev, lane):
                break
            lanes.append(lane)
            v_prev = v
        if len(lanes) == n_lanes - 1:
            return GoalQuery(d, v1, tuple(lanes))
    raise RuntimeError("could not draw an in-range query")


def compare(n_lanes: int, count: int, trials: int, seed: int, table: BaseCaseTable | None = None) -> list[OracleCase]:
    """Model versus chained Monte Carlo on ``count`` random queries spanning
    ``n_lanes`` lanes (the ego lane included, so 2 means one lane change)."""
    table = table or default_table()
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        q = random_query(n_lanes, rng, table)
        cases.append(OracleCase(q, fn(q, table), simulate_chain(q.d, q.v1, q.lanes, trials, rng)))
    return cases


def format_cases(cases: list[OracleCase]) -> str:
    lines = [f"{'lanes':>5} {'d (m)':>8} {'v1':>6} {'model':>7} {'MC':>7} {'|err|':>7}"]
    for c in cases:
        q = c.query
        lines.append(f"{len(q.lanes) + 1:>5} {q.d:>8.1f} {q.v1:>6.2f} {c.model:>7.4f} {c.monte_carlo:>7.4f} {c.error:>7.4f}")
    return "\n".join(lines)
