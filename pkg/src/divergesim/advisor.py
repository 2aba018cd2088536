"""Advance warning for exiting vehicles.

Each smart car heading for the off-ramp periodically evaluates the probability
of still reaching the rightmost mainline lane before the deceleration lane ends.
The first time it falls below ``p_l`` the car is told to move one lane right;
the advice is executed once the lead/lag critical-gap check passes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from divergesim.gap_acceptance import NeighborState, SafetyCheck, check_lane_change, gipps_critical_gap
from divergesim.headway import LogNormalHeadway
from divergesim.probability import BaseCaseTable, GoalQuery, LaneParams, clamp_adjacent_speed, goal_probabilities

MIN_EGO_SPEED = 0.5  # m/s; keeps d / v1 finite for stopped vehicles


@dataclass(frozen=True)
class AdvisoryConfig:
    p_l: float = 0.9
    delta: float = 1.6
    s0: float = 1.0
    t_lc: float = 3.0
    v_l: float = 4.0
    reevaluation_period: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_l < 1.0:
            raise ValueError(f"p_l must lie in (0, 1), got {self.p_l}")
        if min(self.delta, self.s0, self.t_lc, self.v_l, self.reevaluation_period) <= 0:
            raise ValueError("advisory physical parameters must be positive")


@dataclass(frozen=True)
class Advisory:
    vehicle_id: int
    time: float
    probability_at_trigger: float
    target_lane: int
    position: float = float("nan")
    lane: int = 0


class ExecutionOutcome(enum.Enum):
    CHANGED = "changed"
    DEFERRED = "deferred"


def build_query(
    distance: float,
    speed: float,
    lane: int,
    rightmost_lane: int,
    lane_state: Mapping[int, tuple[float, LogNormalHeadway]],
    config: AdvisoryConfig,
) -> GoalQuery:
    """Goal query for a vehicle in ``lane`` that must reach ``rightmost_lane``.

    ``lane_state`` maps lane number to (mean speed, headway distribution). Each
    lane speed is pushed out of the band around the previous one before the
    critical gap is derived from it.
    """
    v_prev = max(speed, MIN_EGO_SPEED)
    lanes = []
    for k in range(lane + 1, rightmost_lane + 1):
        v_k, headway = lane_state[k]
        v_k = clamp_adjacent_speed(v_prev, v_k, config.v_l)
        lanes.append(LaneParams(v=v_k, headway=headway, g=gipps_critical_gap(v_k, config.delta, config.s0), t=config.t_lc))
        v_prev = v_k
    return GoalQuery(d=max(distance, 0.0), v1=max(speed, MIN_EGO_SPEED), lanes=tuple(lanes))


def evaluate(
    position: float,
    speed: float,
    lane: int,
    goal_position: float,
    rightmost_lane: int,
    lane_state: Mapping[int, tuple[float, LogNormalHeadway]],
    config: AdvisoryConfig,
    table: BaseCaseTable | None = None,
) -> float:
    """Probability that a vehicle reaches ``rightmost_lane`` before ``goal_position``.

    Vehicles already in the rightmost lane need no change and get 1.
    """
    if lane >= rightmost_lane:
        return 1.0
    query = build_query(goal_position - position, speed, lane, rightmost_lane, lane_state, config)
    return float(goal_probabilities([query], table)[0])


def evaluate_many(queries: Sequence[GoalQuery], table: BaseCaseTable | None = None) -> np.ndarray:
    return goal_probabilities(queries, table)


def advise(
    vehicle_id: int,
    time: float,
    lane: int,
    probability: float,
    config: AdvisoryConfig,
    already_advised: bool = False,
    position: float = float("nan"),
) -> Advisory | None:
    """Emit an advisory when the probability has dipped strictly below ``p_l``.

    Advice is latched: a vehicle that is already advised gets nothing new, whatever
    its probability does afterwards.
    """
    if already_advised or not probability < config.p_l:
        return None
    return Advisory(vehicle_id, time, probability, lane + 1, position, lane)


def execute_if_safe(neighbors: NeighborState, rng: np.random.Generator) -> tuple[ExecutionOutcome, SafetyCheck]:
    check = check_lane_change(neighbors, rng)
    outcome = ExecutionOutcome.CHANGED if check.safe else ExecutionOutcome.DEFERRED
    return outcome, check


def trigger_time(times: Sequence[float], probabilities: Sequence[float], p_l: float) -> float | None:
    """First time in a recorded probability trace that falls below ``p_l``."""
    for t, p in zip(times, probabilities):
        if p < p_l:
            return t
    return None
