"""Critical gaps for lane changing.

``gipps_critical_gap`` is the deterministic gap used by the probability model;
the lead/lag functions are the log-normal critical gaps checked before an
advised lane change is started.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LEAD_NOISE_SD = 1.112
LAG_NOISE_SD = 0.742


@dataclass(frozen=True)
class NeighborState:
    """Gaps to the adjacent-lane leader and follower, bumper to bumper.

    ``None`` gaps mean there is no vehicle on that side. Relative speeds are the
    neighbour's speed minus the ego speed.
    """

    lead_gap: float | None
    lag_gap: float | None
    dv_lead: float = 0.0
    dv_lag: float = 0.0


@dataclass(frozen=True)
class SafetyCheck:
    safe: bool
    lead_critical: float
    lag_critical: float


def gipps_critical_gap(v: float, delta: float = 1.6, s0: float = 1.0) -> float:
    return delta * v + s0


def toledo_lead_critical_gap(dv_lead: float, eps: float = 0.0) -> float:
    return math.exp(1.353 - 2.700 * max(0.0, dv_lead) - 0.231 * min(0.0, dv_lead) + eps)


def toledo_lag_critical_gap(dv_lag: float, eps: float = 0.0) -> float:
    return math.exp(1.429 + 0.471 * max(0.0, dv_lag) + eps)


def check_lane_change(neighbors: NeighborState, rng: np.random.Generator) -> SafetyCheck:
    """Draw fresh noise terms and compare both gaps with their critical values."""
    eps_lead = rng.normal(0.0, LEAD_NOISE_SD)
    eps_lag = rng.normal(0.0, LAG_NOISE_SD)
    lead_cr = toledo_lead_critical_gap(neighbors.dv_lead, eps_lead)
    lag_cr = toledo_lag_critical_gap(neighbors.dv_lag, eps_lag)
    lead_ok = neighbors.lead_gap is None or neighbors.lead_gap >= lead_cr
    lag_ok = neighbors.lag_gap is None or neighbors.lag_gap >= lag_cr
    return SafetyCheck(lead_ok and lag_ok, lead_cr, lag_cr)


def is_safe_lane_change(neighbors: NeighborState, rng: np.random.Generator) -> bool:
    return check_lane_change(neighbors, rng).safe


def acceptance_probability(lead_gap: float, lag_gap: float, dv_lead: float = 0.0, dv_lag: float = 0.0) -> float:
    """Closed-form probability that :func:`is_safe_lane_change` accepts fixed gaps."""
    from scipy.stats import norm

    if lead_gap <= 0 or lag_gap <= 0:
        return 0.0
    lead_loc = math.log(toledo_lead_critical_gap(dv_lead))
    lag_loc = math.log(toledo_lag_critical_gap(dv_lag))
    return float(norm.cdf((math.log(lead_gap) - lead_loc) / LEAD_NOISE_SD) * norm.cdf((math.log(lag_gap) - lag_loc) / LAG_NOISE_SD))
