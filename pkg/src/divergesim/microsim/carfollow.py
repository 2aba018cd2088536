"""Car-following law: the Intelligent Driver Model with its adaptive-cruise
refinement, parameterised by the freeway table (minimum gap, time headway,
comfortable and maximum deceleration)."""

from __future__ import annotations

import numpy as np

from divergesim.microsim.params import CarFollowingParams
from divergesim.microsim.vehicle import Vehicle

ACCEL_EXPONENT = 4.0
MIN_NET_GAP = 1e-3
COOLNESS = 0.99


def idm_accel(v, v0, net_gap, v_lead, a_max, p: CarFollowingParams, a_lead=0.0, heuristic=True):
    """Vectorized car-following acceleration, clipped to ``[-max_decel_own, a_max]``.

    The Intelligent Driver Model blended with the constant-acceleration
    heuristic (the ACC variant): when the plain IDM would brake harder than a
    leader's current motion justifies, as after a cut-in at similar speed, the
    response is softened towards the heuristic value. ``net_gap`` is bumper to
    bumper; pass ``inf`` where there is no leader.
    """
    v = np.asarray(v, dtype=float)
    net_gap = np.asarray(net_gap, dtype=float)
    free = a_max * (1.0 - (v / v0) ** ACCEL_EXPONENT)
    dv = v - v_lead
    b = p.accepted_decel_own
    s_star = p.standstill_distance + np.maximum(0.0, v * p.headway_time + v * dv / (2.0 * np.sqrt(a_max * b)))
    finite = np.isfinite(net_gap)
    s = np.where(finite, np.maximum(net_gap, MIN_NET_GAP), 1.0)
    a_idm = free - a_max * np.where(finite, (s_star / s) ** 2, 0.0)
    if not heuristic:
        return np.clip(a_idm, -p.max_decel_own, a_max)

    a_l = np.minimum(a_lead, a_max)
    vl = np.asarray(v_lead, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = vl * vl - 2.0 * s * a_l
        cah_a = np.where(denom > 0, v * v * a_l / denom, a_l)
    cah_b = a_l - np.maximum(dv, 0.0) ** 2 / (2.0 * s)
    a_cah = np.where(vl * dv <= -2.0 * s * a_l, cah_a, cah_b)
    blended = (1.0 - COOLNESS) * a_idm + COOLNESS * (a_cah + b * np.tanh((a_idm - a_cah) / b))
    acc = np.where(finite & (a_idm < a_cah), blended, a_idm)
    return np.clip(acc, -p.max_decel_own, a_max)


def car_following_accel(ego: Vehicle, leader: Vehicle | None, params: CarFollowingParams) -> float:
    if leader is None:
        gap, v_lead = np.inf, ego.speed
    else:
        gap = leader.position - leader.length - ego.position
        if gap < 0:
            raise ValueError(f"vehicle {ego.id} overlaps its leader {leader.id}")
        v_lead = leader.speed
    return float(idm_accel(ego.speed, ego.desired_speed, gap, v_lead, ego.max_accel, params))


def braking_safe(net_gap, v_follow, v_lead, decel, margin):
    """True where the follower can shed its closing speed at ``decel`` and still
    keep ``margin`` to the leader (leader assumed to hold its speed)."""
    closing = np.maximum(0.0, np.asarray(v_follow) - np.asarray(v_lead)) ** 2 / (2.0 * decel)
    return net_gap >= margin + closing
