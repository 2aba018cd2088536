"""Time-stepped multi-lane highway simulation with a deceleration lane and off-ramp.

State is kept as parallel numpy arrays indexed by vehicle id; ``active`` lists
the ids currently on the road. Every step runs, in order: advisor decisions,
mandatory lane changes, discretionary lane changes, lane-change progress,
car following, kinematics, arrivals, and detector/exit recording.

A vehicle that is changing lanes occupies both its origin and target lane, so
followers in either lane react to it.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from divergesim import advisor as adv
from divergesim.gap_acceptance import NeighborState, gipps_critical_gap
from divergesim.microsim.carfollow import braking_safe, idm_accel
from divergesim.microsim.detectors import DetectorLog, SegmentParams
from divergesim.microsim.params import Cause, Route, SimConfig, SimulationIntegrityError, VehicleClass
from divergesim.microsim.vehicle import Vehicle
from divergesim.probability import BaseCaseTable, default_table

logger = logging.getLogger(__name__)

NO_VEHICLE = -1
_EPS = 1e-9

LANE_CHANGE_COLUMNS = ["id", "time", "position", "from_lane", "to_lane", "cause", "lead_gap", "lag_gap", "lead_critical", "lag_critical"]
RETIRED_COLUMNS = ["id", "cls", "route", "entry_time", "exit_time", "desired_speed", "missed_exit"]
ADVISORY_COLUMNS = ["vehicle_id", "time", "position", "lane", "probability_at_trigger", "p_l"]
TRACE_COLUMNS = ["vehicle_id", "time", "position", "lane", "probability"]


def spawn_arrivals(flow: float, composition: dict, rng: np.random.Generator, dt: float) -> list:
    """Vehicle classes arriving during one step (Poisson arrivals at ``flow`` veh/h)."""
    fractions = np.array(list(composition.values()), dtype=float)
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("class fractions must sum to 1")
    count = rng.poisson(flow * dt / 3600.0) if flow > 0 else 0
    if count == 0:
        return []
    classes = list(composition.keys())
    picks = rng.choice(len(classes), size=count, p=fractions)
    return [classes[i] for i in picks]


def mandatory_gap_factor(position: float, decel_start: float, lc_distance: float, floor: float) -> float:
    """Share of the critical gap required at ``position``: 1 at the start of the
    lane-change zone, falling linearly to ``floor`` at the deceleration lane."""
    progress = np.clip((position - (decel_start - lc_distance)) / lc_distance, 0.0, 1.0)
    return 1.0 - (1.0 - floor) * progress


@dataclass
class Occupancy:
    """Lane occupancy sorted by (lane, position); changing vehicles appear twice."""

    veh: np.ndarray
    lane: np.ndarray
    pos: np.ndarray
    starts: np.ndarray  # starts[L]..starts[L+1] slice lane L
    leader: np.ndarray  # sorted index of the entry ahead in the same lane, or -1
    order: np.ndarray  # sorted position -> unsorted entry index

    def lane_slice(self, lane: int) -> slice:
        return slice(self.starts[lane], self.starts[lane + 1])


@dataclass
class RunOutput:
    config: SimConfig
    retired: pd.DataFrame
    lane_changes: pd.DataFrame
    advisories: pd.DataFrame
    detectors: np.ndarray
    traces: pd.DataFrame
    vehicle_classes: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def detector_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.detectors, columns=["detector", "lane", "time", "speed"]).astype({"detector": int, "lane": int})


class Simulation:
    def __init__(self, config: SimConfig, segment_params: SegmentParams | None = None, table: BaseCaseTable | None = None):
        self.cfg = config
        self.layout = config.layout
        self.cf = config.car_following
        self.lc = config.lane_change
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.rng_arrival, self.rng_vehicle, self.rng_safety = (np.random.default_rng(s) for s in seeds)
        self.time = 0.0
        self.step_index = 0
        self._eval_every = max(1, int(round(config.advisory.reevaluation_period / config.dt)))
        self._discretionary_every = max(1, int(round(config.lane_change.discretionary_period / config.dt)))
        self._refresh_every = max(1, int(round(config.rolling_refresh / config.dt)))
        self.segment_params = segment_params if segment_params is not None else SegmentParams()
        self._table = table
        self._needs_table = config.mode == "advised" or config.record_probabilities
        self._alloc(256)
        self.active = np.empty(0, dtype=np.int64)
        self.queue: deque = deque()
        self.max_queue = 0
        self.vehicles_in = 0
        self.retired_mainline = 0
        self.retired_offramp = 0
        self.missed_exits = 0
        self.detector_log = DetectorLog()
        self._retired: list[tuple] = []
        self._lane_changes: list[tuple] = []
        self._advisories: list[adv.Advisory] = []
        self._traces: list[tuple] = []

    # ------------------------------------------------------------------ state

    _FIELDS = {
        "cls": np.int8,
        "lane": np.int16,
        "target": np.int16,
        "elapsed": float,
        "pos": float,
        "speed": float,
        "desired": float,
        "length": float,
        "amax": float,
        "route": np.int8,
        "entry_time": float,
        "cooldown": float,
        "advised": bool,
        "ever_advised": bool,
        "dwell": float,
        "measured": float,
        "cause": np.int8,
        "lc_from": np.int16,
        "accel": float,
    }

    def _alloc(self, cap: int) -> None:
        self._cap = cap
        self.n = 0
        for name, dtype in self._FIELDS.items():
            setattr(self, name, np.zeros(cap, dtype=dtype))
        self.measured[:] = np.nan

    def _grow(self) -> None:
        cap = self._cap * 2
        for name, dtype in self._FIELDS.items():
            old = getattr(self, name)
            new = np.zeros(cap, dtype=dtype)
            if name == "measured":
                new[:] = np.nan
            new[: self._cap] = old
            setattr(self, name, new)
        self._cap = cap

    def add_vehicle(
        self,
        cls: VehicleClass,
        lane: int,
        position: float,
        speed: float,
        desired_speed: float,
        route: Route | None = None,
        length: float | None = None,
    ) -> int:
        """Insert a vehicle directly (scenario set-up and arrivals)."""
        if self.n == self._cap:
            self._grow()
        i = self.n
        self.n += 1
        spec = self.cfg.specs[VehicleClass(cls)]
        self.cls[i] = cls
        self.lane[i] = lane
        self.target[i] = 0
        self.elapsed[i] = 0.0
        self.pos[i] = position
        self.speed[i] = min(speed, desired_speed)
        self.desired[i] = desired_speed
        self.length[i] = spec.length if length is None else length
        self.amax[i] = self.cf.max_accel_hgv if cls == VehicleClass.HGV else self.cf.max_accel
        if route is None:
            route = Route.OFF_RAMP if cls == VehicleClass.SMART_CAR else Route.MAINLINE
        self.route[i] = route
        self.entry_time[i] = self.time
        self.cooldown[i] = -np.inf
        self.advised[i] = False
        self.ever_advised[i] = False
        self.dwell[i] = 0.0
        self.measured[i] = np.nan
        self.accel[i] = 0.0
        self.active = np.append(self.active, i)
        self.vehicles_in += 1
        return i

    def vehicle(self, i: int) -> Vehicle:
        return Vehicle(
            id=int(i),
            cls=VehicleClass(int(self.cls[i])),
            lane=int(self.lane[i]),
            position=float(self.pos[i]),
            speed=float(self.speed[i]),
            desired_speed=float(self.desired[i]),
            length=float(self.length[i]),
            route=Route(int(self.route[i])),
            entry_time=float(self.entry_time[i]),
            advised=bool(self.advised[i]),
            lc_target=int(self.target[i]),
            lc_elapsed=float(self.elapsed[i]),
            max_accel=float(self.amax[i]),
        )

    def vehicles(self) -> list[Vehicle]:
        return [self.vehicle(i) for i in self.active]

    @property
    def on_road(self) -> int:
        return len(self.active)

    @property
    def table(self) -> BaseCaseTable:
        if self._table is None:
            self._table = default_table()
        return self._table

    # ------------------------------------------------------------ occupancy

    def occupancy(self) -> Occupancy:
        idx = self.active
        ex = idx[self.target[idx] > 0]
        veh = np.concatenate([idx, ex])
        lanes = np.concatenate([self.lane[idx], self.target[ex]]).astype(np.int64)
        pos = self.pos[veh]
        order = np.lexsort((pos, lanes))
        veh, lanes, pos = veh[order], lanes[order], pos[order]
        n_lanes = self.layout.lane_count + 2
        starts = np.searchsorted(lanes, np.arange(n_lanes + 1), side="left")
        leader = np.arange(1, len(veh) + 1)
        same = np.zeros(len(veh), dtype=bool)
        same[:-1] = lanes[1:] == lanes[:-1]
        leader = np.where(same, leader, NO_VEHICLE)
        return Occupancy(veh, lanes, pos, starts, leader, order)

    def neighbors(self, occ: Occupancy, ego: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Leader and follower ids of each ``ego`` in lane ``target`` (``-1`` if none)."""
        lead = np.full(len(ego), NO_VEHICLE, dtype=np.int64)
        lag = np.full(len(ego), NO_VEHICLE, dtype=np.int64)
        for L in np.unique(target):
            sel = np.flatnonzero(target == L)
            sl = occ.lane_slice(int(L))
            lane_veh = occ.veh[sl]
            if len(lane_veh) == 0:
                continue
            k = np.searchsorted(occ.pos[sl], self.pos[ego[sel]], side="right")
            lead[sel] = np.where(k < len(lane_veh), lane_veh[np.minimum(k, len(lane_veh) - 1)], NO_VEHICLE)
            lag[sel] = np.where(k > 0, lane_veh[np.maximum(k - 1, 0)], NO_VEHICLE)
        return lead, lag

    def gap_metrics(self, ego, lead, lag):
        has_lead = lead != NO_VEHICLE
        has_lag = lag != NO_VEHICLE
        li = np.where(has_lead, lead, 0)
        gi = np.where(has_lag, lag, 0)
        lead_net = np.where(has_lead, self.pos[li] - self.length[li] - self.pos[ego], np.inf)
        lag_net = np.where(has_lag, self.pos[ego] - self.length[ego] - self.pos[gi], np.inf)
        spacing = np.where(has_lead & has_lag, self.pos[li] - self.pos[gi], np.inf)
        v = self.speed[ego]
        v_lead = np.where(has_lead, self.speed[li], v)
        v_lag = np.where(has_lag, self.speed[gi], v)
        cf = self.cf
        physical = (
            (lead_net >= cf.standstill_distance)
            & (lag_net >= cf.standstill_distance)
            & braking_safe(lead_net, v, v_lead, cf.max_decel_trailing, cf.standstill_distance)
            & braking_safe(lag_net, v_lag, v, cf.max_decel_trailing, cf.standstill_distance)
        )
        # neither the changer nor its new follower may need to brake harder than
        # the trailing-vehicle limit right after the change
        a_self = idm_accel(v, self.desired[ego], lead_net, v_lead, self.amax[ego], cf, np.where(has_lead, self.accel[li], 0.0))
        a_lag = idm_accel(v_lag, self.desired[gi], lag_net, v, self.amax[gi], cf, self.accel[ego])
        physical &= (a_self >= -cf.max_decel_trailing) & (~has_lag | (a_lag >= -cf.max_decel_trailing))
        return spacing, lead_net, lag_net, v_lead - v, v_lag - v, physical

    # --------------------------------------------------------------- phases

    def _start_change(self, i: int, target: int, cause: Cause, safety=(np.nan, np.nan, np.nan, np.nan)) -> None:
        self._lane_changes.append((int(i), self.time, float(self.pos[i]), int(self.lane[i]), int(target), int(cause), *safety))
        self.lc_from[i] = self.lane[i]
        self.target[i] = target
        self.elapsed[i] = 0.0
        self.cause[i] = cause
        self.cooldown[i] = self.time + self.lc.duration + self.lc.discretionary_cooldown

    def _resolve_conflicts(self, i: int, target: int, lead: int, lag: int, started: list[int]) -> tuple[int, int]:
        """Account for changes already started this step into the same lane."""
        for j in started:
            if self.target[j] != target:
                continue
            if self.pos[j] > self.pos[i] and (lead == NO_VEHICLE or self.pos[j] < self.pos[lead]):
                lead = j
            elif self.pos[j] <= self.pos[i] and (lag == NO_VEHICLE or self.pos[j] > self.pos[lag]):
                lag = j
        return lead, lag

    def _lane_state(self, segment: int):
        return {L: self.segment_params.lane_state(segment, L) for L in range(1, self.layout.lane_count + 1)}

    def _evaluate_advisor(self, ids: np.ndarray) -> np.ndarray:
        layout = self.layout
        segs = layout.segment_of(self.pos[ids])
        states: dict[int, dict] = {}
        queries = []
        for i, seg in zip(ids, segs):
            seg = int(seg)
            if seg not in states:
                states[seg] = self._lane_state(seg)
            queries.append(
                adv.build_query(layout.decel_end - self.pos[i], self.speed[i], int(self.lane[i]), layout.lane_count, states[seg], self.cfg.advisory)
            )
        return adv.evaluate_many(queries, self.table)

    def _advisor_phase(self, occ: Occupancy, started: list[int]) -> None:
        cfg = self.cfg
        layout = self.layout
        idx = self.active
        if self.step_index % self._eval_every == 0:
            eligible = idx[
                (self.cls[idx] == VehicleClass.SMART_CAR)
                & (self.route[idx] == Route.OFF_RAMP)
                & (self.lane[idx] < layout.lane_count)
                & (self.target[idx] == 0)
                & (self.pos[idx] < layout.decel_end)
            ]
            if cfg.mode == "advised":
                eligible = eligible[~self.advised[eligible]]
            if len(eligible):
                probs = self._evaluate_advisor(eligible)
                if cfg.record_probabilities:
                    for i, p in zip(eligible, probs):
                        self._traces.append((int(i), self.time, float(self.pos[i]), int(self.lane[i]), float(p)))
                if cfg.mode == "advised":
                    for i, p in zip(eligible, probs):
                        a = adv.advise(int(i), self.time, int(self.lane[i]), float(p), cfg.advisory, bool(self.advised[i]), float(self.pos[i]))
                        if a is not None:
                            self.advised[i] = True
                            self.ever_advised[i] = True
                            self._advisories.append(a)
        if cfg.mode != "advised":
            return
        ready = idx[self.advised[idx] & (self.target[idx] == 0)]
        if len(ready) == 0:
            return
        # an advisory is spent once the vehicle sits in the rightmost mainline lane
        done = self.lane[ready] >= layout.lane_count
        self.advised[ready[done]] = False
        ready = ready[~done]
        if len(ready) == 0:
            return
        target = self.lane[ready].astype(np.int64) + 1
        lead, lag = self.neighbors(occ, ready, target)
        metrics = self.gap_metrics(ready, lead, lag)
        for k, i in enumerate(ready):
            ld, lg = self._resolve_conflicts(i, int(target[k]), int(lead[k]), int(lag[k]), started)
            if (ld, lg) == (lead[k], lag[k]):
                _, lead_net, lag_net, dv_lead, dv_lag, physical = (m[k] for m in metrics)
            else:
                _, lead_net, lag_net, dv_lead, dv_lag, physical = (m[0] for m in self.gap_metrics(np.array([i]), np.array([ld]), np.array([lg])))
            neighbors = NeighborState(
                None if ld == NO_VEHICLE else float(lead_net),
                None if lg == NO_VEHICLE else float(lag_net),
                float(dv_lead),
                float(dv_lag),
            )
            outcome, check = adv.execute_if_safe(neighbors, self.rng_safety)
            if outcome is adv.ExecutionOutcome.CHANGED and physical:
                self._start_change(int(i), int(target[k]), Cause.ADVISED, (float(lead_net), float(lag_net), check.lead_critical, check.lag_critical))
                started.append(int(i))

    def mandatory_candidates(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vehicles inside the lane-change zone that still need to move right, with targets.

        With the advisor active, a smart car only falls back on this logic once it
        has been advised, or for the final move into the deceleration lane.
        """
        layout = self.layout
        zone_start = layout.decel_lane_start - self.lc.lane_change_distance
        pos = self.pos[ids]
        lane = self.lane[ids]
        sel = (
            (self.route[ids] == Route.OFF_RAMP)
            & (self.target[ids] == 0)
            & (lane <= layout.lane_count)
            & (pos >= zone_start)
            & ((lane < layout.lane_count) | ((pos >= layout.decel_lane_start) & (pos <= layout.decel_end)))
        )
        if self.cfg.mode == "advised":
            sel &= self.ever_advised[ids] | (lane == layout.lane_count)
        return ids[sel], lane[sel].astype(np.int64) + 1

    def _mandatory_accept(self, ids, lead, lag):
        spacing, _, _, _, _, physical = self.gap_metrics(ids, lead, lag)
        factor = mandatory_gap_factor(self.pos[ids], self.layout.decel_lane_start, self.lc.lane_change_distance, self.cf.safety_reduction_factor)
        required = factor * gipps_critical_gap(self.speed[ids], self.lc.gipps_delta, self.lc.gipps_s0)
        return (spacing >= required) & physical

    def mandatory_intent(self, i: int, occ: Occupancy | None = None) -> int | None:
        """Target lane if vehicle ``i`` would start a mandatory change now."""
        occ = occ or self.occupancy()
        ids, target = self.mandatory_candidates(np.array([i]))
        if len(ids) == 0:
            return None
        lead, lag = self.neighbors(occ, ids, target)
        return int(target[0]) if self._mandatory_accept(ids, lead, lag)[0] else None

    def _mandatory_phase(self, occ: Occupancy, started: list[int]) -> None:
        ids, target = self.mandatory_candidates(self.active)
        if len(ids) == 0:
            return
        lead, lag = self.neighbors(occ, ids, target)
        ok = self._mandatory_accept(ids, lead, lag)
        for k in np.flatnonzero(ok):
            i = int(ids[k])
            ld, lg = self._resolve_conflicts(i, int(target[k]), int(lead[k]), int(lag[k]), started)
            if (ld, lg) != (lead[k], lag[k]) and not self._mandatory_accept(np.array([i]), np.array([ld]), np.array([lg]))[0]:
                continue
            self._start_change(i, int(target[k]), Cause.MANDATORY)
            started.append(i)

    def _sustainable_speed(self, ids, lead_net, v_lead):
        near = lead_net < self.lc.discretionary_lookahead
        return np.where(near, np.minimum(self.desired[ids], v_lead), self.desired[ids])

    def _discretionary_phase(self, occ: Occupancy, started: list[int]) -> None:
        layout = self.layout
        idx = self.active
        zone_start = layout.decel_lane_start - self.lc.lane_change_distance
        offramp = self.route[idx] == Route.OFF_RAMP
        ok = (
            (self.target[idx] == 0)
            & (self.cooldown[idx] <= self.time)
            & (self.lane[idx] <= layout.lane_count)
            & ~(offramp & ((self.pos[idx] >= zone_start) | self.ever_advised[idx]))
        )
        ids = idx[ok]
        if len(ids) == 0:
            return
        lane = self.lane[ids].astype(np.int64)
        # own-lane leader from the occupancy
        own_lead = np.full(len(ids), NO_VEHICLE, dtype=np.int64)
        inv = np.empty(len(occ.order), dtype=np.int64)
        inv[occ.order] = np.arange(len(occ.order))
        pos_in_active = np.searchsorted(idx, ids)
        sorted_at = inv[pos_in_active]
        nxt = occ.leader[sorted_at]
        own_lead[nxt != NO_VEHICLE] = occ.veh[nxt[nxt != NO_VEHICLE]]
        _, own_net, _, own_dv, _, _ = self.gap_metrics(ids, own_lead, np.full(len(ids), NO_VEHICLE))
        v_own = self._sustainable_speed(ids, own_net, self.speed[ids] + own_dv)

        best_gain = np.zeros(len(ids))
        best_target = np.zeros(len(ids), dtype=np.int64)
        for side in (-1, +1):  # left first: ties prefer overtaking on the left
            target = lane + side
            valid = (target >= 1) & (target <= layout.lane_count)
            if not valid.any():
                continue
            sub = np.flatnonzero(valid)
            lead, lag = self.neighbors(occ, ids[sub], target[sub])
            spacing, lead_net, _, dv_lead, _, physical = self.gap_metrics(ids[sub], lead, lag)
            v_new = self._sustainable_speed(ids[sub], lead_net, self.speed[ids[sub]] + dv_lead)
            gain = v_new - v_own[sub]
            g_req = gipps_critical_gap(self.speed[ids[sub]], self.lc.gipps_delta, self.lc.gipps_s0)
            feasible = (gain >= self.lc.discretionary_gain) & (spacing >= g_req) & physical & (gain > best_gain[sub])
            best_gain[sub[feasible]] = gain[feasible]
            best_target[sub[feasible]] = target[sub][feasible]
        for k in np.flatnonzero(best_target):
            i = int(ids[k])
            tgt = int(best_target[k])
            if started:
                lead, lag = self.neighbors(occ, np.array([i]), np.array([tgt]))
                ld, lg = self._resolve_conflicts(i, tgt, int(lead[0]), int(lag[0]), started)
                spacing, _, _, _, _, physical = self.gap_metrics(np.array([i]), np.array([ld]), np.array([lg]))
                if not (physical[0] and spacing[0] >= gipps_critical_gap(self.speed[i], self.lc.gipps_delta, self.lc.gipps_s0)):
                    continue
            self._start_change(i, tgt, Cause.DISCRETIONARY)
            started.append(i)

    def _progress_changes(self) -> bool:
        idx = self.active
        ex = idx[self.target[idx] > 0]
        if len(ex) == 0:
            return False
        self.elapsed[ex] += self.cfg.dt
        done = ex[self.elapsed[ex] >= self.lc.duration - _EPS]
        if len(done):
            rightward = self.target[done] > self.lane[done]
            self.advised[done[rightward]] = False
            self.lane[done] = self.target[done]
            self.target[done] = 0
            self.elapsed[done] = 0.0
        return True

    def _accelerations(self, occ: Occupancy) -> np.ndarray:
        idx = self.active
        veh = occ.veh
        has_lead = occ.leader != NO_VEHICLE
        lead = np.where(has_lead, veh[np.where(has_lead, occ.leader, 0)], 0)
        net = np.where(has_lead, self.pos[lead] - self.length[lead] - self.pos[veh], np.inf)
        v_lead = np.where(has_lead, self.speed[lead], self.speed[veh])
        a_lead = np.where(has_lead, self.accel[lead], 0.0)
        acc_sorted = idm_accel(self.speed[veh], self.desired[veh], net, v_lead, self.amax[veh], self.cf, a_lead)
        acc_entries = np.empty_like(acc_sorted)
        acc_entries[occ.order] = acc_sorted
        n = len(idx)
        acc = acc_entries[:n].copy()
        ex_pos = np.flatnonzero(self.target[idx] > 0)
        if len(ex_pos):
            acc[ex_pos] = np.minimum(acc[ex_pos], acc_entries[n:])
        # exiting vehicles that missed the deceleration lane stop at its end
        layout = self.layout
        walled = np.flatnonzero(
            (self.route[idx] == Route.OFF_RAMP)
            & (self.lane[idx] <= layout.lane_count)
            & (self.target[idx] != layout.decel_lane)
            & (self.pos[idx] <= layout.decel_end)
        )
        if len(walled):
            w = idx[walled]
            acc_wall = idm_accel(self.speed[w], self.desired[w], layout.decel_end - self.pos[w], 0.0, self.amax[w], self.cf, heuristic=False)
            acc[walled] = np.minimum(acc[walled], acc_wall)
        return acc

    def _kinematics(self, acc: np.ndarray) -> None:
        idx = self.active
        dt = self.cfg.dt
        v = self.speed[idx]
        v_new = v + acc * dt
        stops = v_new < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(stops, v * v / np.maximum(-2.0 * acc, _EPS), 0.0)
        v_new = np.clip(v_new, 0.0, self.desired[idx])
        dx = np.where(stops, dx, 0.5 * (v + v_new) * dt)
        self.pos[idx] += dx
        self.speed[idx] = v_new
        self.accel[idx] = acc

    def _arrivals(self) -> None:
        cfg = self.cfg
        for cls in spawn_arrivals(cfg.flow, cfg.composition, self.rng_arrival, cfg.dt):
            lo, hi = cfg.specs[cls].desired_speed_kmh
            self.queue.append((cls, self.rng_vehicle.uniform(lo, hi) / 3.6))
        self.max_queue = max(self.max_queue, len(self.queue))
        if not self.queue:
            return
        lanes = range(1, self.layout.lane_count + 1)
        idx = self.active
        last: dict[int, int] = {}
        for L in lanes:
            in_lane = idx[(self.lane[idx] == L) | (self.target[idx] == L)]
            if len(in_lane):
                last[L] = int(in_lane[np.argmin(self.pos[in_lane])])
        cf = self.cf
        while self.queue:
            cls, desired = self.queue[0]
            options = []
            speeds = []
            for L in lanes:
                j = last.get(L)
                if j is None:
                    options.append(L)
                    speeds.append(desired)
                    continue
                net = self.pos[j] - self.length[j]
                v_in = min(desired, self.speed[j]) if net < 200.0 else desired
                if net >= cf.standstill_distance + cf.headway_time * v_in:
                    options.append(L)
                    speeds.append(v_in)
            if not options:
                break
            k = int(self.rng_vehicle.integers(len(options)))
            self.queue.popleft()
            last[options[k]] = self.add_vehicle(cls, options[k], 0.0, speeds[k], desired)

    def _retire(self, ids: np.ndarray, missed: bool) -> None:
        for i in ids:
            self._retired.append(
                (int(i), int(self.cls[i]), int(self.route[i]), float(self.entry_time[i]), float(self.measured[i]), float(self.desired[i]), missed)
            )
        self.active = np.setdiff1d(self.active, ids, assume_unique=True)

    def _record(self, old_pos: np.ndarray, ids: np.ndarray) -> None:
        layout = self.layout
        dt = self.cfg.dt
        t0 = self.time - dt
        new_pos = self.pos[ids]
        moved = new_pos - old_pos
        for d, x in enumerate(layout.detector_positions):
            crossed = np.flatnonzero((old_pos < x) & (new_pos >= x))
            if len(crossed):
                c = ids[crossed]
                frac = (x - old_pos[crossed]) / moved[crossed]
                self.detector_log.append(np.full(len(c), d), self.lane[c], t0 + frac * dt, self.speed[c])
        x = layout.offramp_travel_length
        crossed = np.flatnonzero((old_pos < x) & (new_pos >= x))
        if len(crossed):
            c = ids[crossed]
            self.measured[c] = t0 + (x - old_pos[crossed]) / moved[crossed] * dt
        on_ramp = (self.lane[ids] == layout.decel_lane) | (self.target[ids] == layout.decel_lane)
        exits = ids[on_ramp & (new_pos >= x)]
        ends = ids[~on_ramp & (new_pos >= layout.length)]
        offramp = self.route[ids] == Route.OFF_RAMP
        stuck = offramp & ~on_ramp & (new_pos >= layout.decel_end - self.lc.dwell_zone)
        if stuck.any():
            s = ids[stuck]
            self.dwell[s] += dt
        missed = ids[stuck & (self.dwell[ids] >= self.lc.max_dwell - _EPS)]
        if len(exits):
            self.retired_offramp += len(exits)
            self._retire(exits, False)
        if len(ends):
            self.retired_mainline += len(ends)
            self._retire(ends, False)
        if len(missed):
            logger.debug("t=%.1f: %d exiting vehicle(s) gave up at the lane end", self.time, len(missed))
            self.missed_exits += len(missed)
            self._retire(missed, True)

    def check_integrity(self, occ: Occupancy | None = None) -> None:
        occ = occ or self.occupancy()
        idx = self.active
        if np.any(~np.isfinite(self.pos[idx])) or np.any(~np.isfinite(self.speed[idx])):
            raise SimulationIntegrityError(f"t={self.time:.1f}: non-finite vehicle state")
        if np.any(self.speed[idx] < 0) or np.any(self.speed[idx] > self.desired[idx] + 1e-9):
            raise SimulationIntegrityError(f"t={self.time:.1f}: speed outside [0, desired]")
        has = occ.leader != NO_VEHICLE
        if has.any():
            f = occ.veh[has]
            l = occ.veh[occ.leader[has]]
            net = self.pos[l] - self.length[l] - self.pos[f]
            bad = net < -1e-6
            if bad.any():
                k = int(np.argmax(bad))
                raise SimulationIntegrityError(
                    f"t={self.time:.1f}: vehicle {f[k]} overlaps vehicle {l[k]} in lane {occ.lane[has][k]} (net gap {net[k]:.3f} m)"
                )
        if self.vehicles_in != self.retired_mainline + self.retired_offramp + self.missed_exits + len(idx):
            raise SimulationIntegrityError(f"t={self.time:.1f}: vehicle conservation violated")

    # ----------------------------------------------------------------- step

    def step(self) -> None:
        cfg = self.cfg
        if self._needs_table and cfg.param_mode == "rolling" and self.step_index % self._refresh_every == 0 and self.step_index:
            window = (self.time - cfg.rolling_window, self.time)
            self.segment_params = SegmentParams.from_records(
                self.detector_log, len(self.layout.detector_positions), self.layout.lane_count, window, self.segment_params
            )
        occ = self.occupancy()
        if cfg.check_integrity:
            self.check_integrity(occ)
        started: list[int] = []
        if self._needs_table:
            self._advisor_phase(occ, started)
        self._mandatory_phase(occ, started)
        if self.step_index % self._discretionary_every == 0:
            self._discretionary_phase(occ, started)
        progressed = self._progress_changes()
        if started or progressed:
            occ = self.occupancy()
        acc = self._accelerations(occ)
        ids = self.active.copy()
        old_pos = self.pos[ids].copy()
        self._kinematics(acc)
        self.time = (self.step_index + 1) * cfg.dt
        self.step_index += 1
        self._arrivals()
        self._record(old_pos, ids)

    def run(self, progress=None) -> RunOutput:
        steps = int(round(self.cfg.horizon / self.cfg.dt))
        while self.step_index < steps:
            self.step()
            if progress is not None and self.step_index % 600 == 0:
                progress(self.time)
        if self.cfg.check_integrity:
            self.check_integrity()
        return self.output()

    def output(self) -> RunOutput:
        retired = pd.DataFrame(self._retired, columns=RETIRED_COLUMNS)
        lane_changes = pd.DataFrame(self._lane_changes, columns=LANE_CHANGE_COLUMNS)
        lane_changes["cause"] = lane_changes["cause"].map(lambda c: Cause(c).name.lower())
        advisories = pd.DataFrame(
            [(a.vehicle_id, a.time, a.position, a.lane, a.probability_at_trigger, self.cfg.advisory.p_l) for a in self._advisories],
            columns=ADVISORY_COLUMNS,
        )
        traces = pd.DataFrame(self._traces, columns=TRACE_COLUMNS)
        diagnostics = {
            "vehicles_in": self.vehicles_in,
            "retired_mainline": self.retired_mainline,
            "retired_offramp": self.retired_offramp,
            "missed_exits": self.missed_exits,
            "on_road": self.on_road,
            "queued": len(self.queue),
            "max_queue": self.max_queue,
            "param_fallbacks": self.segment_params.fallbacks,
        }
        classes = self.cls[: self.n].astype(np.int64)
        return RunOutput(self.cfg, retired, lane_changes, advisories, self.detector_log.array.copy(), traces, classes, diagnostics)
