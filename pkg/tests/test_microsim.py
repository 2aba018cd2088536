import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divergesim.gap_acceptance import gipps_critical_gap
from divergesim.headway import LogNormalHeadway, sample_headways
from divergesim.microsim import (
    CarFollowingParams,
    DetectorRecord,
    RoadLayout,
    Route,
    SegmentParams,
    SimConfig,
    Simulation,
    SimulationIntegrityError,
    Vehicle,
    VehicleClass,
    car_following_accel,
    estimate_lane_params,
    execute_lane_change,
    spawn_arrivals,
)
from divergesim.microsim.simulation import mandatory_gap_factor

CF = CarFollowingParams()
CAR, SMART, HGV = VehicleClass.CAR, VehicleClass.SMART_CAR, VehicleClass.HGV


def empty_sim(**kwargs) -> Simulation:
    return Simulation(SimConfig(flow=0.0, **kwargs))


def car(position, speed, lane=1, desired=33.0, length=4.5, vid=0):
    return Vehicle(vid, CAR, lane, position, speed, desired, length, Route.MAINLINE)


# ---------------------------------------------------------------- arrivals


def test_poisson_arrival_count():
    rng = np.random.default_rng(3)
    comp = {CAR: 1.0}
    total = sum(len(spawn_arrivals(3600.0, comp, rng, 0.1)) for _ in range(36_000))
    assert abs(total - 3600) <= 3 * math.sqrt(3600)


def test_class_frequencies():
    comp = {CAR: 0.88, SMART: 0.10, HGV: 0.02}
    arrivals = spawn_arrivals(3.6e8, comp, np.random.default_rng(1), 1.0)
    assert len(arrivals) > 90_000
    for cls, share in comp.items():
        assert abs(arrivals.count(cls) / len(arrivals) - share) <= 0.005


def test_zero_flow_never_spawns():
    rng = np.random.default_rng(0)
    assert all(spawn_arrivals(0.0, {CAR: 1.0}, rng, 0.1) == [] for _ in range(1000))
    sim = Simulation(SimConfig(flow=0.0, horizon=60.0))
    out = sim.run()
    assert out.diagnostics["vehicles_in"] == 0


def test_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        spawn_arrivals(100.0, {CAR: 0.5, SMART: 0.4}, np.random.default_rng(0), 0.1)


def test_smart_cars_take_the_off_ramp():
    sim = empty_sim()
    assert sim.vehicle(sim.add_vehicle(SMART, 1, 0.0, 30.0, 33.0)).route is Route.OFF_RAMP
    assert sim.vehicle(sim.add_vehicle(CAR, 2, 0.0, 30.0, 33.0)).route is Route.MAINLINE


# ----------------------------------------------------------- car following


def test_free_road_at_desired_speed_is_equilibrium():
    assert car_following_accel(car(100.0, 33.0), None, CF) == pytest.approx(0.0, abs=1e-12)


def test_standstill_at_minimum_gap_is_equilibrium():
    leader = car(106.0, 0.0)
    ego = car(100.0, 0.0)  # net gap 106 - 4.5 - 100 = 1.5 m
    assert car_following_accel(ego, leader, CF) == pytest.approx(0.0, abs=1e-12)


def test_acceleration_bounds():
    assert car_following_accel(car(100.0, 33.0), car(104.6, 0.0), CF) == -CF.max_decel_own
    assert car_following_accel(car(100.0, 0.0), None, CF) == pytest.approx(CF.max_accel)


def test_overlap_is_rejected():
    with pytest.raises(ValueError):
        car_following_accel(car(100.0, 10.0), car(103.0, 10.0), CF)


@pytest.mark.parametrize("start_gap", [200.0, 150.0, 120.0])
def test_approach_to_stopped_leader_is_collision_free(start_gap):
    sim = empty_sim(layout=RoadLayout())
    lead = sim.add_vehicle(CAR, 1, 1000.0, 0.0, 33.4)
    sim.desired[lead] = 1e-9  # parked
    ego = sim.add_vehicle(CAR, 1, 1000.0 - 4.5 - start_gap, 30.0, 33.4)
    sim.cooldown[ego] = np.inf  # stay in lane
    min_gap = np.inf
    for _ in range(600):
        sim.step()
        min_gap = min(min_gap, sim.pos[lead] - sim.length[lead] - sim.pos[ego])
    assert sim.lane[ego] == 1
    assert min_gap >= 0.0
    assert sim.speed[ego] < 0.05


# ---------------------------------------------------------------- stepping


def test_single_car_kinematics():
    sim = empty_sim()
    i = sim.add_vehicle(CAR, 2, 100.0, 30.0, 30.0)
    sim.step()
    assert sim.pos[i] == pytest.approx(100.0 + 30.0 * 0.1)
    assert sim.speed[i] == pytest.approx(30.0)


def test_execute_lane_change_completes_on_threshold():
    v = replace(car(10.0, 20.0, lane=2), lc_target=3, lc_elapsed=2.95)
    done = execute_lane_change(v, 3, 0.1)
    assert done.lane == 3 and done.lc_state == "none"
    mid = execute_lane_change(replace(v, lc_elapsed=1.0), 3, 0.1)
    assert mid.lane == 2 and mid.lc_elapsed == pytest.approx(1.1) and mid.lc_state == "executing"


def test_execute_requires_active_change():
    with pytest.raises(ValueError):
        execute_lane_change(car(10.0, 20.0), 2, 0.1)


def test_simulation_change_completes_after_duration():
    sim = empty_sim()
    i = sim.add_vehicle(CAR, 2, 1000.0, 25.0, 30.0)
    sim.cooldown[i] = np.inf  # no discretionary moves
    sim._start_change(i, 3, 2)
    sim.elapsed[i] = 2.95
    sim.step()
    assert (sim.lane[i], sim.target[i]) == (3, 0)


def test_follower_in_target_lane_reacts_to_changer():
    sim = empty_sim()
    ego = sim.add_vehicle(CAR, 2, 1000.0, 25.0, 30.0)
    follower = sim.add_vehicle(CAR, 3, 1000.0 - 4.5 - 5.0, 25.0, 30.0)
    free = sim._accelerations(sim.occupancy())[follower]
    sim._start_change(ego, 3, 2)
    acc = sim._accelerations(sim.occupancy())
    assert free > 0
    assert acc[follower] < 0


def test_speed_cap_holds_during_changes():
    sim = Simulation(SimConfig(flow=6400.0, horizon=300.0, seed=5))
    for _ in range(3000):
        sim.step()
        idx = sim.active
        assert np.all(sim.speed[idx] <= sim.desired[idx] + 1e-9)
        assert np.all(sim.speed[idx] >= 0)


def test_overlap_raises_integrity_error():
    sim = empty_sim()
    sim.add_vehicle(CAR, 1, 100.0, 10.0, 30.0)
    sim.add_vehicle(CAR, 1, 98.0, 10.0, 30.0)
    with pytest.raises(SimulationIntegrityError):
        sim.step()


def test_determinism():
    cfg = SimConfig(flow=9600.0, smart_share=0.1, horizon=400.0, seed=11)
    a = Simulation(cfg).run()
    b = Simulation(cfg).run()
    pd.testing.assert_frame_equal(a.retired, b.retired)
    pd.testing.assert_frame_equal(a.lane_changes, b.lane_changes)
    assert np.array_equal(a.detectors, b.detectors)


def test_different_seeds_differ():
    a = Simulation(SimConfig(flow=6400.0, horizon=200.0, seed=1)).run()
    b = Simulation(SimConfig(flow=6400.0, horizon=200.0, seed=2)).run()
    assert not np.array_equal(a.detectors, b.detectors)


@pytest.fixture(scope="module")
def hour_6400():
    sim = Simulation(SimConfig(flow=6400.0, smart_share=0.1, horizon=3600.0, seed=32))
    return sim, sim.run()


def test_conservation_over_an_hour(hour_6400):
    sim, out = hour_6400
    d = out.diagnostics
    assert d["vehicles_in"] == d["retired_mainline"] + d["retired_offramp"] + d["missed_exits"] + d["on_road"]
    assert d["vehicles_in"] + d["queued"] > 5500
    assert len(out.retired) == d["retired_mainline"] + d["retired_offramp"] + d["missed_exits"]


def test_detector_completeness(hour_6400):
    sim, out = hour_6400
    det = out.detector_frame()
    retired = len(out.retired)
    for k, x in enumerate(sim.layout.detector_positions):
        passed_on_road = int(np.sum(sim.pos[sim.active] >= x))
        assert (det["detector"] == k).sum() == retired + passed_on_road


def test_first_detector_speed_plausible(hour_6400):
    _, out = hour_6400
    det = out.detector_frame()
    kmh = det.loc[det["detector"] == 0, "speed"].mean() * 3.6
    assert 80.0 <= kmh <= 120.0


def test_retired_vehicles_have_travel_times(hour_6400):
    _, out = hour_6400
    ok = out.retired[~out.retired["missed_exit"]]
    assert ok["exit_time"].notna().all()
    free = 6904.0 / ok["desired_speed"]
    assert np.all(ok["exit_time"] - ok["entry_time"] >= free - 1e-6)


def test_off_ramp_vehicles_exit_through_the_ramp(hour_6400):
    _, out = hour_6400
    rt = out.retired[~out.retired["missed_exit"]]
    assert (rt["route"] == Route.OFF_RAMP).sum() == out.diagnostics["retired_offramp"]


# ------------------------------------------------------------ mandatory logic


def mandatory_scene(ego_pos, spacing_factor, v=28.0):
    """Exiting car in lane 3 with a faster leader and a slower follower in lane 4
    whose front bumpers are ``spacing_factor * g`` apart."""
    sim = empty_sim()
    g = gipps_critical_gap(v)
    spacing = spacing_factor * g
    ego = sim.add_vehicle(SMART, 3, ego_pos, v, 33.3)
    sim.add_vehicle(CAR, 4, ego_pos + spacing / 2 + 2.25, v + 5.0, 33.3)
    sim.add_vehicle(CAR, 4, ego_pos - spacing / 2 + 2.25, v - 5.0, 33.3)
    return sim, ego


def test_no_intent_outside_lane_change_distance():
    sim, ego = mandatory_scene(6444.0 - 2000.0, 3.0)
    assert sim.mandatory_intent(ego) is None


def test_intent_at_activation_distance_with_full_gap():
    sim, ego = mandatory_scene(6444.0 - 1600.0, 1.05)
    assert sim.mandatory_intent(ego) == 4
    sim, ego = mandatory_scene(6444.0 - 1600.0, 0.7)
    assert sim.mandatory_intent(ego) is None


def test_relaxed_gap_accepted_at_deceleration_lane():
    sim, ego = mandatory_scene(6444.0, 0.7)
    assert sim.mandatory_intent(ego) == 4
    sim, ego = mandatory_scene(6444.0, 0.55)
    assert sim.mandatory_intent(ego) is None


def test_gap_factor_is_linear():
    assert mandatory_gap_factor(4844.0, 6444.0, 1600.0, 0.6) == pytest.approx(1.0)
    assert mandatory_gap_factor(5644.0, 6444.0, 1600.0, 0.6) == pytest.approx(0.8)
    assert mandatory_gap_factor(6444.0, 6444.0, 1600.0, 0.6) == pytest.approx(0.6)
    assert mandatory_gap_factor(1000.0, 6444.0, 1600.0, 0.6) == pytest.approx(1.0)


def test_mainline_vehicles_have_no_mandatory_intent():
    sim = empty_sim()
    i = sim.add_vehicle(CAR, 3, 6000.0, 28.0, 33.3)
    assert sim.mandatory_intent(i) is None


def test_blocked_exit_waits_then_counts_as_missed():
    sim = empty_sim()
    ego = sim.add_vehicle(SMART, 4, 6300.0, 20.0, 33.3)
    # a long slow platoon-like blocker occupies the deceleration lane alongside
    blocker = sim.add_vehicle(CAR, 5, 6900.0, 0.0, 1e-6, route=Route.OFF_RAMP, length=700.0)
    sim.cooldown[ego] = np.inf
    max_pos = 0.0
    for _ in range(1200):
        sim.step()
        if ego in sim.active:
            max_pos = max(max_pos, sim.pos[ego])
    assert max_pos <= sim.layout.decel_end
    assert sim.missed_exits == 1
    assert blocker in sim.active


# ----------------------------------------------------------------- estimator


def test_constant_stream_estimate():
    records = [DetectorRecord(0, 2, 2.0 * k, 20.0) for k in range(50)]
    v, hw = estimate_lane_params(records, lane=2)
    assert v == pytest.approx(20.0)
    assert hw.mu == pytest.approx(math.log(40.0))
    assert hw.sigma == pytest.approx(0.0, abs=1e-9)


def synthetic_records(mu, sigma, speed, n, seed, lane=1, detector=0):
    gaps = sample_headways(LogNormalHeadway(mu, sigma), n, np.random.default_rng(seed))
    times = np.concatenate([[0.0], np.cumsum(gaps / speed)])
    return [DetectorRecord(detector, lane, float(t), speed) for t in times]


def test_estimator_closed_loop():
    v, hw = estimate_lane_params(synthetic_records(3.5, 0.4, 27.0, 5000, 4), lane=1)
    assert abs(v - 27.0) <= 0.5
    assert abs(hw.mu - 3.5) <= 0.05
    assert abs(hw.sigma - 0.4) <= 0.05


def test_estimator_window_and_lane_filter():
    recs = synthetic_records(3.5, 0.4, 27.0, 300, 4, lane=1) + [DetectorRecord(0, 2, 1.0, 5.0)]
    assert estimate_lane_params(recs, lane=2) is None
    window = (100.0, 200.0)
    speeds_all = estimate_lane_params(recs, lane=1)
    speeds_win = estimate_lane_params(recs, lane=1, window=window)
    assert speeds_all is not None and speeds_win is not None


def test_single_record_falls_back():
    one = [DetectorRecord(0, 1, 5.0, 20.0)]
    assert estimate_lane_params(one, lane=1) is None
    previous = SegmentParams({(0, 1): (24.0, LogNormalHeadway(3.0, 0.3))})
    params = SegmentParams.from_records(one, stations=1, lanes=2, previous=previous)
    assert params.lane_state(0, 1) == (24.0, LogNormalHeadway(3.0, 0.3))
    assert params.lane_state(0, 2) == params.default
    assert params.fallbacks == 1


def test_pooled_estimates_never_pair_runs():
    a = synthetic_records(3.0, 0.0, 20.0, 10, 0)
    b = [replace(r, time=r.time + 1e4) for r in synthetic_records(3.0, 0.0, 20.0, 10, 0)]
    pooled = SegmentParams.pooled([a, b], stations=1, lanes=1)
    v, hw = pooled.lane_state(0, 1)
    assert hw.sigma == pytest.approx(0.0, abs=1e-9)
    assert hw.mu == pytest.approx(3.0)


def test_param_rows_round_trip():
    params = SegmentParams({(0, 1): (24.0, LogNormalHeadway(3.0, 0.3)), (3, 4): (31.0, LogNormalHeadway(3.9, 0.7))})
    again = SegmentParams.from_rows(params.to_rows())
    assert again.values == params.values


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(2.5, 4.5), sigma=st.floats(0.05, 1.0), speed=st.floats(5.0, 35.0), seed=st.integers(0, 2**31))
def test_estimator_recovers_any_stream(mu, sigma, speed, seed):
    v, hw = estimate_lane_params(synthetic_records(mu, sigma, speed, 4000, seed), lane=1)
    assert abs(v - speed) <= 0.5
    assert abs(hw.mu - mu) <= 0.05
    assert abs(hw.sigma - sigma) <= 0.05


# ------------------------------------------------------------ advised runs


@pytest.fixture(scope="module")
def advised_run():
    cfg = SimConfig(flow=9600.0, smart_share=0.1, mode="advised", horizon=600.0, seed=3)
    cfg = replace(cfg, advisory=replace(cfg.advisory, p_l=0.9))
    return Simulation(cfg).run()


def test_advisories_only_for_exiting_smart_cars(advised_run):
    ids = advised_run.advisories["vehicle_id"].to_numpy()
    assert len(ids) > 0
    assert np.all(advised_run.vehicle_classes[ids] == SMART)
    assert (advised_run.advisories["probability_at_trigger"] < 0.9).all()


def test_advised_changes_pass_the_safety_gate(advised_run):
    lc = advised_run.lane_changes
    advised = lc[lc["cause"] == "advised"]
    assert len(advised) > 0
    assert (advised["lead_gap"] >= advised["lead_critical"]).all()
    assert (advised["lag_gap"] >= advised["lag_critical"]).all()
    assert (advised["to_lane"] == advised["from_lane"] + 1).all()


def test_one_advisory_per_lane(advised_run):
    adv = advised_run.advisories
    assert not adv.duplicated(["vehicle_id", "lane"]).any()


def test_advice_latches_when_probability_recovers():
    cfg = SimConfig(flow=0.0, mode="advised")
    cfg = replace(cfg, advisory=replace(cfg.advisory, p_l=0.999))
    busy = SegmentParams(default=(30.0, LogNormalHeadway(math.log(25.0), 0.8)))
    sim = Simulation(cfg, segment_params=busy)
    ego = sim.add_vehicle(SMART, 1, 3000.0, 30.0, 33.3)
    # keep lane 2 blocked so the advice cannot be executed yet
    sim.add_vehicle(CAR, 2, 3000.0 + 200.0, 30.0, 30.0, length=420.0)
    sim.step()
    assert sim.advised[ego]
    sim.segment_params = SegmentParams(default=(30.0, LogNormalHeadway(math.log(2000.0), 0.1)))
    for _ in range(30):
        sim.step()
    assert sim.advised[ego] and sim.target[ego] == 0 and sim.lane[ego] == 1
    assert len(sim._advisories) == 1


def test_rolling_parameter_mode_runs():
    cfg = SimConfig(flow=9600.0, smart_share=0.1, mode="advised", param_mode="rolling", horizon=240.0, seed=4, rolling_refresh=60.0)
    out = Simulation(cfg).run()
    assert out.diagnostics["vehicles_in"] > 0


def test_probability_traces_recorded():
    cfg = SimConfig(flow=9600.0, smart_share=0.1, horizon=300.0, seed=6, record_probabilities=True)
    out = Simulation(cfg).run()
    tr = out.traces
    assert len(tr) > 0
    assert tr["probability"].between(0.0, 1.0).all()
    assert np.all(out.vehicle_classes[tr["vehicle_id"].to_numpy()] == SMART)
