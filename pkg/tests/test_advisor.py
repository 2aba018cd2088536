import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divergesim import advisor as adv
from divergesim.gap_acceptance import NeighborState, acceptance_probability, gipps_critical_gap
from divergesim.headway import LogNormalHeadway
from divergesim.probability import simulate_chain

CFG = adv.AdvisoryConfig(p_l=0.9)
SPARSE = {L: (25.0, LogNormalHeadway(math.log(500.0), 0.4)) for L in range(1, 5)}
BUSY = {L: (22.0 + L, LogNormalHeadway(math.log(35.0), 0.6)) for L in range(1, 5)}


def test_rightmost_lane_needs_no_change():
    assert adv.evaluate(1000.0, 30.0, 4, 6601.0, 4, BUSY, CFG) == 1.0


def test_query_structure():
    q = adv.build_query(2000.0, 30.0, 1, 4, BUSY, CFG)
    assert q.d == 2000.0 and q.v1 == 30.0
    assert len(q.lanes) == 3
    v_prev = 30.0
    for ln in q.lanes:
        assert abs(ln.v - v_prev) > CFG.v_l - 1e-9
        assert ln.g == pytest.approx(gipps_critical_gap(ln.v, 1.6, 1.0))
        assert ln.t == 3.0
        v_prev = ln.v


def test_sparse_traffic_far_from_exit_is_near_certain():
    p = adv.evaluate(6601.0 - 3000.0, 30.0, 3, 6601.0, 4, SPARSE, CFG)
    assert p >= 0.99
    q = adv.build_query(3000.0, 30.0, 3, 4, SPARSE, CFG)
    assert simulate_chain(q.d, q.v1, q.lanes, 100_000, np.random.default_rng(8)) >= 0.99


def test_three_changes_in_fifty_meters_impossible():
    assert adv.evaluate(6551.0, 30.0, 1, 6601.0, 4, SPARSE, CFG) == pytest.approx(0.0, abs=1e-6)


def test_advice_threshold_is_strict():
    assert adv.advise(1, 10.0, 2, 0.9, CFG) is None
    a = adv.advise(1, 10.0, 2, 0.899, CFG, position=3000.0)
    assert a is not None
    assert (a.target_lane, a.lane, a.probability_at_trigger, a.position) == (3, 2, 0.899, 3000.0)


def test_advice_is_latched():
    assert adv.advise(1, 10.0, 2, 0.2, CFG, already_advised=True) is None
    assert adv.advise(1, 10.0, 2, 0.99, CFG, already_advised=True) is None


def test_execute_with_open_lane():
    outcome, check = adv.execute_if_safe(NeighborState(None, None), np.random.default_rng(0))
    assert outcome is adv.ExecutionOutcome.CHANGED and check.safe


def test_execute_deferred_on_overlap():
    rng = np.random.default_rng(0)
    outcomes = {adv.execute_if_safe(NeighborState(80.0, -0.2), rng)[0] for _ in range(5000)}
    assert outcomes == {adv.ExecutionOutcome.DEFERRED}


def test_execute_marginal_gap_frequency():
    rng = np.random.default_rng(99)
    n = 100_000
    ok = sum(adv.execute_if_safe(NeighborState(6.0, 6.0), rng)[0] is adv.ExecutionOutcome.CHANGED for _ in range(n))
    assert abs(ok / n - acceptance_probability(6.0, 6.0)) <= 0.01


@pytest.mark.parametrize("kwargs", [{"p_l": 0.0}, {"p_l": 1.0}, {"delta": 0.0}, {"v_l": -1.0}, {"reevaluation_period": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        adv.AdvisoryConfig(**kwargs)


def test_trigger_time():
    times = [0.0, 1.0, 2.0, 3.0]
    probs = [0.999, 0.95, 0.85, 0.5]
    assert adv.trigger_time(times, probs, 0.99) == 1.0
    assert adv.trigger_time(times, probs, 0.9) == 2.0
    assert adv.trigger_time(times, probs, 0.85) == 3.0
    assert adv.trigger_time(times, probs, 0.1) is None


@settings(max_examples=300)
@given(
    probs=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60),
    a=st.floats(0.01, 0.99),
    b=st.floats(0.01, 0.99),
)
def test_higher_threshold_triggers_no_later(probs, a, b):
    hi, lo = max(a, b), min(a, b)
    times = np.arange(len(probs), dtype=float)
    t_hi = adv.trigger_time(times, probs, hi)
    t_lo = adv.trigger_time(times, probs, lo)
    if t_lo is not None:
        assert t_hi is not None and t_hi <= t_lo


@settings(max_examples=200, deadline=None)
@given(lane=st.integers(1, 3), d=st.floats(0.0, 6000.0), v=st.floats(0.0, 36.0))
def test_evaluate_in_unit_interval(lane, d, v):
    p = adv.evaluate(6601.0 - d, v, lane, 6601.0, 4, BUSY, CFG)
    assert 0.0 <= p <= 1.0
