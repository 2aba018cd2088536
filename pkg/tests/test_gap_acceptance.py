import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from divergesim.gap_acceptance import (
    LAG_NOISE_SD,
    LEAD_NOISE_SD,
    NeighborState,
    acceptance_probability,
    gipps_critical_gap,
    is_safe_lane_change,
    toledo_lag_critical_gap,
    toledo_lead_critical_gap,
)


@pytest.mark.parametrize("v,expected", [(25.0, 41.0), (0.0, 1.0), (30.0, 49.0)])
def test_gipps(v, expected):
    assert gipps_critical_gap(v, 1.6, 1.0) == pytest.approx(expected)


@pytest.mark.parametrize("dv,expected", [(0.0, 3.869), (1.0, 0.260), (-1.0, 4.874)])
def test_lead_critical_gap(dv, expected):
    assert toledo_lead_critical_gap(dv, 0.0) == pytest.approx(expected, abs=1e-3)


@pytest.mark.parametrize("dv,expected", [(0.0, 4.175), (-2.0, 4.175), (2.0, 10.70)])
def test_lag_critical_gap(dv, expected):
    assert toledo_lag_critical_gap(dv, 0.0) == pytest.approx(expected, abs=1e-2)


def test_wide_gaps_always_safe():
    rng = np.random.default_rng(0)
    for dv in (-10.0, 0.0, 5.0):
        assert all(is_safe_lane_change(NeighborState(1000.0, 1000.0, dv, dv), rng) for _ in range(500))


def test_overlap_never_safe():
    rng = np.random.default_rng(0)
    assert not any(is_safe_lane_change(NeighborState(-0.5, 50.0), rng) for _ in range(2000))
    assert not any(is_safe_lane_change(NeighborState(50.0, -0.5), rng) for _ in range(2000))


def test_missing_neighbour_counts_as_infinite_gap():
    rng = np.random.default_rng(0)
    assert all(is_safe_lane_change(NeighborState(None, None), rng) for _ in range(200))


def test_acceptance_frequency_matches_closed_form():
    rng = np.random.default_rng(2024)
    n = 100_000
    hits = sum(is_safe_lane_change(NeighborState(6.0, 6.0), rng) for _ in range(n))
    expected = norm.cdf((math.log(6) - 1.353) / 1.112) * norm.cdf((math.log(6) - 1.429) / 0.742)
    assert abs(hits / n - expected) <= 0.01
    assert acceptance_probability(6.0, 6.0) == pytest.approx(expected)


def test_noise_constants():
    assert LEAD_NOISE_SD == 1.112
    assert LAG_NOISE_SD == 0.742


@settings(max_examples=200)
@given(dv=st.floats(-30, 30), eps=st.floats(-4, 4))
def test_critical_gaps_positive(dv, eps):
    assert toledo_lead_critical_gap(dv, eps) > 0
    assert toledo_lag_critical_gap(dv, eps) > 0


@settings(max_examples=200)
@given(a=st.floats(-20, 20), b=st.floats(-20, 20))
def test_critical_gap_monotone_in_relative_speed(a, b):
    lo, hi = min(a, b), max(a, b)
    assert toledo_lead_critical_gap(hi) <= toledo_lead_critical_gap(lo)
    assert toledo_lag_critical_gap(hi) >= toledo_lag_critical_gap(lo)


class _ZeroNoise:
    def normal(self, loc, scale):
        return 0.0


@settings(max_examples=200)
@given(lead=st.floats(-5, 50), lag=st.floats(-5, 50), extra=st.floats(0, 20), dv=st.floats(-5, 5))
def test_decision_monotone_in_gaps_without_noise(lead, lag, extra, dv):
    small = is_safe_lane_change(NeighborState(lead, lag, dv, dv), _ZeroNoise())
    large = is_safe_lane_change(NeighborState(lead + extra, lag + extra, dv, dv), _ZeroNoise())
    assert large or not small
