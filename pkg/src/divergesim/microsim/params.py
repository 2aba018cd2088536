from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from divergesim.advisor import AdvisoryConfig


class VehicleClass(enum.IntEnum):
    CAR = 0
    SMART_CAR = 1
    HGV = 2


class Route(enum.IntEnum):
    MAINLINE = 0
    OFF_RAMP = 1


class Cause(enum.IntEnum):
    ADVISED = 0
    MANDATORY = 1
    DISCRETIONARY = 2


class SimulationIntegrityError(RuntimeError):
    """Raised when the simulation state becomes physically impossible."""


@dataclass(frozen=True)
class RoadLayout:
    """Straight mainline with a deceleration lane on the right leading to an off-ramp.

    Lanes are numbered from 1 (leftmost). The deceleration lane is lane
    ``lane_count + 1`` and continues as the off-ramp past its end; travel times
    on both routes are measured from 0 to ``offramp_travel_length``.
    """

    length: float = 7417.0
    lane_count: int = 4
    decel_lane_start: float = 6444.0
    decel_lane_length: float = 157.0
    offramp_travel_length: float = 6904.0
    detector_positions: tuple[float, ...] = (500.0, 1500.0, 2500.0, 3500.0, 4500.0, 5500.0, 6522.5)
    segment_length: float = 1000.0

    def __post_init__(self):
        if self.decel_lane_start + self.decel_lane_length > self.length:
            raise ValueError("deceleration lane runs past the end of the segment")
        det = np.asarray(self.detector_positions)
        if np.any(np.diff(det) <= 0) or det.min() < 0 or det.max() > self.length:
            raise ValueError("detector positions must be strictly increasing and on the segment")
        if self.offramp_travel_length > self.length or self.offramp_travel_length < self.decel_end:
            raise ValueError("travel-time end must lie between the deceleration lane end and the segment end")

    @property
    def decel_end(self) -> float:
        return self.decel_lane_start + self.decel_lane_length

    @property
    def decel_lane(self) -> int:
        return self.lane_count + 1

    def detector_lanes(self, index: int) -> int:
        """Number of lanes covered by detector station ``index``."""
        x = self.detector_positions[index]
        return self.lane_count + 1 if self.decel_lane_start <= x <= self.offramp_travel_length else self.lane_count

    def segment_of(self, position):
        """Index of the detector station whose data describe ``position``."""
        seg = np.floor_divide(position, self.segment_length).astype(int)
        return np.clip(seg, 0, len(self.detector_positions) - 1)


@dataclass(frozen=True)
class CarFollowingParams:
    """Following-law parameters; names follow the freeway behaviour table.

    Deceleration magnitudes are positive. ``following_variation`` is kept for
    completeness and not used by the following law.
    """

    standstill_distance: float = 1.5
    headway_time: float = 0.9
    following_variation: float = 4.0
    max_decel_own: float = 4.0
    max_decel_trailing: float = 3.0
    accepted_decel_own: float = 1.0
    accepted_decel_trailing: float = 0.5
    safety_reduction_factor: float = 0.6
    coop_braking_decel: float = 3.0
    max_accel: float = 1.5
    max_accel_hgv: float = 1.0

    def __post_init__(self):
        if self.standstill_distance <= 0 or self.headway_time <= 0:
            raise ValueError("standstill distance and headway time must be positive")
        decels = (self.max_decel_own, self.max_decel_trailing, self.accepted_decel_own, self.accepted_decel_trailing, self.coop_braking_decel)
        if min(decels) <= 0:
            raise ValueError("deceleration magnitudes must be positive")


@dataclass(frozen=True)
class LaneChangeParams:
    lane_change_distance: float = 1600.0
    duration: float = 3.0
    gipps_delta: float = 1.6
    gipps_s0: float = 1.0
    discretionary_gain: float = 2.0
    discretionary_cooldown: float = 10.0
    discretionary_lookahead: float = 150.0
    max_dwell: float = 60.0
    dwell_zone: float = 20.0
    discretionary_period: float = 0.5


@dataclass(frozen=True)
class VehicleSpec:
    length: float
    desired_speed_kmh: tuple[float, float]


DEFAULT_SPECS = {
    VehicleClass.CAR: VehicleSpec(4.5, (112.0, 128.0)),
    VehicleClass.SMART_CAR: VehicleSpec(4.5, (112.0, 128.0)),
    VehicleClass.HGV: VehicleSpec(12.0, (95.0, 105.0)),
}


@dataclass
class SimConfig:
    """Everything one seeded simulation run needs.

    ``mode`` is ``"baseline"`` (internal behaviour only) or ``"advised"`` (smart
    cars follow the advance warning system with ``advisory.p_l``).
    ``param_mode`` chooses where the advisor's lane statistics come from:
    ``"offline"`` uses externally supplied (baseline-derived) estimates,
    ``"rolling"`` re-estimates from the run's own detectors.
    """

    flow: float = 6400.0
    smart_share: float = 0.02
    hgv_share: float = 0.02
    mode: str = "baseline"
    seed: int = 32
    dt: float = 0.1
    horizon: float = 3600.0
    layout: RoadLayout = field(default_factory=RoadLayout)
    car_following: CarFollowingParams = field(default_factory=CarFollowingParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)
    advisory: AdvisoryConfig = field(default_factory=AdvisoryConfig)
    specs: dict = field(default_factory=lambda: dict(DEFAULT_SPECS))
    param_mode: str = "offline"
    rolling_window: float = 300.0
    rolling_refresh: float = 60.0
    record_probabilities: bool = False
    check_integrity: bool = True

    def __post_init__(self):
        if self.mode not in ("baseline", "advised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.param_mode not in ("offline", "rolling"):
            raise ValueError(f"unknown param_mode {self.param_mode!r}")
        if not (0 <= self.smart_share and 0 <= self.hgv_share and self.smart_share + self.hgv_share <= 1):
            raise ValueError("class shares must be non-negative and sum to at most 1")
        if self.flow < 0 or self.dt <= 0 or self.horizon <= 0:
            raise ValueError("flow, dt and horizon must be non-negative/positive")

    @property
    def composition(self) -> dict[VehicleClass, float]:
        return {
            VehicleClass.CAR: 1.0 - self.smart_share - self.hgv_share,
            VehicleClass.SMART_CAR: self.smart_share,
            VehicleClass.HGV: self.hgv_share,
        }
