"""Microscopic traffic simulation of a diverge section."""

from divergesim.microsim.carfollow import car_following_accel, idm_accel
from divergesim.microsim.detectors import DetectorLog, DetectorRecord, SegmentParams, estimate_lane_params
from divergesim.microsim.params import (
    CarFollowingParams,
    Cause,
    LaneChangeParams,
    RoadLayout,
    Route,
    SimConfig,
    SimulationIntegrityError,
    VehicleClass,
    VehicleSpec,
)
from divergesim.microsim.simulation import RunOutput, Simulation, mandatory_gap_factor, spawn_arrivals
from divergesim.microsim.vehicle import Vehicle, execute_lane_change

__all__ = [
    "CarFollowingParams",
    "Cause",
    "DetectorLog",
    "DetectorRecord",
    "LaneChangeParams",
    "RoadLayout",
    "Route",
    "RunOutput",
    "SegmentParams",
    "SimConfig",
    "SimulationIntegrityError",
    "Simulation",
    "Vehicle",
    "VehicleClass",
    "VehicleSpec",
    "car_following_accel",
    "estimate_lane_params",
    "execute_lane_change",
    "idm_accel",
    "mandatory_gap_factor",
    "spawn_arrivals",
]
