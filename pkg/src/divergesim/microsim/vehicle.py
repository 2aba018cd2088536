from __future__ import annotations

from dataclasses import dataclass, replace

from divergesim.microsim.params import Route, VehicleClass


@dataclass(frozen=True)
class Vehicle:
    """Snapshot of one simulated vehicle.

    ``lc_target`` is 0 unless a lane change is being executed; ``lc_elapsed``
    counts seconds into that change.
    """

    id: int
    cls: VehicleClass
    lane: int
    position: float
    speed: float
    desired_speed: float
    length: float
    route: Route
    entry_time: float = 0.0
    advised: bool = False
    lc_target: int = 0
    lc_elapsed: float = 0.0
    max_accel: float = 1.5

    @property
    def lc_state(self) -> str:
        if self.lc_target:
            return "executing"
        return "advised" if self.advised else "none"

    @property
    def rear(self) -> float:
        return self.position - self.length


def execute_lane_change(vehicle: Vehicle, target_lane: int, dt: float, duration: float = 3.0) -> Vehicle:
    """Advance a lane change by one step; the vehicle lands in ``target_lane`` once
    ``duration`` seconds have elapsed."""
    if not vehicle.lc_target:
        raise ValueError("vehicle is not executing a lane change")
    elapsed = vehicle.lc_elapsed + dt
    if elapsed >= duration - 1e-9:
        return replace(vehicle, lane=target_lane, lc_target=0, lc_elapsed=0.0, advised=vehicle.advised and target_lane <= vehicle.lane)
    return replace(vehicle, lc_elapsed=elapsed)
