"""Scenario configuration files (YAML).

A file may describe one scenario or a sweep; ``q_i``, ``r`` and ``p_l`` accept
a scalar or a list, and ``p_l`` entries may be the string ``baseline``::

    q_i: [6400, 9600]
    r: [2, 6, 10]
    p_l: [baseline, 0.99, 0.8]
    seeds: [32, 37, 42]
    horizon: 3600
    dt: 0.1
    road:
      length: 7417
      lane_count: 4
      decel_lane_start: 6444
      decel_lane_length: 157
      offramp_travel_length: 6904
      detector_positions: [500, 1500, 2500, 3500, 4500, 5500, 6522.5]
    car_following: {standstill_distance: 1.5, headway_time: 0.9}
    desired_speeds_kmh: {car: [112, 128], smart_car: [112, 128], hgv: [95, 105]}
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

import yaml

from divergesim.advisor import AdvisoryConfig
from divergesim.experiment import DEFAULT_SEEDS, ConfigError, ScenarioConfig
from divergesim.microsim.params import DEFAULT_SPECS, CarFollowingParams, LaneChangeParams, RoadLayout, VehicleClass

_TOP_LEVEL = {"q_i", "r", "p_l", "seeds", "horizon", "dt", "hgv_percent", "param_mode", "warmup", "road", "car_following", "lane_change", "advisory", "desired_speeds_kmh", "vehicle_lengths"}


def _block(cls, values: dict | None, name: str):
    if not values:
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    if "detector_positions" in values:
        values = {**values, "detector_positions": tuple(float(x) for x in values["detector_positions"])}
    return cls(**values)


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _threshold(value):
    if value is None or (isinstance(value, str) and value.lower() == "baseline"):
        return None
    return float(value)


def scenarios_from_dict(data: dict) -> list[ScenarioConfig]:
    unknown = set(data) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    specs = dict(DEFAULT_SPECS)
    for name, (lo, hi) in (data.get("desired_speeds_kmh") or {}).items():
        cls = VehicleClass[name.upper()]
        specs[cls] = replace(specs[cls], desired_speed_kmh=(float(lo), float(hi)))
    for name, length in (data.get("vehicle_lengths") or {}).items():
        cls = VehicleClass[name.upper()]
        specs[cls] = replace(specs[cls], length=float(length))
    common = dict(
        seeds=tuple(int(s) for s in _as_list(data.get("seeds", list(DEFAULT_SEEDS)))),
        horizon=float(data.get("horizon", 3600.0)),
        dt=float(data.get("dt", 0.1)),
        hgv_percent=float(data.get("hgv_percent", 2.0)),
        param_mode=str(data.get("param_mode", "offline")),
        warmup=float(data.get("warmup", 0.0)),
        layout=_block(RoadLayout, data.get("road"), "road"),
        car_following=_block(CarFollowingParams, data.get("car_following"), "car_following"),
        lane_change=_block(LaneChangeParams, data.get("lane_change"), "lane_change"),
        advisory=_block(AdvisoryConfig, data.get("advisory"), "advisory"),
        specs=tuple(specs.items()),
    )
    return [
        ScenarioConfig(q_i=float(q), r=float(r), p_l=_threshold(pl), **common)
        for q in _as_list(data.get("q_i", 9600.0))
        for r in _as_list(data.get("r", 10.0))
        for pl in _as_list(data.get("p_l", "baseline"))
    ]


def load_scenarios(path) -> list[ScenarioConfig]:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return scenarios_from_dict(data)
