"""Detector records and lane statistics derived from them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from divergesim.headway import LogNormalHeadway, fit_lognormal

logger = logging.getLogger(__name__)

DEFAULT_LANE_STATE = (30.0, LogNormalHeadway(math.log(50.0), 0.6))


@dataclass(frozen=True)
class DetectorRecord:
    detector_index: int
    lane: int
    time: float
    speed: float


class DetectorLog:
    """Column store for detector passages (appended every step)."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._cache: np.ndarray | None = None

    def append(self, detector, lane, time, speed) -> None:
        if len(detector):
            self._chunks.append(np.column_stack([detector, lane, time, speed]).astype(float))
            self._cache = None

    @property
    def array(self) -> np.ndarray:
        """``(n, 4)`` array of (detector, lane, time, speed)."""
        if self._cache is None:
            self._cache = np.concatenate(self._chunks) if self._chunks else np.empty((0, 4))
            self._chunks = [self._cache] if len(self._cache) else []
        return self._cache

    def records(self) -> list[DetectorRecord]:
        return [DetectorRecord(int(d), int(l), float(t), float(s)) for d, l, t, s in self.array]

    def __len__(self) -> int:
        return len(self.array)


def lane_samples(records, lane: int, window: tuple[float, float] | None = None, detector: int | None = None):
    """Recorded speeds and headway distances for one lane.

    Headway distances are the time gaps between consecutive passages times the
    follower's speed; non-positive values (simultaneous passages or stopped
    followers) are dropped.
    """
    arr = _as_array(records)
    mask = arr[:, 1] == lane
    if detector is not None:
        mask &= arr[:, 0] == detector
    if window is not None:
        mask &= (arr[:, 2] >= window[0]) & (arr[:, 2] <= window[1])
    sel = arr[mask]
    sel = sel[np.argsort(sel[:, 2], kind="stable")]
    spacing = np.diff(sel[:, 2]) * sel[1:, 3]
    return sel[:, 3], spacing[spacing > 0]


def estimate_lane_params(records, lane: int, window: tuple[float, float] | None = None, detector: int | None = None):
    """Mean speed and headway-distance distribution for one lane.

    Returns ``None`` when fewer than two passages (or fewer than two usable
    headways) fall in the window; callers own the fallback. ``records`` is a
    sequence of :class:`DetectorRecord` or the ``(n, 4)`` array from
    :class:`DetectorLog`.
    """
    speeds, spacing = lane_samples(records, lane, window, detector)
    if len(speeds) < 2 or len(spacing) < 2:
        return None
    return float(speeds.mean()), fit_lognormal(spacing)


def _as_array(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return records.reshape(-1, 4)
    if isinstance(records, DetectorLog):
        return records.array
    return np.array([[r.detector_index, r.lane, r.time, r.speed] for r in records], dtype=float).reshape(-1, 4)


@dataclass
class SegmentParams:
    """Lane statistics per (detector station, lane) with fallback to the last
    valid estimate and then to a configured default."""

    values: dict[tuple[int, int], tuple[float, LogNormalHeadway]] = field(default_factory=dict)
    default: tuple[float, LogNormalHeadway] = DEFAULT_LANE_STATE
    fallbacks: int = 0

    @classmethod
    def from_records(cls, records, stations: int, lanes: int, window=None, previous: "SegmentParams | None" = None):
        arr = _as_array(records)
        out = cls(default=previous.default if previous else DEFAULT_LANE_STATE)
        for det in range(stations):
            sub = arr[arr[:, 0] == det]
            for lane in range(1, lanes + 1):
                est = estimate_lane_params(sub, lane, window)
                if est is not None and est[0] > 0:
                    out.values[(det, lane)] = est
                elif previous is not None and (det, lane) in previous.values:
                    out.values[(det, lane)] = previous.values[(det, lane)]
        return out

    @classmethod
    def pooled(cls, runs, stations: int, lanes: int) -> "SegmentParams":
        """Estimates from several independent runs, pooling samples per (station, lane).

        Samples are collected run by run so that passages from different runs are
        never paired into a headway.
        """
        out = cls()
        arrays = [_as_array(r) for r in runs]
        for det in range(stations):
            for lane in range(1, lanes + 1):
                parts = [lane_samples(arr[arr[:, 0] == det], lane) for arr in arrays]
                speeds = np.concatenate([p[0] for p in parts])
                spacing = np.concatenate([p[1] for p in parts])
                if len(speeds) >= 2 and len(spacing) >= 2 and speeds.mean() > 0:
                    out.values[(det, lane)] = (float(speeds.mean()), fit_lognormal(spacing))
        return out

    def lane_state(self, segment: int, lane: int) -> tuple[float, LogNormalHeadway]:
        try:
            return self.values[(segment, lane)]
        except KeyError:
            self.fallbacks += 1
            logger.debug("no estimate for station %d lane %d, using defaults", segment, lane)
            return self.default

    def to_rows(self) -> list[dict]:
        return [
            {"detector": det, "lane": lane, "v": v, "mu": hw.mu, "sigma": hw.sigma}
            for (det, lane), (v, hw) in sorted(self.values.items())
        ]

    @classmethod
    def from_rows(cls, rows) -> "SegmentParams":
        out = cls()
        for r in rows:
            out.values[(int(r["detector"]), int(r["lane"]))] = (float(r["v"]), LogNormalHeadway(float(r["mu"]), float(r["sigma"])))
        return out
