"""Log-normal headway-distance distribution (front bumper to front bumper)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class LogNormalHeadway:
    """Headway distance distribution; ``mu`` is in log-meters, ``sigma`` is dimensionless.

    ``sigma == 0`` is the degenerate case where every headway equals ``exp(mu)``.
    """

    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma >= 0.0) or not math.isfinite(self.mu):
            raise ValueError(f"invalid log-normal parameters mu={self.mu}, sigma={self.sigma}")

    @property
    def median(self) -> float:
        return math.exp(self.mu)

    @property
    def mean(self) -> float:
        return mean_headway(self)


def fit_lognormal(samples) -> LogNormalHeadway:
    """Maximum-likelihood fit on the logs (population standard deviation)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientDataError(f"need at least 2 headway samples, got {x.size}")
    if np.any(~(x > 0)):
        raise ValueError("headway samples must be strictly positive")
    logs = np.log(x)
    mu = float(logs.mean())
    sigma = float(np.sqrt(np.mean((logs - mu) ** 2)))
    return LogNormalHeadway(mu, sigma)


def sample_headways(dist: LogNormalHeadway, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    if dist.sigma == 0.0:
        return np.full(count, math.exp(dist.mu))
    return rng.lognormal(dist.mu, dist.sigma, size=count)


def mean_headway(dist: LogNormalHeadway) -> float:
    return math.exp(dist.mu + 0.5 * dist.sigma**2)
