"""Probability of reaching a goal position through one or more lane changes.

The single-change case comes from a Monte Carlo lookup table over normalized
coordinates; multi-change queries are composed recursively with a
Riemann-Stieltjes sum over the distance at which the previous change completes.

Normalized coordinates (``m`` is the median headway ``exp(mu)`` of the target lane,
``dv`` the target-lane speed minus the ego speed):

* ``D = |dv| * d / v1 / m``  -- stream length swept past the ego before the goal
* ``G = g / m``              -- critical gap
* ``sigma``                  -- log-scale spread of the headways
* ``T = t * |dv| / m``       -- stream length swept during one lane change
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from divergesim.headway import LogNormalHeadway

logger = logging.getLogger(__name__)

TABLE_FORMAT_VERSION = 2
PROBABILITY_DECIMALS = 12

# Gaps close to the median headway and small sigmas are where the probability
# moves fastest, so both axes are refined there. Lookups only ever read the
# zero-duration slice (see BaseCaseTable.probability), so one more duration node
# is enough to keep the axis well formed.
DEFAULT_AXES = (
    tuple(np.concatenate([np.arange(0.0, 8.0, 0.25), np.arange(8.0, 16.0, 0.5), np.arange(16.0, 32.0, 1.0), np.arange(32.0, 64.1, 2.0)])),
    tuple(np.round(np.concatenate([np.arange(0.1, 0.6, 0.05), np.arange(0.6, 1.6, 0.01), np.arange(1.6, 2.001, 0.02)]), 2)),
    tuple(np.round(0.1 * 1.05 ** np.arange(50), 6)),
    (0.0, 1.0),
)
AXIS_NAMES = ("distance", "gap", "sigma", "duration")

DEFAULT_TABLE_PATH = Path(__file__).parent / "data" / "base_table.npz"


class TableConfigError(ValueError):
    pass


class TableLoadError(ValueError):
    pass


@dataclass(frozen=True)
class LaneParams:
    """Traffic state of one target lane: mean speed ``v`` (m/s), headway distribution,
    critical gap ``g`` (m) and lane-change duration ``t`` (s)."""

    v: float
    headway: LogNormalHeadway
    g: float
    t: float

    def __post_init__(self):
        if not (self.v > 0 and self.g > 0 and self.t > 0):
            raise ValueError(f"LaneParams requires v, g, t > 0 (got v={self.v}, g={self.g}, t={self.t})")


@dataclass(frozen=True)
class GoalQuery:
    """Reach a point ``d`` meters ahead, ``len(lanes)`` lanes to the right.

    ``v1`` is the ego speed; ``lanes`` holds the parameters of lanes 2..n in the
    order they are entered.
    """

    d: float
    v1: float
    lanes: tuple[LaneParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        if self.d < 0 or not self.v1 > 0 or len(self.lanes) == 0:
            raise ValueError("GoalQuery requires d >= 0, v1 > 0 and at least one lane")


@dataclass
class BaseCaseTable:
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    trials_per_cell: int
    seed: int = 0
    correction: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        _check_axes(self.axes)
        shape = tuple(len(a) for a in self.axes)
        if self.values.shape != shape:
            raise TableConfigError(f"value array shape {self.values.shape} does not match axes {shape}")

    def check_invariants(self, atol: float = 1e-12) -> None:
        v = self.values
        if np.any(v < 0) or np.any(v > 1) or np.any(~np.isfinite(v)):
            raise TableLoadError("table values outside [0, 1]")
        if np.any(np.diff(v, axis=0) < -atol):
            raise TableLoadError("table values decrease along the distance axis")
        if np.any(np.diff(v, axis=1) > atol):
            raise TableLoadError("table values increase along the gap axis")

    def node_value(self, i: int, j: int, k: int, l: int) -> float:
        return float(self.values[i, j, k, l])

    def interpolate(self, D, G, S, T) -> np.ndarray:
        """Multilinear interpolation; coordinates outside the grid are clamped."""
        D, G, S, T = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (D, G, S, T)))
        shape = D.shape
        coords = [c.ravel() for c in (D, G, S, T)]
        lo_idx = []
        frac = []
        for ax, c in zip(self.axes, coords):
            c = np.clip(c, ax[0], ax[-1])
            i = np.clip(np.searchsorted(ax, c, side="right") - 1, 0, len(ax) - 2)
            lo_idx.append(i)
            frac.append((c - ax[i]) / (ax[i + 1] - ax[i]))
        out = np.zeros(coords[0].shape)
        vals = self.values
        for corner in range(16):
            bits = [(corner >> b) & 1 for b in range(4)]
            w = np.ones_like(out)
            for b, f in zip(bits, frac):
                w = w * (f if b else 1.0 - f)
            out += w * vals[lo_idx[0] + bits[0], lo_idx[1] + bits[1], lo_idx[2] + bits[2], lo_idx[3] + bits[3]]
        # rounding is order preserving and strips summation noise that would
        # otherwise break monotonicity at the 1e-16 level
        return np.clip(np.round(out, PROBABILITY_DECIMALS), 0.0, 1.0).reshape(shape)

    def probability(self, D, G, S, T) -> np.ndarray:
        """Success probability at normalized coordinates.

        A change that takes ``T`` of swept stream length succeeds iff the gap is
        accepted within ``D - T``, so the lookup runs on the zero-duration slice at
        the shifted distance; the result is exactly zero when ``D < T``.
        """
        D, G, S, T = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (D, G, S, T)))
        margin = D - T
        p = self.interpolate(np.maximum(margin, 0.0), G, S, 0.0)
        return np.where(margin >= 0.0, p, 0.0)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh,
                version=np.int64(TABLE_FORMAT_VERSION),
                distance=self.axes[0],
                gap=self.axes[1],
                sigma=self.axes[2],
                duration=self.axes[3],
                trials_per_cell=np.int64(self.trials_per_cell),
                seed=np.int64(self.seed),
                values=np.ascontiguousarray(self.values),
            )

    @classmethod
    def load(cls, path) -> "BaseCaseTable":
        try:
            with np.load(Path(path)) as z:
                version = int(z["version"])
                if version != TABLE_FORMAT_VERSION:
                    raise TableLoadError(f"unsupported table format version {version}")
                table = cls(
                    axes=tuple(z[name] for name in AXIS_NAMES),
                    values=z["values"],
                    trials_per_cell=int(z["trials_per_cell"]),
                    seed=int(z["seed"]),
                )
        except (KeyError, OSError, TableConfigError) as exc:
            raise TableLoadError(f"cannot load base table from {path}: {exc}") from exc
        table.check_invariants()
        return table


def _check_axes(axes) -> None:
    if len(axes) != 4:
        raise TableConfigError("the base table needs exactly four axes")
    for name, ax in zip(AXIS_NAMES, axes):
        if ax.ndim != 1 or len(ax) < 2:
            raise TableConfigError(f"{name} axis needs at least 2 grid points")
        if np.any(np.diff(ax) <= 0):
            raise TableConfigError(f"{name} axis must be strictly increasing")


_default_table: BaseCaseTable | None = None


def default_table() -> BaseCaseTable:
    """The packaged table built with the default grids (cached)."""
    global _default_table
    if _default_table is None:
        _default_table = BaseCaseTable.load(DEFAULT_TABLE_PATH)
    return _default_table


# --------------------------------------------------------------------------
# Monte Carlo base case


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + c)`` over paired starts and counts."""
    ends = np.cumsum(counts)
    return np.repeat(starts - ends + counts, counts) + np.arange(ends[-1] if counts.size else 0)


def acceptance_offsets(
    sigma: float,
    gaps: np.ndarray,
    step: float,
    horizon: float,
    trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Swept stream length at which each trial first sits inside an acceptable gap.

    Everything is in units of the median headway. The ego starts inside a
    length-biased headway at a uniform phase and sweeps through the stream; it is
    observed every ``step`` of swept length (``step == 0`` means continuous
    observation). Returns an array of shape ``(len(gaps), trials)`` holding the
    acceptance offset per critical gap, or ``inf`` when nothing acceptable turns
    up before ``horizon``. ``gaps`` must be sorted ascending.
    """
    gaps = np.asarray(gaps, dtype=float)
    n_gaps = gaps.size
    # length-biased log-normal is log-normal with its location shifted by sigma^2
    first = rng.lognormal(sigma**2, sigma, trials) if sigma > 0 else np.ones(trials)
    phase = rng.random(trials)
    # gaps[:level] are already accepted; a headway h serves every gap <= h, so
    # each trial only needs the records of its running maximum
    level = np.searchsorted(gaps, first, side="right")
    rows = [np.repeat(np.arange(trials), level)]
    cols = [_ranges(np.zeros(trials, dtype=np.int64), level)]
    vals = [np.zeros(rows[0].size)]

    start = phase * first  # leading edge of the next headway
    idx = np.flatnonzero((level < n_gaps) & (start < horizon))
    start = start[idx]
    lvl = level[idx]
    while idx.size:
        h = rng.lognormal(0.0, sigma, idx.size) if sigma > 0 else np.ones(idx.size)
        if step > 0:
            seen = (np.floor(start / step) + 1.0) * step
            inside = seen < start + h
        else:
            seen = start
            inside = np.ones(idx.size, dtype=bool)
        new = np.where(inside, np.searchsorted(gaps, h, side="right"), 0)
        up = np.flatnonzero(new > lvl)
        if up.size:
            count = new[up] - lvl[up]
            rows.append(np.repeat(idx[up], count))
            cols.append(_ranges(lvl[up], count))
            vals.append(np.repeat(seen[up], count))
            lvl[up] = new[up]
        start = start + h
        keep = (lvl < n_gaps) & (start < horizon)
        idx, start, lvl = idx[keep], start[keep], lvl[keep]
    out = np.full((n_gaps, trials), np.inf)
    out[np.concatenate(cols), np.concatenate(rows)] = np.concatenate(vals)
    return out


def observation_step(dv, mu, sigma):
    """Time step of the raw base case (seconds); vectorised over its inputs."""
    mean = np.exp(np.asarray(mu, dtype=float) + 0.5 * np.asarray(sigma, dtype=float) ** 2)
    return np.minimum(0.1, 0.05 * mean / np.maximum(np.abs(dv), 0.1))


def base_case_step(lane: LaneParams, v1: float) -> float:
    """Simulation time step for the raw base case (seconds)."""
    return float(observation_step(lane.v - v1, lane.headway.mu, lane.headway.sigma))


def _completion_distances(remaining: np.ndarray, v1: float, lane: LaneParams, rng: np.random.Generator) -> np.ndarray:
    """Distance travelled (at ``v1``) until one lane change completes, per trial.

    ``remaining`` holds each trial's distance budget; trials that cannot finish
    within it get ``inf``.
    """
    remaining = np.asarray(remaining, dtype=float)
    completion = np.full(remaining.shape, np.inf)
    live = remaining > 0
    if not live.any():
        return completion
    m = math.exp(lane.headway.mu)
    budget = remaining[live] / v1
    dv = abs(lane.v - v1)
    if dv == 0.0:
        offs = acceptance_offsets(lane.headway.sigma, [lane.g / m], 0.0, 0.0, budget.size, rng)[0]
        accept_time = np.where(offs == 0.0, 0.0, np.inf)
    else:
        dt = base_case_step(lane, v1)
        swept = dv * budget.max() / m
        offs = acceptance_offsets(lane.headway.sigma, [lane.g / m], dt * dv / m, swept, budget.size, rng)[0]
        accept_time = offs * m / dv
    ok = accept_time + lane.t <= budget * (1 + 1e-12)
    done = np.full(budget.shape, np.inf)
    done[ok] = v1 * (accept_time[ok] + lane.t)
    completion[live] = done
    return completion


def simulate_base_case(d: float, v1: float, lane: LaneParams, trials: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of completing one lane change within ``d`` meters."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    completion = _completion_distances(np.full(trials, float(d)), v1, lane, rng)
    return float(np.mean(np.isfinite(completion)))


def simulate_chain(d: float, v1: float, lanes: Sequence[LaneParams], trials: int, rng: np.random.Generator) -> float:
    """Direct Monte Carlo over successive lane changes with independent lane streams.

    Each trial runs the single-change event model lane by lane, starting the next
    change where the previous one completed and at the previous lane's speed.
    """
    remaining = np.full(trials, float(d))
    speed = v1
    for lane in lanes:
        remaining = remaining - _completion_distances(remaining, speed, lane, rng)
        speed = lane.v
    return float(np.mean(np.isfinite(remaining)))


def _isotonic(values: np.ndarray, axis: int, increasing: bool) -> np.ndarray:
    moved = np.moveaxis(values, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    fixed = np.empty_like(flat)
    for row in range(flat.shape[0]):
        fixed[row] = isotonic_regression(flat[row], increasing=increasing).x
    return np.moveaxis(fixed.reshape(moved.shape), -1, axis)


def shift_durations(values: np.ndarray, axes) -> np.ndarray:
    """Rewrite every duration slice from the zero-duration one.

    A change taking ``T`` succeeds within ``D`` iff a gap is accepted within
    ``D - T``; storing exactly that keeps grid nodes equal to what queries read.
    """
    dist_ax, _, _, dur_ax = axes
    if dur_ax[0] != 0.0:
        return values
    out = values.copy()
    base = values[..., 0]
    for l, T in enumerate(dur_ax[1:], start=1):
        margin = dist_ax - T
        for j in range(values.shape[1]):
            for k in range(values.shape[2]):
                out[:, j, k, l] = np.where(margin >= 0.0, np.interp(np.maximum(margin, 0.0), dist_ax, base[:, j, k]), 0.0)
    return out


def build_base_table(
    axes=DEFAULT_AXES,
    trials_per_cell: int = 1_000_000,
    seed: int = 20240,
    progress=None,
    chunk: int = 100_000,
) -> BaseCaseTable:
    """Estimate the single-change success probability on a normalized grid.

    Trials for one sigma slice share their headway sequences across the distance,
    gap and duration axes (every cell still sees ``trials_per_cell`` trials); each
    slice draws from its own stream derived from ``(seed, slice index)`` so the
    result does not depend on evaluation order. Trials are simulated ``chunk`` at
    a time to bound memory.
    """
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    _check_axes(axes)
    if trials_per_cell < 1:
        raise TableConfigError("trials_per_cell must be >= 1")
    dist_ax, gap_ax, sig_ax, dur_ax = axes
    margin = (dist_ax[:, None] - dur_ax[None, :]).ravel() * (1 + 1e-12)
    values = np.empty(tuple(len(a) for a in axes))
    for k, sigma in enumerate(sig_ax):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        counts = np.zeros((len(gap_ax), margin.size), dtype=np.int64)
        done = 0
        while done < trials_per_cell:
            n = min(chunk, trials_per_cell - done)
            # continuous observation; lookups add the event model's sampling lag
            offs = acceptance_offsets(sigma, gap_ax, 0.0, dist_ax[-1], n, rng)
            offs.sort(axis=1)
            for j in range(len(gap_ax)):
                counts[j] += np.searchsorted(offs[j], margin, side="right")
            done += n
        values[:, :, k, :] = np.moveaxis((counts / trials_per_cell).reshape(len(gap_ax), len(dist_ax), len(dur_ax)), 0, 1)
        if progress is not None:
            progress(k + 1, len(sig_ax))
    raw = values.copy()
    values = _isotonic(values, axis=0, increasing=True)
    values = _isotonic(values, axis=1, increasing=False)
    values = np.clip(values, 0.0, 1.0)
    values = np.round(shift_durations(values, axes), PROBABILITY_DECIMALS)
    correction = float(np.max(np.abs(values - raw)))
    logger.info("base table isotonic correction: max |delta| = %.3g", correction)
    return BaseCaseTable(axes=axes, values=values, trials_per_cell=trials_per_cell, seed=seed, correction=correction)


# --------------------------------------------------------------------------
# Queries


def clamp_adjacent_speed(v_prev: float, v_next: float, v_l: float) -> float:
    """Push a neighbouring lane speed out of the closed band ``v_prev +- v_l``."""
    if v_l <= 0:
        raise ValueError("v_l must be positive")
    if abs(v_next - v_prev) <= v_l:
        return v_prev + v_l
    return v_next


def _f2_arrays(table, d, v1, v, mu, sigma, g, t):
    d, v1, v, mu, sigma, g, t = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (d, v1, v, mu, sigma, g, t))
    )
    m = np.exp(mu)
    adv = np.abs(v - v1)
    frozen = adv == 0.0
    D = np.where(frozen, 0.0, adv * d / v1 / m)
    T = np.where(frozen, 0.0, (t + 0.5 * observation_step(adv, mu, sigma)) * adv / m)
    p = table.probability(D, g / m, sigma, T)
    p = np.where(frozen & (d / v1 < t), 0.0, p)
    return np.where(d > 0, p, 0.0)


def f2(d: float, v1: float, lane: LaneParams, table: BaseCaseTable | None = None, v_l: float | None = None) -> float:
    """Single lane change success probability from the lookup table.

    If ``v_l`` is given the target-lane speed is first pushed out of ``v1 +- v_l``.
    """
    if d <= 0:
        return 0.0
    table = table or default_table()
    v = lane.v if v_l is None else clamp_adjacent_speed(v1, lane.v, v_l)
    hw = lane.headway
    return float(_f2_arrays(table, d, v1, v, hw.mu, hw.sigma, lane.g, lane.t))


def _lane_arrays(lanes_per_query: Sequence[Sequence[LaneParams]], level: int):
    ls = [q[level] for q in lanes_per_query]
    return (
        np.array([l.v for l in ls]),
        np.array([l.headway.mu for l in ls]),
        np.array([l.headway.sigma for l in ls]),
        np.array([l.g for l in ls]),
        np.array([l.t for l in ls]),
    )


def fn_batch(
    d: np.ndarray,
    v1: np.ndarray,
    lanes_per_query: Sequence[Sequence[LaneParams]],
    table: BaseCaseTable | None = None,
    M: int = 200,
) -> np.ndarray:
    """Vectorized :func:`fn` for queries sharing the same number of lane changes.

    Every level is evaluated on the same uniform grid of ``M + 1`` nodes over
    ``[0, d]``; on that grid the recursion is a causal discrete convolution.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    table = table or default_table()
    d = np.asarray(d, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    n_changes = len(lanes_per_query[0])
    if any(len(q) != n_changes for q in lanes_per_query):
        raise ValueError("fn_batch needs queries with equal lane counts")
    if n_changes == 1:
        v, mu, sg, g, t = _lane_arrays(lanes_per_query, 0)
        return _f2_arrays(table, d, v1, v, mu, sg, g, t)

    h = d / M
    nodes = np.arange(M + 1)[None, :] * h[:, None]
    mids = (np.arange(1, M + 1)[None, :] - 0.5) * h[:, None]  # mids[:, i-1] = (i - 1/2) h
    v, mu, sg, g, t = _lane_arrays(lanes_per_query, 0)
    F = _f2_arrays(table, nodes, v1[:, None], v[:, None], mu[:, None], sg[:, None], g[:, None], t[:, None])
    v_prev = v
    # toeplitz index: node j, interval k -> kernel entry j - k - 1 (valid for k < j)
    j_idx = np.arange(M + 1)[:, None]
    k_idx = np.arange(M)[None, :]
    lag = j_idx - k_idx - 1
    causal = lag >= 0
    lag = np.where(causal, lag, 0)
    for level in range(1, n_changes):
        v, mu, sg, g, t = _lane_arrays(lanes_per_query, level)
        kernel = _f2_arrays(table, mids, v_prev[:, None], v[:, None], mu[:, None], sg[:, None], g[:, None], t[:, None])
        dF = np.diff(F, axis=1)
        if level == n_changes - 1:
            F_end = np.sum(kernel[:, ::-1] * dF, axis=1)
            return np.clip(np.round(np.where(d > 0, F_end, 0.0), PROBABILITY_DECIMALS), 0.0, 1.0)
        F = np.einsum("qjk,qk->qj", kernel[:, lag] * causal[None], dF)
        v_prev = v
    raise AssertionError("unreachable")


def fn(query: GoalQuery, table: BaseCaseTable | None = None, M: int = 200) -> float:
    """Probability of reaching the goal in ``query`` through ``len(query.lanes)`` changes."""
    if query.d <= 0:
        return 0.0
    return float(fn_batch(np.array([query.d]), np.array([query.v1]), [query.lanes], table, M)[0])


def goal_probabilities(queries: Sequence[GoalQuery], table: BaseCaseTable | None = None, M: int = 200) -> np.ndarray:
    """Evaluate many queries, grouping them by lane count."""
    out = np.zeros(len(queries))
    groups: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        groups.setdefault(len(q.lanes), []).append(i)
    for idx in groups.values():
        out[idx] = fn_batch(
            np.array([queries[i].d for i in idx]),
            np.array([queries[i].v1 for i in idx]),
            [queries[i].lanes for i in idx],
            table,
            M,
        )
    return out
