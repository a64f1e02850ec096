"""Noise schedule for the zero-drift (variance exploding) diffusion.

The injection rate is ``g(t) = alpha**t``, which gives the closed form

    sigma(t)**2 = (alpha**(2 t) - 1) / (2 ln alpha)

and an explicit inverse, so the start time of a partial reverse run can be
found without root finding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ScheduleError",
    "HorizonError",
    "NoiseSchedule",
    "TimeGrid",
    "sigma_of_t",
    "t_of_sigma",
    "g_of_t",
    "make_grid",
    "grid_points",
    "SPACINGS",
]

SPACINGS = ("uniform-t", "geometric-sigma")


class ScheduleError(ValueError):
    """Raised for times or noise levels outside the schedule's domain."""


class HorizonError(ScheduleError):
    """Observation noisier than the schedule horizon sigma(T)."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Exponential injection-rate schedule ``g(t) = alpha**t`` on ``[0, t_max]``.

    Parameters
    ----------
    alpha : float
        Growth base of the injection rate, must exceed 1.
    t_max : float
        Time horizon ``T``.
    """

    alpha: float = 15.0
    t_max: float = 2.0
    sigma_max: float = field(init=False)

    def __post_init__(self):
        if not (self.alpha > 1.0 and math.isfinite(self.alpha)):
            raise ScheduleError(f"alpha must be > 1, got {self.alpha}")
        if not (self.t_max > 0.0 and math.isfinite(self.t_max)):
            raise ScheduleError(f"t_max must be positive, got {self.t_max}")
        object.__setattr__(self, "sigma_max", float(_sigma(self.alpha, self.t_max)))

    @property
    def log_alpha(self) -> float:
        return math.log(self.alpha)

    def sigma(self, t):
        return sigma_of_t(self, t)

    def t_of(self, sigma):
        return t_of_sigma(self, sigma)

    def g(self, t):
        return g_of_t(self, t)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(alpha=float(d.get("alpha", 15.0)), t_max=float(d.get("t_max", 2.0)))


def _sigma(alpha, t):
    la = math.log(alpha)
    # expm1 keeps precision near t = 0
    return np.sqrt(np.expm1(2.0 * la * np.asarray(t, dtype=np.float64)) / (2.0 * la))


def _check_time(sched: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    # tolerate round-off at the horizon
    tol = 1e-12 * sched.t_max
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > sched.t_max + tol):
        raise ScheduleError(f"time outside [0, {sched.t_max}]: {t}")
    return np.clip(t, 0.0, sched.t_max)


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def sigma_of_t(sched: NoiseSchedule, t):
    """Noise level ``sigma(t) = sqrt(int_0^t g(s)**2 ds)``."""
    t = _check_time(sched, t)
    return _scalar_or_array(_sigma(sched.alpha, t))


def g_of_t(sched: NoiseSchedule, t):
    """Injection rate ``alpha**t``."""
    t = _check_time(sched, t)
    return _scalar_or_array(np.power(sched.alpha, t))


def t_of_sigma(sched: NoiseSchedule, sigma):
    """Inverse of :func:`sigma_of_t`.

    Raises
    ------
    HorizonError
        If ``sigma`` exceeds ``sched.sigma_max``; the schedule must be
        lengthened (larger ``t_max``) to handle such observations.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s < 0.0):
        raise ScheduleError(f"noise level must be >= 0, got {sigma}")
    if np.any(s > sched.sigma_max * (1.0 + 1e-12)):
        raise HorizonError(
            f"observation noisier than schedule horizon: sigma={float(np.max(s)):.6g} "
            f"> sigma(T)={sched.sigma_max:.6g}; increase t_max"
        )
    la = sched.log_alpha
    t = np.log1p(2.0 * la * s * s) / (2.0 * la)
    return _scalar_or_array(np.minimum(t, sched.t_max))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing integration grid ending exactly at ``t = 0``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ScheduleError("grid needs at least two points")
        if p[-1] != 0.0:
            raise ScheduleError("grid must end at t = 0")
        if np.any(np.diff(p) >= 0.0):
            raise ScheduleError("grid must be strictly decreasing")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def steps(self) -> int:
        return self.points.size - 1

    @property
    def t_start(self) -> float:
        return float(self.points[0])

    def __len__(self):
        return self.points.size

    def __iter__(self):
        return iter(self.points)


def grid_points(
    sched: NoiseSchedule,
    t_start,
    steps: int,
    spacing: str = "geometric-sigma",
    sigma_floor: float = 1e-3,
) -> np.ndarray:
    """Grid times for one or many start times, shape ``(steps + 1, *shape(t_start))``.

    ``uniform-t`` spaces points evenly in time.  ``geometric-sigma`` places
    the first ``steps`` points so that their noise levels form a geometric
    sequence from ``sigma(t_start)`` down to ``sigma_floor``, then jumps to
    zero.  If ``sigma(t_start)`` is not well above the floor, the floor is
    lowered to ``sigma(t_start) / 100``.
    """
    if int(steps) != steps or steps < 1:
        raise ScheduleError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    t0 = np.asarray(t_start, dtype=np.float64)
    if np.any(~(t0 > 0.0)) or np.any(t0 > sched.t_max * (1.0 + 1e-12)):
        raise ScheduleError(f"t_start must lie in (0, {sched.t_max}], got {t_start}")
    t0 = np.minimum(t0, sched.t_max)
    frac = np.arange(steps + 1).reshape((-1,) + (1,) * t0.ndim)

    if spacing == "uniform-t":
        pts = t0 * (1.0 - frac / steps)
    elif spacing == "geometric-sigma":
        pts = np.empty((steps + 1,) + t0.shape)
        if steps > 1:
            s0 = _sigma(sched.alpha, t0)
            floor = np.minimum(float(sigma_floor), s0 / 100.0)
            u = frac[:steps] / (steps - 1)
            sig = np.exp((1.0 - u) * np.log(s0) + u * np.log(floor))
            pts[:steps] = t_of_sigma(sched, sig)
        pts[0] = t0
    else:
        raise ScheduleError(f"unknown spacing {spacing!r}; expected one of {SPACINGS}")
    pts[-1] = 0.0
    return pts


def make_grid(
    sched: NoiseSchedule,
    t_start: float,
    steps: int,
    spacing: str = "geometric-sigma",
    sigma_floor: float = 1e-3,
) -> TimeGrid:
    """Discretize ``[0, t_start]`` into ``steps`` descending intervals (see :func:`grid_points`)."""
    return TimeGrid(grid_points(sched, float(t_start), steps, spacing, sigma_floor))


def grid_from_times(times: Sequence[float]) -> TimeGrid:
    return TimeGrid(np.asarray(times, dtype=np.float64))
