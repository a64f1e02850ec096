"""Euler-Maruyama simulation of the reverse-time diffusion.

The reverse SDE for the zero-drift forward process is

    dx = -g(t)**2 * score(x, sigma(t)) dt + g(t) dw_bar

integrated backwards from ``t_start`` to 0.  Starting it at ``t = T`` from
``N(0, sigma(T)**2 I)`` gives an (approximate) prior draw; starting it at
``t_v`` with ``sigma(t_v) = sigma_v`` from an observed ``x + sigma_v n``
gives a draw from the posterior of ``x`` given that observation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .priors import ScorePrior
from .schedule import NoiseSchedule, ScheduleError, TimeGrid, grid_points, make_grid

__all__ = [
    "SolverConfig",
    "SdeRun",
    "DegenerateStepError",
    "em_step",
    "simulate_reverse",
    "sample_unconditional",
    "write_trace",
]


class DegenerateStepError(ScheduleError):
    """The score cannot be evaluated at zero noise."""


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 200
    spacing: str = "geometric-sigma"
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ScheduleError(f"steps must be >= 1, got {self.steps}")

    def grid(self, sched: NoiseSchedule, t_start: float) -> TimeGrid:
        return make_grid(sched, t_start, self.steps, self.spacing, self.sigma_floor)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "spacing": self.spacing, "sigma_floor": self.sigma_floor}


@dataclass
class SdeRun:
    """A reverse simulation; ``trace[i]`` is the state at time ``points[i]``."""

    start_state: np.ndarray
    points: np.ndarray
    final: np.ndarray
    trace: list[np.ndarray] = field(default_factory=list)

    @property
    def t_start(self):
        return self.points[0]


def em_step(prior: ScorePrior, sched: NoiseSchedule, x, t_i: float, t_next: float, eps) -> np.ndarray:
    """One Euler-Maruyama step from ``t_i`` down to ``t_next``.

    ``eps`` is the standard normal increment, supplied by the caller.  Drift
    and diffusion coefficients are evaluated at the left end ``t_i``.
    """
    h = float(t_i) - float(t_next)
    if h < 0.0 or t_next < 0.0:
        raise ScheduleError(f"need t_i >= t_next >= 0, got {t_i}, {t_next}")
    x = np.asarray(x, dtype=np.float64)
    sigma = sched.sigma(t_i)
    if sigma == 0.0:
        raise DegenerateStepError("score is undefined at sigma = 0")
    if h == 0.0:
        return x.copy()
    g = sched.g(t_i)
    return x + g * g * prior.score(x, sigma) * h + g * np.sqrt(h) * np.asarray(eps)


def simulate_reverse(
    prior: ScorePrior,
    sched: NoiseSchedule,
    x_start,
    t_start: float,
    cfg: SolverConfig,
    rng: np.random.Generator,
    keep_trace: bool = False,
):
    """Integrate the reverse SDE from ``t_start`` to 0.

    ``x_start`` may carry leading batch axes; every row is an independent
    path.  ``t_start`` is a scalar or an array of per-row start times with
    the batch shape.  Returns the state at ``t = 0``, or the full
    :class:`SdeRun` when ``keep_trace`` is set.
    """
    t_start = np.asarray(t_start, dtype=np.float64)
    pts = grid_points(sched, t_start, cfg.steps, cfg.spacing, cfg.sigma_floor)
    if t_start.ndim:
        # per-row start times: coefficients broadcast over the signal axis
        pts_col = pts[..., None]
    else:
        pts_col = pts
    sig = sched.sigma(pts[:-1])
    g = sched.g(pts_col[:-1])
    h = pts_col[:-1] - pts_col[1:]
    drift_coef = g * g * h
    noise_coef = g * np.sqrt(h)

    x0 = np.array(x_start, dtype=np.float64)
    x = x0.copy()
    trace = [x.copy()] if keep_trace else []
    for i in range(cfg.steps):
        eps = rng.standard_normal(x.shape)
        x = x + drift_coef[i] * prior.score(x, sig[i]) + noise_coef[i] * eps
        if keep_trace:
            trace.append(x.copy())
    if keep_trace:
        return SdeRun(start_state=x0, points=pts, final=x, trace=trace)
    return x


def sample_unconditional(
    prior: ScorePrior,
    sched: NoiseSchedule,
    cfg: SolverConfig,
    rng: np.random.Generator,
    size=None,
) -> np.ndarray:
    """Approximate draw(s) from the prior's data distribution, shape ``(*size, dim)``."""
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (prior.dim,)
    x_T = sched.sigma_max * rng.standard_normal(shape)
    return simulate_reverse(prior, sched, x_T, sched.t_max, cfg, rng)


def write_trace(run: SdeRun, sched: NoiseSchedule, path) -> None:
    """Dump a single-path trace as CSV columns ``t, sigma, x0 .. x{n-1}``."""
    states = [np.atleast_1d(s) for s in run.trace]
    if states and states[0].ndim != 1:
        raise ValueError("trace dump needs an unbatched run")
    n = states[0].size if states else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sigma"] + [f"x{j}" for j in range(n)])
        if np.ndim(run.points) != 1:
            raise ValueError("trace dump needs a single start time")
        for t, s in zip(run.points, states):
            w.writerow([repr(float(t)), repr(float(sched.sigma(t)))] + [repr(float(v)) for v in s])
