"""Brute-force ground truth for scalar test problems.

Nothing here touches the diffusion machinery: posteriors are evaluated on
dense grids (or in closed form for Gaussian priors) straight from the prior
densities and the Gaussian likelihood, so they can be used to check the
sampler independently.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

__all__ = [
    "OracleError",
    "GridDensity",
    "JointGridDensity",
    "GaussianPosterior",
    "gaussian_posterior",
    "tilted_grid_posterior",
    "joint_gmm_grid",
    "tv_distance",
    "tv_distance_samples",
]

log = logging.getLogger(__name__)

BOUNDARY_MASS = 1e-6


class OracleError(ValueError):
    pass


class GridTooNarrow(OracleError):
    pass


def _scalar_logpdf(prior, x: np.ndarray) -> np.ndarray:
    if prior.dim != 1:
        raise OracleError("grid oracles only handle scalar priors")
    return prior.log_density(x[:, None])


@dataclass
class GridDensity:
    """Normalized density tabulated on a uniform grid."""

    lo: float
    hi: float
    n_points: int
    log_density: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_density, dtype=np.float64)
        lp = lp - lp.max()
        z = trapezoid(np.exp(lp), self.x)
        self.log_density = lp - np.log(z)

    @classmethod
    def from_log_values(cls, x: np.ndarray, logp: np.ndarray) -> "GridDensity":
        return cls(float(x[0]), float(x[-1]), x.size, logp)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    @property
    def pdf(self) -> np.ndarray:
        return np.exp(self.log_density)

    def total_mass(self) -> float:
        return float(trapezoid(self.pdf, self.x))

    def cdf_at(self, pts) -> np.ndarray:
        x = self.x
        F = np.concatenate([[0.0], cumulative_trapezoid(self.pdf, x)])
        return np.interp(pts, x, F)

    def bin_masses(self, edges) -> np.ndarray:
        return np.diff(self.cdf_at(edges))

    def mean(self) -> float:
        return float(trapezoid(self.x * self.pdf, self.x))

    def var(self) -> float:
        m = self.mean()
        return float(trapezoid((self.x - m) ** 2 * self.pdf, self.x))

    def boundary_mass(self, frac: float = 0.01) -> float:
        """Probability within ``frac`` of the range at either end."""
        w = frac * (self.hi - self.lo)
        return float(self.cdf_at(self.lo + w) + 1.0 - self.cdf_at(self.hi - w))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "density"])
            for xi, pi in zip(self.x, self.pdf):
                wr.writerow([repr(float(xi)), repr(float(pi))])


@dataclass
class JointGridDensity:
    """Normalized 2-D density on a uniform square grid; axis 0 is the first source."""

    lo: float
    hi: float
    n_points: int
    density: np.ndarray

    def __post_init__(self):
        z = trapezoid(trapezoid(self.density, self.x, axis=1), self.x)
        self.density = self.density / z

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    def marginal(self, axis: int) -> GridDensity:
        """Marginal density of source ``axis`` (0 or 1)."""
        m = trapezoid(self.density, self.x, axis=1 - axis)
        with np.errstate(divide="ignore"):
            return GridDensity(self.lo, self.hi, self.n_points, np.log(np.maximum(m, 1e-300)))

    def total_mass(self) -> float:
        return float(trapezoid(trapezoid(self.density, self.x, axis=1), self.x))


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_posterior(prior_vars, prior_means, sigma_v: float, y_hat: float) -> GaussianPosterior:
    """Joint posterior of K scalar Gaussian sources given their noisy sum.

    Precision ``diag(1/tau_k**2) + 11^T / sigma_v**2``; ``sigma_v = inf``
    returns the prior.
    """
    tau2 = np.asarray(prior_vars, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(prior_means, dtype=np.float64), tau2.shape)
    if np.any(tau2 <= 0.0):
        raise OracleError("prior variances must be positive")
    k = tau2.size
    lik_prec = 0.0 if np.isinf(sigma_v) else 1.0 / sigma_v**2
    prec = np.diag(1.0 / tau2) + lik_prec * np.ones((k, k))
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (mu / tau2 + lik_prec * y_hat * np.ones(k))
    return GaussianPosterior(mean=mean, cov=cov)


def _auto_widen(build, boundary, lo, hi, auto_widen, max_doublings=4):
    for _ in range(max_doublings + 1):
        dens = build(lo, hi)
        if boundary(dens) <= BOUNDARY_MASS:
            return dens
        if not auto_widen:
            break
        c, half = 0.5 * (lo + hi), (hi - lo)
        lo, hi = c - half, c + half
    raise GridTooNarrow(
        f"more than {BOUNDARY_MASS:g} probability near the grid boundary [{lo}, {hi}]; widen the grid"
    )


def tilted_grid_posterior(
    prior,
    r: float,
    sigma_v: float,
    lo: float = -8.0,
    hi: float = 8.0,
    n_points: int = 4001,
    auto_widen: bool = True,
) -> GridDensity:
    """Density proportional to ``p(s) * exp(-(r - s)**2 / (2 sigma_v**2))`` on a grid."""

    def build(a, b):
        x = np.linspace(a, b, n_points)
        logp = _scalar_logpdf(prior, x) - 0.5 * (r - x) ** 2 / sigma_v**2
        return GridDensity(a, b, n_points, logp)

    return _auto_widen(build, GridDensity.boundary_mass, lo, hi, auto_widen)


def joint_gmm_grid(
    prior1,
    prior2,
    y_hat: float,
    sigma_v: float,
    lo: float = -8.0,
    hi: float = 8.0,
    n_points: int = 1201,
    auto_widen: bool = True,
) -> JointGridDensity:
    """Brute-force ``p(s1, s2 | y)`` for two scalar sources on a square grid."""

    def build(a, b):
        x = np.linspace(a, b, n_points)
        lp1 = _scalar_logpdf(prior1, x)
        lp2 = _scalar_logpdf(prior2, x)
        resid = y_hat - x[:, None] - x[None, :]
        logp = lp1[:, None] + lp2[None, :] - 0.5 * resid**2 / sigma_v**2
        return JointGridDensity(a, b, n_points, np.exp(logp - logp.max()))

    def boundary(joint):
        return max(joint.marginal(0).boundary_mass(), joint.marginal(1).boundary_mass())

    return _auto_widen(build, boundary, lo, hi, auto_widen)


def tv_distance(samples, density: GridDensity, bins: int = 50, lo=None, hi=None) -> float:
    """Total variation between a sample histogram and a grid density.

    The histogram covers ``[lo, hi]`` (default: the density's grid).  Samples
    outside are folded into the boundary bins.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 1000:
        raise OracleError(f"need at least 1000 samples, got {x.size}")
    lo = density.lo if lo is None else lo
    hi = density.hi if hi is None else hi
    edges = np.linspace(lo, hi, bins + 1)
    outside = np.count_nonzero((x < lo) | (x > hi))
    if outside:
        log.warning("%d samples outside [%g, %g] counted into boundary bins", outside, lo, hi)
    counts, _ = np.histogram(np.clip(x, lo, hi), edges)
    freq = counts / x.size
    mass = density.bin_masses(edges)
    mass[0] += density.cdf_at(lo)
    mass[-1] += 1.0 - density.cdf_at(hi)
    return float(0.5 * np.abs(freq - mass).sum())


def tv_distance_samples(a, b, bins: int = 50, lo: float = -8.0, hi: float = 8.0) -> float:
    """Total variation between two sample sets binned identically."""
    edges = np.linspace(lo, hi, bins + 1)
    fa = np.histogram(np.clip(np.ravel(a), lo, hi), edges)[0] / np.size(a)
    fb = np.histogram(np.clip(np.ravel(b), lo, hi), edges)[0] / np.size(b)
    return float(0.5 * np.abs(fa - fb).sum())
