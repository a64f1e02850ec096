"""Plug-and-play score priors.

Every prior exposes the MMSE denoiser ``denoise(z, sigma) = E[x | x + sigma n = z]``
and the score of the noise-perturbed density ``score(z, sigma)``.  The two
are tied together by Tweedie's identity

    score(z, sigma) = (denoise(z, sigma) - z) / sigma**2

which learned priors use to obtain a score and analytic priors satisfy in
closed form.

Arrays follow the convention ``z.shape == (..., dim)``; ``sigma`` is a
scalar or an array broadcastable against ``z.shape[:-1]``.
"""
from __future__ import annotations

import abc
import logging
import math
import threading
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "PriorError",
    "ScorePrior",
    "GaussianPrior",
    "GmmPrior",
    "DenoiserPrior",
    "ScaledPrior",
    "denoise",
    "score",
    "sample_prior",
    "prior_from_config",
]

log = logging.getLogger(__name__)


class PriorError(ValueError):
    pass


def _sigma_col(sigma, z: np.ndarray) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~(s > 0.0)):
        raise PriorError(f"noise level must be > 0, got {sigma}")
    # broadcast over the signal axis
    return s[..., None] if s.ndim else s


def _as_signal(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 and dim == 1:
        z = z[None]
    if z.shape[-1] != dim:
        raise PriorError(f"signal length {z.shape[-1]} does not match prior dimension {dim}")
    return z


class ScorePrior(abc.ABC):
    """Interface shared by all priors used inside the sampler."""

    dim: int
    has_exact_score: bool = False

    @abc.abstractmethod
    def denoise(self, z, sigma) -> np.ndarray:
        ...

    def score(self, z, sigma) -> np.ndarray:
        z = _as_signal(z, self.dim)
        s = _sigma_col(sigma, z)
        return (self.denoise(z, sigma) - z) / (s * s)

    @abc.abstractmethod
    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw from the clean data distribution, shape ``(*size, dim)``."""

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serializable")


class GaussianPrior(ScorePrior):
    """Isotropic Gaussian ``N(mean, var * I)``."""

    has_exact_score = True

    def __init__(self, mean=0.0, var: float = 1.0, dim: int | None = None):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if dim is not None and mean.size == 1:
            mean = np.full(dim, mean[0])
        if mean.ndim != 1:
            raise PriorError("mean must be a vector")
        if not (var > 0.0):
            raise PriorError(f"var must be > 0, got {var}")
        self.mean = mean
        self.var = float(var)
        self.dim = mean.size

    def denoise(self, z, sigma):
        z = _as_signal(z, self.dim)
        s = _sigma_col(sigma, z)
        return self.mean + self.var / (self.var + s * s) * (z - self.mean)

    def score(self, z, sigma):
        z = _as_signal(z, self.dim)
        s = _sigma_col(sigma, z)
        return (self.mean - z) / (self.var + s * s)

    def log_density(self, z, sigma=0.0):
        """``log p_sigma(z)``; ``sigma=0`` gives the clean density."""
        z = _as_signal(z, self.dim)
        v = self.var + np.asarray(sigma, dtype=np.float64) ** 2
        d2 = np.sum((z - self.mean) ** 2, axis=-1)
        return -0.5 * d2 / v - 0.5 * self.dim * np.log(2 * np.pi * v)

    def sample(self, rng, size=None):
        shape = (() if size is None else tuple(np.atleast_1d(size))) + (self.dim,)
        return self.mean + math.sqrt(self.var) * rng.standard_normal(shape)

    def to_dict(self):
        return {"type": "gaussian", "mean": self.mean.tolist(), "var": self.var}


class GmmPrior(ScorePrior):
    """Gaussian mixture with a shared isotropic component variance.

    Parameters
    ----------
    weights : array_like, shape (J,)
        Mixture weights, positive and summing to one.
    means : array_like, shape (J, dim) or (J,)
        Component means; a 1-D array is read as ``J`` scalar components.
    component_var : float
        Shared variance ``tau**2`` of every component.
    """

    has_exact_score = True

    def __init__(self, weights, means, component_var: float):
        w = np.asarray(weights, dtype=np.float64)
        mu = np.asarray(means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if w.ndim != 1 or mu.ndim != 2 or mu.shape[0] != w.size:
            raise PriorError("weights (J,) and means (J, dim) disagree")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise PriorError("weights must be positive and sum to 1")
        if not (component_var > 0.0):
            raise PriorError(f"component_var must be > 0, got {component_var}")
        self.weights = w
        self.means = mu
        self.component_var = float(component_var)
        self.dim = mu.shape[1]
        self._log_w = np.log(w)

    def _component_logpdf(self, z, v):
        # (..., J)
        d2 = np.sum((z[..., None, :] - self.means) ** 2, axis=-1)
        return self._log_w - 0.5 * d2 / v - 0.5 * self.dim * np.log(2 * np.pi * v)

    def _var(self, sigma, z):
        s = np.asarray(sigma, dtype=np.float64)
        if np.any(~(s >= 0.0)):
            raise PriorError(f"noise level must be >= 0, got {sigma}")
        return (self.component_var + s * s)[..., None] if s.ndim else self.component_var + s * s

    def responsibilities(self, z, sigma):
        """Posterior component probabilities given ``z`` at level ``sigma``."""
        z = _as_signal(z, self.dim)
        return softmax(self._component_logpdf(z, self._var(sigma, z)), axis=-1)

    def log_density(self, z, sigma=0.0):
        z = _as_signal(z, self.dim)
        return logsumexp(self._component_logpdf(z, self._var(sigma, z)), axis=-1)

    def denoise(self, z, sigma):
        z = _as_signal(z, self.dim)
        s = _sigma_col(sigma, z)
        v = self.component_var + s * s
        gamma = self.responsibilities(z, sigma)
        mbar = gamma @ self.means
        shrink = self.component_var / v
        return mbar + shrink * (z - mbar)

    def score(self, z, sigma):
        z = _as_signal(z, self.dim)
        s = _sigma_col(sigma, z)
        gamma = self.responsibilities(z, sigma)
        return (gamma @ self.means - z) / (self.component_var + s * s)

    def sample(self, rng, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        comp = rng.choice(self.weights.size, size=shape, p=self.weights)
        noise = rng.standard_normal(shape + (self.dim,))
        return self.means[comp] + math.sqrt(self.component_var) * noise

    def to_dict(self):
        means = self.means[:, 0].tolist() if self.dim == 1 else self.means.tolist()
        return {
            "type": "gmm",
            "weights": self.weights.tolist(),
            "means": means,
            "var": self.component_var,
        }


class ScaledPrior(ScorePrior):
    """Prior of ``scale * x`` where ``x`` follows ``base``.

    Lets a denoiser trained on unit-normalized data serve sources mixed in
    at a different amplitude: ``D(z, s) = a * D_base(z / a, s / a)``.
    """

    def __init__(self, base: ScorePrior, scale: float):
        if not (scale > 0.0):
            raise PriorError(f"scale must be > 0, got {scale}")
        self.base = base
        self.scale = float(scale)
        self.dim = base.dim
        self.has_exact_score = base.has_exact_score

    def denoise(self, z, sigma):
        a = self.scale
        return a * self.base.denoise(np.asarray(z) / a, np.asarray(sigma) / a)

    def score(self, z, sigma):
        a = self.scale
        return self.base.score(np.asarray(z) / a, np.asarray(sigma) / a) / a

    def sample(self, rng, size=None):
        return self.scale * self.base.sample(rng, size)

    def to_dict(self):
        d = self.base.to_dict()
        return {"type": "scaled", "scale": self.scale, "base": d}


class DenoiserPrior(ScorePrior):
    """Prior backed by a trained denoising network.

    Queries below or above the network's training range are clamped to it
    and counted in :attr:`clamp_count` instead of failing.
    """

    def __init__(self, network, path: str | None = None):
        self.network = network
        self.dim = network.n
        self.sigma_range = (network.sigma_min, network.sigma_max)
        self.path = path
        self._lock = threading.Lock()
        self.clamp_count = 0

    def _clamp(self, sigma):
        s = np.asarray(sigma, dtype=np.float64)
        if np.any(~(s > 0.0)):
            raise PriorError(f"noise level must be > 0, got {sigma}")
        lo, hi = self.sigma_range
        n_out = int(np.count_nonzero((s < lo) | (s > hi)))
        if n_out:
            with self._lock:
                if self.clamp_count == 0:
                    log.warning("denoiser queried outside trained range [%g, %g]", lo, hi)
                self.clamp_count += n_out
        return np.clip(s, lo, hi)

    def denoise(self, z, sigma):
        z = _as_signal(z, self.dim)
        s = np.broadcast_to(self._clamp(sigma), z.shape[:-1])
        return self.network(z, s)

    def sample(self, rng, size=None, steps: int = 400, schedule=None):
        from .schedule import NoiseSchedule
        from .sde import SolverConfig, sample_unconditional

        sched = schedule if schedule is not None else NoiseSchedule()
        return sample_unconditional(self, sched, SolverConfig(steps=steps), rng, size=size)

    def to_dict(self):
        if self.path is None:
            raise NotImplementedError("denoiser prior has no model file")
        return {"type": "denoiser", "path": str(self.path)}


def denoise(prior: ScorePrior, z, sigma) -> np.ndarray:
    return prior.denoise(z, sigma)


def score(prior: ScorePrior, z, sigma) -> np.ndarray:
    return prior.score(z, sigma)


def sample_prior(prior: ScorePrior, rng: np.random.Generator, size=None) -> np.ndarray:
    return prior.sample(rng, size)


def prior_from_config(d: dict, dim: int | None = None, base_dir: str | Path = ".") -> ScorePrior:
    """Build a prior from its run-config descriptor."""
    kind = d.get("type")
    if kind == "gaussian":
        return GaussianPrior(d.get("mean", 0.0), float(d["var"]), dim=dim)
    if kind == "gmm":
        means = np.asarray(d["means"], dtype=np.float64)
        if means.ndim == 1 and dim is not None and dim > 1:
            means = np.repeat(means[:, None], dim, axis=1)
        return GmmPrior(d["weights"], means, float(d["var"]))
    if kind == "denoiser":
        from .dsm import load_model

        path = Path(base_dir) / d["path"]
        prior: ScorePrior = DenoiserPrior(load_model(path), path=str(path))
        if "scale" in d:
            prior = ScaledPrior(prior, float(d["scale"]))
        return prior
    if kind == "scaled":
        return ScaledPrior(prior_from_config(d["base"], dim, base_dir), float(d["scale"]))
    raise PriorError(f"unknown prior type {kind!r}")
