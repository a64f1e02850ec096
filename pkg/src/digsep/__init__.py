"""Bayesian source separation with diffusion priors inside a Gibbs sampler.

Each source gets its own prior (analytic, or a trained denoiser); the
sampler alternates partial reverse-diffusion runs, one source at a time,
to draw from the posterior of all sources given their noisy sum.
"""
from .schedule import HorizonError, NoiseSchedule, ScheduleError, TimeGrid, make_grid, sigma_of_t, t_of_sigma
from .priors import DenoiserPrior, GaussianPrior, GmmPrior, ScaledPrior, ScorePrior, prior_from_config
from .sde import SolverConfig, em_step, sample_unconditional, simulate_reverse
from .sampler import (
    DigConfig,
    MixtureObservation,
    PosteriorChain,
    RowwiseGenerator,
    conditional_draw,
    gibbs_sweep,
    mmse_estimate,
    run_dig,
)
from .dsm import DenoiserNetwork, TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "HorizonError",
    "NoiseSchedule",
    "ScheduleError",
    "TimeGrid",
    "make_grid",
    "sigma_of_t",
    "t_of_sigma",
    "DenoiserPrior",
    "GaussianPrior",
    "GmmPrior",
    "ScaledPrior",
    "ScorePrior",
    "prior_from_config",
    "SolverConfig",
    "em_step",
    "sample_unconditional",
    "simulate_reverse",
    "DigConfig",
    "MixtureObservation",
    "PosteriorChain",
    "RowwiseGenerator",
    "conditional_draw",
    "gibbs_sweep",
    "mmse_estimate",
    "run_dig",
    "DenoiserNetwork",
    "TrainConfig",
    "load_model",
    "save_model",
    "train",
]
