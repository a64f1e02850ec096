"""Oracle checks of the sampler on problems with known answers.

Every check compares a statistic against a threshold and lands in a
JSON-serializable report.  The report layout is pinned by
:data:`REPORT_SCHEMA`.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .oracles import gaussian_posterior, joint_gmm_grid, tilted_grid_posterior, tv_distance
from .priors import GaussianPrior, GmmPrior, ScorePrior
from .sampler import DigConfig, MixtureObservation, gibbs_sweep, run_dig, ChainState
from .schedule import NoiseSchedule
from .sde import SolverConfig, sample_unconditional, simulate_reverse

__all__ = ["REPORT_SCHEMA", "CHECKS", "run_suite", "validate_report"]

REPORT_SCHEMA = {
    "type": "object",
    "required": ["suite", "seed", "passed", "checks"],
    "additionalProperties": False,
    "properties": {
        "suite": {"const": "oracle"},
        "seed": {"type": "integer"},
        "passed": {"type": "boolean"},
        "flip_score": {"type": "boolean"},
        "checks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "passed", "statistic", "threshold"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "statistic": {"type": "number"},
                    "threshold": {"type": "number"},
                    "details": {"type": "object"},
                },
            },
        },
    },
}


class _FlippedScore(ScorePrior):
    """Test hook: a prior whose score points the wrong way."""

    has_exact_score = False

    def __init__(self, base: ScorePrior):
        self.base = base
        self.dim = base.dim

    def denoise(self, z, sigma):
        return 2.0 * np.asarray(z) - self.base.denoise(z, sigma)

    def score(self, z, sigma):
        return -self.base.score(z, sigma)

    def sample(self, rng, size=None):
        return self.base.sample(rng, size)

    def log_density(self, z, sigma=0.0):
        return self.base.log_density(z, sigma)


def _result(name, statistic, threshold, details=None) -> dict:
    stat = float(statistic)
    if not math.isfinite(stat):
        stat = 1e300
    out = {"name": name, "passed": bool(stat <= threshold), "statistic": stat, "threshold": float(threshold)}
    if details:
        out["details"] = details
    return out


def _safe_tv(draws, density, bins, lo=None, hi=None) -> float:
    draws = np.asarray(draws)
    if not np.all(np.isfinite(draws)):
        return 1.0
    return tv_distance(draws, density, bins=bins, lo=lo, hi=hi)


def check_schedule(rng, wrap) -> list[dict]:
    sched = NoiseSchedule()
    ts = rng.uniform(0.0, sched.t_max, 100)
    la = math.log(sched.alpha)
    worst = 0.0
    for t in ts:
        val, _ = quad(lambda s: math.exp(2.0 * la * s), 0.0, t, epsabs=0.0, epsrel=1e-13)
        worst = max(worst, abs(sched.sigma(t) - math.sqrt(val)) / math.sqrt(val))
    trip = float(np.max(np.abs(sched.t_of(sched.sigma(ts)) - ts)))
    return [
        _result("schedule_quadrature", worst, 1e-8),
        _result("schedule_round_trip", trip, 1e-10 * sched.t_max),
    ]


def check_tweedie(rng, wrap) -> list[dict]:
    priors = [GaussianPrior(0.3, 0.7), GmmPrior([0.5, 0.5], [-1.0, 1.0], 0.25)]
    h = 1e-5
    worst = 0.0
    for p in priors:
        z = rng.uniform(-3.0, 3.0, 500)[:, None]
        sig = rng.uniform(0.1, 3.0, 500)
        fd = (p.log_density(z + h, sig) - p.log_density(z - h, sig)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(p.score(z, sig)[:, 0] - fd))))
    return [_result("tweedie_score", worst, 1e-5, {"probes": 1000})]


def check_unconditional(rng, wrap) -> list[dict]:
    prior = GmmPrior([0.5, 0.5], [-1.0, 1.0], 0.25)
    draws = sample_unconditional(wrap(prior), NoiseSchedule(), SolverConfig(400), rng, size=20000)
    dens = tilted_grid_posterior(prior, 0.0, math.inf)
    tv = _safe_tv(draws, dens, bins=100, lo=-4.0, hi=4.0)
    return [_result("unconditional_tv", tv, 0.05, {"draws": 20000, "steps": 400})]


def check_conditional(rng, wrap) -> list[dict]:
    prior = GmmPrior([0.5, 0.5], [-1.0, 1.0], 0.25)
    sched = NoiseSchedule()
    r, sigma_v = 0.8, 0.5
    x0 = np.full((10000, 1), r)
    draws = simulate_reverse(wrap(prior), sched, x0, sched.t_of(sigma_v), DigConfig().solver, rng)
    dens = tilted_grid_posterior(prior, r, sigma_v)
    tv = _safe_tv(draws, dens, bins=50, lo=-4.0, hi=4.0)
    return [_result("conditional_tv", tv, 0.05, {"draws": 10000, "steps": 200, "r": r, "sigma_v": sigma_v})]


def check_stationarity(rng, wrap) -> list[dict]:
    sched = NoiseSchedule()
    priors = [wrap(GaussianPrior(0.0, 1.0)), wrap(GaussianPrior(0.0, 1.0))]
    post = gaussian_posterior([1.0, 1.0], [0.0, 0.0], 1.0, 3.0)
    chains = 10000
    start = rng.multivariate_normal(post.mean, post.cov, size=chains)
    obs = MixtureObservation(np.full((chains, 1), 3.0), 1.0, 2)
    state = ChainState(0, start.T[:, :, None].copy())
    out = gibbs_sweep(priors, sched, obs, state, DigConfig(1, 0), rng)
    s = out.sources[:, :, 0]
    mean_err = float(np.max(np.abs(s.mean(axis=1) - post.mean)))
    cov_err = float(np.max(np.abs(np.cov(s) - post.cov) / np.abs(post.cov)))
    return [
        _result("stationarity_mean", mean_err, 0.03, {"chains": chains}),
        _result("stationarity_cov", cov_err, 0.07, {"chains": chains}),
    ]


def check_gibbs(rng, wrap) -> list[dict]:
    p1 = GmmPrior([0.5, 0.5], [-1.0, 1.0], 0.25)
    p2 = GmmPrior([0.4, 0.6], [-0.5, 1.0], 0.5)
    y, sigma_v, chains = 0.8, 0.5, 100
    obs = MixtureObservation(np.full((chains, 1), y), sigma_v, 2)
    chain = run_dig([wrap(p1), wrap(p2)], NoiseSchedule(), obs, DigConfig(200), rng)
    marg = joint_gmm_grid(p1, p2, y, sigma_v).marginal(0)
    tv = _safe_tv(chain.kept[:, 0], marg, bins=50)
    return [_result("gibbs_tv", tv, 0.07, {"sweeps": 200, "chains": chains})]


CHECKS: dict[str, Callable] = {
    "schedule": check_schedule,
    "tweedie": check_tweedie,
    "unconditional": check_unconditional,
    "conditional": check_conditional,
    "stationarity": check_stationarity,
    "gibbs": check_gibbs,
}


def run_suite(seed: int = 0, checks=None, flip_score: bool = False) -> dict:
    """Run the named check groups (default: all) and return the report.

    ``flip_score`` negates every score used by the samplers; the
    sampling-based checks must then fail.
    """
    names = list(CHECKS) if checks is None else list(checks)
    unknown = [c for c in names if c not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; available: {sorted(CHECKS)}")
    wrap = _FlippedScore if flip_score else (lambda p: p)
    seqs = np.random.SeedSequence(seed).spawn(len(CHECKS))
    streams = dict(zip(CHECKS, seqs))
    results = []
    with np.errstate(over="ignore", invalid="ignore"):
        for name in names:
            results.extend(CHECKS[name](np.random.default_rng(streams[name]), wrap))
    report = {
        "suite": "oracle",
        "seed": int(seed),
        "passed": all(r["passed"] for r in results),
        "checks": results,
    }
    if flip_score:
        report["flip_score"] = True
    return report


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``report`` breaks the schema."""
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)
