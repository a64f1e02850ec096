"""Synthetic heartbeat / motion-artifact benchmark.

Heartbeats are quasi-periodic trains of narrow Gaussian-derivative pulses;
motion artifacts are velocity profiles made of piecewise-constant levels
joined by sigmoid transitions.  Mixtures are scaled to a requested
signal-to-interference ratio (total energies) and signal-to-noise ratio
(signal energy per sample over noise variance), both in dB.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "SynthError",
    "HeartbeatSpec",
    "MotionSpec",
    "MixSpec",
    "Mixture",
    "gen_heartbeat",
    "gen_motion",
    "make_dataset",
    "mix",
    "mse",
    "sir_db",
    "snr_db",
    "write_dataset",
    "read_dataset",
]


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class HeartbeatSpec:
    """Pulse-train parameters; times in seconds, rates in beats per minute."""

    n: int = 1000
    sample_rate: float = 100.0
    rate_bpm: tuple = (55.0, 95.0)
    pulse_width: tuple = (0.06, 0.12)
    beat_jitter: float = 0.04
    amplitude_jitter: float = 0.15

    @classmethod
    def desk(cls) -> "HeartbeatSpec":
        """128-sample preset (10 s at 12.8 Hz) with pulses wide enough to resolve."""
        return cls(n=128, sample_rate=12.8, pulse_width=(0.12, 0.2))


@dataclass(frozen=True)
class MotionSpec:
    """Velocity-profile parameters; ``sharpness`` is the sigmoid slope in 1/s.

    With ``unit_energy`` every profile is rescaled to unit RMS, matching how
    :func:`mix` fixes the interference energy of each instance.
    """

    n: int = 1000
    sample_rate: float = 100.0
    segments: tuple = (1, 4)
    amplitude: tuple = (-1.0, 1.0)
    sharpness: tuple = (1.0, 6.0)
    unit_energy: bool = False

    @classmethod
    def desk(cls) -> "MotionSpec":
        return cls(n=128, sample_rate=12.8, unit_energy=True)


@dataclass(frozen=True)
class MixSpec:
    sir_db: float
    snr_db: float
    seed: int = 0


@dataclass
class Mixture:
    y_hat: np.ndarray
    sigma_v: float
    signal: np.ndarray
    interference: np.ndarray
    noise: np.ndarray
    interference_scale: float
    spec: MixSpec

    def manifest(self) -> dict:
        return {
            "sigma_v": self.sigma_v,
            "interference_scale": self.interference_scale,
            "sir_db": self.spec.sir_db,
            "snr_db": self.spec.snr_db,
            "seed": self.spec.seed,
            "achieved_sir_db": sir_db(self.signal, self.interference),
            "achieved_snr_db": snr_db(self.signal, self.sigma_v),
        }


def _time_axis(n, fs):
    return np.arange(n) / fs


def gen_heartbeat(spec: HeartbeatSpec, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean heartbeat-like pulse train (not normalized)."""
    t = _time_axis(spec.n, spec.sample_rate)
    duration = spec.n / spec.sample_rate
    lo, hi = spec.rate_bpm
    period = 60.0 / (lo if lo == hi else rng.uniform(lo, hi))
    wlo, whi = spec.pulse_width
    width = wlo if wlo == whi else rng.uniform(wlo, whi)
    start = rng.uniform(0.0, period)
    beats = []
    tb = start
    while tb < duration + 3 * width:
        beats.append(tb)
        jitter = spec.beat_jitter * period * rng.standard_normal() if spec.beat_jitter else 0.0
        tb += period + jitter
    beats = np.asarray(beats)
    amps = 1.0 + spec.amplitude_jitter * rng.standard_normal(beats.size) if spec.amplitude_jitter else np.ones(beats.size)
    u = (t[:, None] - beats[None, :]) / width
    # first derivative of a Gaussian, peak magnitude 1
    pulses = -u * np.exp(0.5 - 0.5 * u * u)
    x = pulses @ amps
    return x - x.mean()


def gen_motion(spec: MotionSpec, rng: np.random.Generator) -> np.ndarray:
    """One velocity profile: random levels joined by sigmoid transitions."""
    t = _time_axis(spec.n, spec.sample_rate)
    duration = spec.n / spec.sample_rate
    m = int(rng.integers(spec.segments[0], spec.segments[1] + 1))
    alo, ahi = spec.amplitude
    levels = rng.uniform(alo, ahi, size=m)
    jumps = np.sort(rng.uniform(0.0, duration, size=m - 1))
    slo, shi = spec.sharpness
    sharp = rng.uniform(slo, shi, size=m - 1) if slo != shi else np.full(m - 1, float(slo))
    v = np.full(spec.n, levels[0])
    for j in range(m - 1):
        v += (levels[j + 1] - levels[j]) * expit(sharp[j] * (t - jumps[j]))
    if spec.unit_energy:
        rms = np.sqrt(np.mean(v * v))
        if rms > 0.0:
            v = v / rms
    return v


def make_dataset(kind: str, spec, count: int, seed: int, normalize: bool = True) -> tuple[np.ndarray, float]:
    """``count`` signals of one kind, scaled to unit empirical std over the set.

    Each item uses its own stream spawned from ``seed``.  Returns the data
    and the divisor applied.
    """
    if count < 1:
        raise SynthError(f"count must be >= 1, got {count}")
    gen = {"heartbeat": gen_heartbeat, "motion": gen_motion}.get(kind)
    if gen is None:
        raise SynthError(f"unknown signal kind {kind!r}")
    seqs = np.random.SeedSequence(seed).spawn(count)
    data = np.stack([gen(spec, np.random.default_rng(s)) for s in seqs])
    scale = float(np.std(data)) if normalize else 1.0
    if scale == 0.0:
        raise SynthError("generated signals have zero energy")
    return data / scale, scale


def sir_db(signal, interference) -> float:
    return float(10.0 * np.log10(np.sum(np.square(signal)) / np.sum(np.square(interference))))


def snr_db(signal, sigma_v: float) -> float:
    s = np.asarray(signal)
    return float(10.0 * np.log10(np.sum(s * s) / (s.size * sigma_v**2)))


def mix(signal, interference, spec: MixSpec, rng: np.random.Generator | None = None) -> Mixture:
    """Scale ``interference`` and add white noise to hit the requested SIR/SNR."""
    s = np.asarray(signal, dtype=np.float64)
    i = np.asarray(interference, dtype=np.float64)
    if s.shape != i.shape or s.ndim != 1:
        raise SynthError("signal and interference must be equal-length vectors")
    es, ei = float(np.sum(s * s)), float(np.sum(i * i))
    if es == 0.0 or ei == 0.0:
        raise SynthError("zero-energy input: SIR/SNR undefined")
    scale = np.sqrt(es / (ei * 10.0 ** (spec.sir_db / 10.0)))
    sigma_v = float(np.sqrt(es / (s.size * 10.0 ** (spec.snr_db / 10.0))))
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    noise = sigma_v * rng.standard_normal(s.size)
    i_scaled = scale * i
    return Mixture(
        y_hat=s + i_scaled + noise,
        sigma_v=sigma_v,
        signal=s,
        interference=i_scaled,
        noise=noise,
        interference_scale=float(scale),
        spec=spec,
    )


def mse(estimate, truth) -> float:
    e = np.asarray(estimate, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if e.shape != t.shape:
        raise SynthError(f"shape mismatch {e.shape} vs {t.shape}")
    return float(np.mean((e - t) ** 2))


def write_dataset(path, data: np.ndarray, manifest: dict) -> Path:
    """One signal per CSV row plus ``<stem>.json`` manifest; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(data), delimiter=",", fmt="%.17g")
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return mpath


def read_dataset(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found")
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def _jsonable(o):
    if isinstance(o, (HeartbeatSpec, MotionSpec, MixSpec)):
        return asdict(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
