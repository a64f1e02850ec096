"""Small fully connected denoiser trained by denoising score matching.

The network ``F`` sees the scaled noisy signal and the noise level and is
wrapped with the usual skip/output scalings (``sd`` is the data std):

    D(z, s) = c_skip(s) z + c_out(s) F(c_in(s) z, log(s) / 4)
    c_skip = sd^2 / (s^2 + sd^2),  c_out = s sd / sqrt(s^2 + sd^2),
    c_in = 1 / sqrt(s^2 + sd^2)

so that ``F`` has an O(1) regression target at every noise level.  Forward
and backward passes are plain numpy.
"""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TrainingError",
    "ModelFormatError",
    "DimensionError",
    "DenoiserNetwork",
    "TrainConfig",
    "dsm_loss",
    "loss_and_grad",
    "train",
    "holdout_losses",
    "split_holdout",
    "save_model",
    "load_model",
    "MODEL_VERSION",
]

log = logging.getLogger(__name__)

MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class DenoiserNetwork:
    """MLP denoiser ``D(z, sigma)`` for signals of length ``n``."""

    def __init__(
        self,
        n: int,
        widths: Sequence[int],
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        sigma_min: float,
        sigma_max: float,
        sigma_data: float = 1.0,
    ):
        self.n = int(n)
        self.widths = [int(w) for w in widths]
        self.weights = weights
        self.biases = biases
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.sigma_data = float(sigma_data)
        dims = self.layer_dims
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ModelFormatError("layer count does not match widths")
        for W, b, a, c in zip(weights, biases, dims[:-1], dims[1:]):
            if W.shape != (a, c) or b.shape != (c,):
                raise ModelFormatError(f"parameter shapes {W.shape}, {b.shape} do not match ({a}, {c})")

    @property
    def layer_dims(self) -> list[int]:
        return [self.n + 1] + self.widths + [self.n]

    @classmethod
    def init(cls, n, widths, rng, sigma_min=1e-3, sigma_max=100.0, sigma_data=1.0):
        dims = [n + 1] + list(widths) + [n]
        weights, biases = [], []
        for a, c in zip(dims[:-1], dims[1:]):
            weights.append(rng.standard_normal((a, c)) / math.sqrt(a))
            biases.append(np.zeros(c))
        return cls(n, widths, weights, biases, sigma_min, sigma_max, sigma_data)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "DenoiserNetwork":
        return DenoiserNetwork(
            self.n, self.widths,
            [W.copy() for W in self.weights], [b.copy() for b in self.biases],
            self.sigma_min, self.sigma_max, self.sigma_data,
        )

    def scalings(self, sigma):
        sd2 = self.sigma_data**2
        s2 = sigma * sigma
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(s2 + sd2)
        c_in = 1.0 / np.sqrt(s2 + sd2)
        return c_skip, c_out, c_in

    def _inputs(self, z, sigma):
        _, _, c_in = self.scalings(sigma)
        feat = (np.log(sigma) / 4.0)[..., None]
        return np.concatenate([c_in[..., None] * z, feat], axis=-1)

    def raw(self, h, cache: list | None = None):
        """The bare MLP ``F`` applied to prepared inputs."""
        L = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ W + b
            if cache is not None:
                cache.append((h, pre))
            h = _silu(pre) if i < L - 1 else pre
        return h

    def __call__(self, z, sigma):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.n:
            raise DimensionError(f"network expects length {self.n}, got {z.shape[-1]}")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), z.shape[:-1])
        lead = z.shape[:-1]
        zf = z.reshape(-1, self.n)
        sf = sigma.reshape(-1)
        c_skip, c_out, _ = self.scalings(sf)
        F = self.raw(self._inputs(zf, sf))
        out = c_skip[:, None] * zf + c_out[:, None] * F
        return out.reshape(lead + (self.n,))

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * F)`` w.r.t. ``params()``."""
        L = len(self.weights)
        grads = [None] * (2 * L)
        g = grad_out
        for i in range(L - 1, -1, -1):
            h_in, pre = cache[i]
            if i < L - 1:
                g = g * _silu_grad(pre)
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
        return grads


@dataclass
class TrainConfig:
    """Denoiser training settings.

    ``weighting`` selects the per-item loss weight: ``"unit"`` is
    ``|D - x|^2``; ``"preconditioned"`` divides by ``c_out^2`` so every noise
    level contributes an O(1) term.
    """

    sigma_min: float = 1e-3
    sigma_max: float = 96.0
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    widths: list = field(default_factory=lambda: [256, 256, 256])
    optimizer: str = "adam"
    weighting: str = "preconditioned"
    lr_schedule: str = "cosine"
    holdout: float = 0.1
    grad_clip: float = 10.0

    def validate(self, sigma_horizon: float | None = None) -> None:
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if sigma_horizon is not None and self.sigma_max > sigma_horizon * (1 + 1e-12):
            raise ValueError(f"sigma_max {self.sigma_max} exceeds schedule horizon {sigma_horizon}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate > 0.0):
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in ("unit", "preconditioned"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not (0.0 <= self.holdout < 1.0):
            raise ValueError("holdout must lie in [0, 1)")


def _draw_sigma(rng, size, sigma_min, sigma_max):
    return np.exp(rng.uniform(math.log(sigma_min), math.log(sigma_max), size=size))


def loss_and_grad(net: DenoiserNetwork, x0, sigma, noise, weighting: str = "unit", need_grad: bool = True):
    """Weighted DSM loss for fixed noise draws, and its parameter gradient.

    Returns ``(loss, grads)``; ``loss`` is the batch mean of
    ``w(sigma) |D(x0 + sigma noise, sigma) - x0|^2 / n``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    B, n = x0.shape
    z = x0 + sigma[:, None] * noise
    c_skip, c_out, _ = net.scalings(sigma)
    cache: list = []
    F = net.raw(net._inputs(z, sigma), cache if need_grad else None)
    err = c_skip[:, None] * z + c_out[:, None] * F - x0
    w = np.ones(B) if weighting == "unit" else 1.0 / c_out**2
    loss = float(np.mean(w * np.sum(err * err, axis=1)) / n)
    if not need_grad:
        return loss, None
    dF = (2.0 / (B * n)) * (w * c_out)[:, None] * err
    return loss, net.backward(cache, dF)


def dsm_loss(net: DenoiserNetwork, batch, rng, sigma_min=None, sigma_max=None, weighting: str = "unit") -> float:
    """Mean of ``|D(x0 + sigma n; sigma) - x0|^2 / n`` with log-uniform sigma.

    The range defaults to the network's training range.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    lo = net.sigma_min if sigma_min is None else sigma_min
    hi = net.sigma_max if sigma_max is None else sigma_max
    sigma = _draw_sigma(rng, batch.shape[0], lo, hi)
    noise = rng.standard_normal(batch.shape)
    return loss_and_grad(net, batch, sigma, noise, weighting, need_grad=False)[0]


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_holdout(data: np.ndarray, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(data.shape[0])
    n_hold = int(round(frac * data.shape[0]))
    return data[idx[n_hold:]], data[idx[:n_hold]]


def train(
    data,
    cfg: TrainConfig,
    callback: Callable[[int, float], None] | None = None,
) -> DenoiserNetwork:
    """Fit a denoiser to the rows of ``data`` (shape ``(count, n)``).

    Deterministic given ``cfg.seed``.  ``callback(step, loss)`` receives the
    training loss of every minibatch.

    Raises
    ------
    TrainingError
        If the loss becomes non-finite; the message names the step.
    """
    cfg.validate()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("training data must be a (count, n) array with at least two rows")
    rng = np.random.default_rng(cfg.seed)
    train_set, _ = split_holdout(data, cfg.holdout, rng)
    count, n = train_set.shape
    sigma_data = float(np.std(train_set))
    net = DenoiserNetwork.init(n, cfg.widths, rng, cfg.sigma_min, cfg.sigma_max, sigma_data)
    params = net.params()
    opt = _Adam(params) if cfg.optimizer == "adam" else None

    bs = min(cfg.batch_size, count)
    per_epoch = max(1, count // bs)
    total = cfg.epochs * per_epoch
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(count)
        for j in range(per_epoch):
            x0 = train_set[order[j * bs:(j + 1) * bs]]
            sigma = _draw_sigma(rng, x0.shape[0], cfg.sigma_min, cfg.sigma_max)
            noise = rng.standard_normal(x0.shape)
            loss, grads = loss_and_grad(net, x0, sigma, noise, cfg.weighting)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if cfg.grad_clip and gnorm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / gnorm) for g in grads]
            lr = cfg.learning_rate
            if cfg.lr_schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total))
            if opt is not None:
                opt.step(params, grads, lr)
            else:
                for p, g in zip(params, grads):
                    p -= lr * g
            if callback is not None:
                callback(step, loss)
            step += 1
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingError(f"non-finite parameters after step {step}")
    return net


def holdout_losses(net: DenoiserNetwork, data, cfg: TrainConfig, eval_seed: int = 12345) -> dict:
    """Held-out DSM loss and the predict-zero baseline on the same draws."""
    rng = np.random.default_rng(cfg.seed)
    _, held = split_holdout(np.asarray(data, dtype=np.float64), cfg.holdout, rng)
    if held.shape[0] == 0:
        raise ValueError("no held-out rows (holdout = 0)")
    erng = np.random.default_rng(eval_seed)
    sigma = _draw_sigma(erng, held.shape[0], net.sigma_min, net.sigma_max)
    noise = erng.standard_normal(held.shape)
    loss = loss_and_grad(net, held, sigma, noise, "unit", need_grad=False)[0]
    baseline = float(np.mean(np.sum(held * held, axis=1)) / held.shape[1])
    return {"loss": loss, "baseline": baseline, "count": int(held.shape[0])}


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    expect = int(np.prod(shape)) * 8
    if len(raw) != expect:
        raise ModelFormatError(f"parameter blob has {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_model(net: DenoiserNetwork, path) -> None:
    doc = {
        "version": MODEL_VERSION,
        "n": net.n,
        "widths": net.widths,
        "sigma_min": net.sigma_min,
        "sigma_max": net.sigma_max,
        "sigma_data": net.sigma_data,
        "activation": "silu",
        "weights": [_encode(W) for W in net.weights],
        "biases": [_encode(b) for b in net.biases],
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> DenoiserNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise ModelFormatError(f"corrupt model file {path}: missing version")
    if doc["version"] != MODEL_VERSION:
        raise ModelFormatError(f"model version {doc['version']} unsupported (expected {MODEL_VERSION})")
    try:
        n = int(doc["n"])
        widths = [int(w) for w in doc["widths"]]
        dims = [n + 1] + widths + [n]
        weights = [_decode(s, (a, c)) for s, a, c in zip(doc["weights"], dims[:-1], dims[1:])]
        biases = [_decode(s, (c,)) for s, c in zip(doc["biases"], dims[1:])]
        return DenoiserNetwork(
            n, widths, weights, biases,
            float(doc["sigma_min"]), float(doc["sigma_max"]), float(doc.get("sigma_data", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
