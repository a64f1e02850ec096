import json
import math

import numpy as np
import pytest

from digsep.dsm import (
    DenoiserNetwork,
    DimensionError,
    ModelFormatError,
    TrainConfig,
    TrainingError,
    dsm_loss,
    holdout_losses,
    loss_and_grad,
    load_model,
    save_model,
    train,
)
from digsep.synth import HeartbeatSpec, make_dataset

# E[sigma^2 / (1 + sigma^2)] for log-uniform sigma on [1e-3, 96]:
# log(1 + 96^2) - log(1 + 1e-6), over 2 log(96 / 1e-3)
GAUSS_OPTIMAL_LOSS = 0.39786966302684955


def _zero_net(n, widths=(4,), sigma_data=1.0):
    dims = [n + 1, *widths, n]
    ws = [np.zeros((a, c)) for a, c in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(c) for c in dims[1:]]
    return DenoiserNetwork(n, list(widths), ws, bs, 1e-3, 96.0, sigma_data)


@pytest.mark.parametrize("weighting", ["unit", "preconditioned"])
def test_gradient_check(weighting):
    rng = np.random.default_rng(0)
    net = DenoiserNetwork.init(5, [8, 8], rng, sigma_data=0.8)
    x0 = rng.standard_normal((6, 5))
    sigma = np.exp(rng.uniform(np.log(0.01), np.log(10.0), 6))
    noise = rng.standard_normal((6, 5))
    _, grads = loss_and_grad(net, x0, sigma, noise, weighting)
    params = net.params()
    h = 1e-6
    for _ in range(50):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(d)) for d in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        up = loss_and_grad(net, x0, sigma, noise, weighting, need_grad=False)[0]
        params[k][idx] = old - h
        down = loss_and_grad(net, x0, sigma, noise, weighting, need_grad=False)[0]
        params[k][idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[k][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_output_length_and_dimension_error():
    net = DenoiserNetwork.init(7, [8], np.random.default_rng(0))
    assert net(np.zeros((3, 7)), 0.5).shape == (3, 7)
    assert net(np.zeros(7), 0.5).shape == (7,)
    with pytest.raises(DimensionError):
        net(np.zeros(6), 0.5)


def test_loss_identity_net_vanishing_noise():
    # sigma_data -> inf makes c_skip -> 1 and c_out -> sigma: D(z) ~ z
    net = _zero_net(4, sigma_data=1e6)
    batch = np.random.default_rng(0).standard_normal((100, 4))
    loss = dsm_loss(net, batch, np.random.default_rng(1), sigma_min=1e-8, sigma_max=1e-6)
    assert loss < 1e-11


def test_loss_zero_net_zero_data():
    net = _zero_net(4, sigma_data=1e-12)
    assert dsm_loss(net, np.zeros((10, 4)), np.random.default_rng(0)) == pytest.approx(0.0, abs=1e-20)


def test_loss_empty_batch():
    with pytest.raises(ValueError):
        dsm_loss(_zero_net(3), np.zeros((0, 3)), np.random.default_rng(0))


def test_gaussian_optimal_denoiser_loss():
    # with sigma_data = 1 and F = 0 the network is exactly z / (1 + sigma^2)
    net = _zero_net(1)
    z = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_allclose(net(z, 0.5), z / 1.25, rtol=1e-15)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1_000_000, 1))
    loss = dsm_loss(net, x, rng)
    # per-item loss is sigma^2/(1+sigma^2) * chi2_1: sd below 1.5, so SE below 1.5e-3
    assert loss == pytest.approx(GAUSS_OPTIMAL_LOSS, abs=4.5e-3)


def test_train_seed_determinism():
    data = np.random.default_rng(0).standard_normal((300, 4))
    cfg = TrainConfig(epochs=3, widths=[16], batch_size=32, seed=5)
    a, b = train(data, cfg), train(data, cfg)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()
    c = train(data, TrainConfig(epochs=3, widths=[16], batch_size=32, seed=6))
    assert a.params()[0].tobytes() != c.params()[0].tobytes()


def test_train_config_validation():
    data = np.zeros((10, 3))
    with pytest.raises(ValueError):
        train(data, TrainConfig(epochs=0))
    with pytest.raises(ValueError):
        TrainConfig(sigma_min=1.0, sigma_max=0.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(sigma_max=200.0).validate(sigma_horizon=96.68)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs").validate()


def test_train_divergence_reports_step():
    data = np.random.default_rng(0).standard_normal((200, 3))
    cfg = TrainConfig(epochs=2, widths=[8], batch_size=20, optimizer="sgd", learning_rate=1e300, grad_clip=0.0, lr_schedule="constant")
    with pytest.raises(TrainingError, match="step"):
        with np.errstate(all="ignore"):
            train(data, cfg)


def test_identical_signals_large_sigma():
    sig = np.sin(np.linspace(0, 6, 16))
    net = train(np.tile(sig, (2000, 1)), TrainConfig(epochs=60, widths=[32, 32], batch_size=64, learning_rate=3e-3))
    rng = np.random.default_rng(0)
    rms_sig = np.sqrt(np.mean(sig**2))
    for s in (10.0, 50.0):
        out = net(sig + s * rng.standard_normal((1000, 16)), s)
        assert np.sqrt(np.mean((out - sig) ** 2)) < 0.25 * rms_sig
        assert np.sqrt(np.mean((out.mean(axis=0) - sig) ** 2)) < 0.07


def test_heartbeat_holdout_beats_baseline():
    data, _ = make_dataset("heartbeat", HeartbeatSpec.desk(), 2000, 3)
    cfg = TrainConfig()
    net = train(data, cfg)
    rep = holdout_losses(net, data, cfg)
    assert rep["count"] == 200
    assert rep["loss"] < 0.5 * rep["baseline"]


def test_smoothed_loss_decreases():
    # averaged over seeds, since the property holds in expectation
    curves = []
    for seed in range(8):
        data = np.random.default_rng(100 + seed).standard_normal((15_000, 16))
        losses = []
        cfg = TrainConfig(epochs=1, widths=[64, 64], seed=seed, lr_schedule="constant")
        train(data, cfg, callback=lambda step, loss: losses.append(loss))
        curves.append(np.mean(np.reshape(losses[:100], (5, 20)), axis=1))
    mean_curve = np.mean(curves, axis=0)
    assert np.all(np.diff(mean_curve) < 0)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net = DenoiserNetwork.init(6, [16, 8], rng, 1e-2, 50.0, 0.7)
    path = tmp_path / "m.json"
    save_model(net, path)
    back = load_model(path)
    z = rng.standard_normal((100, 6))
    sig = np.exp(rng.uniform(-4, 3, 100))
    assert net(z, sig).tobytes() == back(z, sig).tobytes()
    assert (back.sigma_min, back.sigma_max, back.sigma_data) == (1e-2, 50.0, 0.7)
    doc = json.loads(path.read_text())
    assert {"version", "n", "widths", "sigma_min", "sigma_max", "weights", "biases"} <= set(doc)


def test_load_errors(tmp_path):
    net = DenoiserNetwork.init(4, [8], np.random.default_rng(0))
    path = tmp_path / "m.json"
    save_model(net, path)
    text = path.read_text()
    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "trunc.json")
    doc = json.loads(text)
    doc["weights"][0] = doc["weights"][0][:-8]
    (tmp_path / "short.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "short.json")
    doc = json.loads(text)
    doc["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(tmp_path / "v.json")
    with pytest.raises(DimensionError):
        load_model(path)(np.zeros(5), 1.0)


def test_finite_parameters_after_training():
    data, _ = make_dataset("heartbeat", HeartbeatSpec.desk(), 200, 0)
    net = train(data, TrainConfig(epochs=2, widths=[16]))
    assert all(np.all(np.isfinite(p)) for p in net.params())
    assert math.isfinite(net.sigma_data) and net.sigma_data > 0
