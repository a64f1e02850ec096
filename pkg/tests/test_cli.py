import json

import jsonschema
import numpy as np
import pytest

from digsep.cli import main
from digsep.dsm import load_model
from digsep.oracles import gaussian_posterior
from digsep.suite import REPORT_SCHEMA


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _gauss_config(tmp_path, y, sigma_v=1.0, **dig):
    cfg = {
        "priors": [{"type": "gaussian", "var": 1.0}, {"type": "gaussian", "var": 1.0}],
        "observation": {"y_hat": y, "sigma_v": sigma_v},
        "dig": dict({"iterations": 60, "burn_in": 10, "steps": 100, "n_samples": 25, "thin": 2}, **dig),
        "seed": 3,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_heartbeat(tmp_path):
    assert main(["synth", "--kind", "heartbeat", "--count", "10", "--len", "128", "--seed", "7", "--out", str(tmp_path)]) == 0
    data = np.loadtxt(tmp_path / "heartbeat.csv", delimiter=",")
    assert data.shape == (10, 128)
    man = json.loads((tmp_path / "heartbeat.json").read_text())
    assert man["seed"] == 7 and man["count"] == 10 and man["spec"]["n"] == 128


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["synth", "--kind", "motion", "--count", "4", "--seed", "2", "--out", str(tmp_path / d)])
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_synth_count_zero(tmp_path):
    assert main(["synth", "--kind", "motion", "--count", "0", "--out", str(tmp_path)]) == 1
    assert not list(tmp_path.iterdir())


def test_synth_bad_flag():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--kind", "ecg"])
    assert exc.value.code == 1


def test_synth_mix(tmp_path):
    main(["synth", "--kind", "heartbeat", "--count", "5", "--seed", "1", "--out", str(tmp_path)])
    main(["synth", "--kind", "motion", "--count", "5", "--seed", "2", "--out", str(tmp_path)])
    rc = main(["synth", "--kind", "mix", "--signal", str(tmp_path / "heartbeat.csv"),
               "--interference", str(tmp_path / "motion.csv"), "--sir", "-20", "--snr", "13",
               "--seed", "4", "--out", str(tmp_path), "--name", "mix"])
    assert rc == 0
    man = json.loads((tmp_path / "mix.json").read_text())
    s = np.loadtxt(tmp_path / man["files"]["truth"], delimiter=",")
    i = np.loadtxt(tmp_path / man["files"]["interference"], delimiter=",")
    y = np.loadtxt(tmp_path / "mix.csv", delimiter=",")
    for b in range(5):
        assert 10 * np.log10(np.sum(s[b] ** 2) / np.sum(i[b] ** 2)) == pytest.approx(-20.0, abs=1e-9)
        assert 10 * np.log10(np.sum(s[b] ** 2) / (128 * man["sigma_v"][b] ** 2)) == pytest.approx(13.0, abs=1e-9)
    assert y.shape == (5, 128)


def test_train_round_trip(tmp_path):
    main(["synth", "--kind", "heartbeat", "--count", "100", "--seed", "1", "--out", str(tmp_path)])
    rc = main(["train", "--data", str(tmp_path / "heartbeat.csv"), "--epochs", "2", "--widths", "16,16",
               "--seed", "0", "--out", str(tmp_path), "--name", "hb"])
    assert rc == 0
    net = load_model(tmp_path / "hb.json")
    assert net.n == 128 and net.widths == [16, 16]
    summary = json.loads((tmp_path / "hb_train.json").read_text())
    assert summary["holdout"]["count"] == 10


def test_train_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
    (tmp_path / "d.csv").write_text("0,1\n1,0\n")
    assert main(["train", "--data", str(tmp_path / "d.csv"), "--epochs", "0", "--out", str(tmp_path)]) == 1
    assert not (tmp_path / "model.json").exists()


def test_separate_gaussian_matches_oracle(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.normal(0.0, 1.5, 200).round(3)
    cfg = _gauss_config(tmp_path, [[v] for v in y])
    out = tmp_path / "out"
    assert main(["separate", "--config", str(cfg), "--out", str(out)]) == 0
    est = np.loadtxt(out / "estimate_s1.csv", delimiter=",")
    assert est.shape == (200,)
    post_mean = np.array([gaussian_posterior([1.0, 1.0], [0.0, 0.0], 1.0, v).mean[0] for v in y])
    # 25 draws, posterior var 2/3: each error has sd near 0.16, the pooled bias is far smaller
    err = est - post_mean
    assert abs(err.mean()) < 0.04
    assert np.sqrt(np.mean(err**2)) < 0.25
    s2 = np.loadtxt(out / "estimate_s2.csv", delimiter=",")
    assert abs(np.mean(s2 - post_mean)) < 0.04
    man = json.loads((out / "manifest.json").read_text())
    assert man["instances"] == 200 and man["dig"]["burn_in"] == 10
    assert (out / "instances" / "0199" / "chain_s1.csv").exists()


def test_separate_horizon_error_before_writes(tmp_path):
    cfg = _gauss_config(tmp_path, [[0.5]], sigma_v=500.0)
    out = tmp_path / "out"
    assert main(["separate", "--config", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()
    assert main(["separate", "--config", str(_gauss_config(tmp_path, [[0.5]])), "--sigma-v", "1e4", "--out", str(out)]) == 1
    assert not out.exists()


def test_separate_config_errors(tmp_path):
    cfg = json.loads(_gauss_config(tmp_path, [[0.5]]).read_text())
    cfg["K"] = 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    assert main(["separate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    cfg["K"] = 2
    cfg["priors"][0] = {"type": "denoiser", "path": "missing.json"}
    bad.write_text(json.dumps(cfg))
    assert main(["separate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_separate_deterministic_and_worker_invariant(tmp_path):
    y = [[0.1 * j, -0.2 * j] for j in range(7)]
    cfg = _gauss_config(tmp_path, y, iterations=12, burn_in=2, steps=20, n_samples=5, thin=2, chunk=3)
    runs = {}
    for tag, workers in (("a", "1"), ("b", "1"), ("c", "3")):
        main(["separate", "--config", str(cfg), "--out", str(tmp_path / tag), "--workers", workers])
        runs[tag] = _files(tmp_path / tag)
    assert runs["a"] == runs["b"]
    assert runs["a"] == runs["c"]
    assert "instances/0006/chain_manifest.json" in runs["a"]


def test_separate_independent_mode(tmp_path):
    cfg = _gauss_config(tmp_path, [[3.0]] * 4, mode="independent", iterations=15, burn_in=3, n_samples=10)
    out = tmp_path / "out"
    assert main(["separate", "--config", str(cfg), "--out", str(out)]) == 0
    assert np.loadtxt(out / "estimate_s1.csv", delimiter=",").shape == (4,)


def test_validate_passes(tmp_path):
    assert main(["validate", "--seed", "0", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "validation.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["passed"]
    names = {c["name"] for c in report["checks"]}
    assert {"tweedie_score", "unconditional_tv", "conditional_tv", "gibbs_tv", "stationarity_mean"} <= names


def test_validate_flip_score_fails(tmp_path):
    rc = main(["validate", "--checks", "unconditional,conditional", "--flip-score", "--out", str(tmp_path)])
    assert rc == 2
    report = json.loads((tmp_path / "validation.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert not any(c["passed"] for c in report["checks"])


def test_validate_unknown_check(tmp_path):
    assert main(["validate", "--checks", "bogus", "--out", str(tmp_path)]) == 1


def test_eval_self_is_zero(tmp_path, capsys):
    est = np.random.default_rng(0).standard_normal((6, 8))
    np.savetxt(tmp_path / "e.csv", est, delimiter=",")
    assert main(["eval", "--estimate", str(tmp_path / "e.csv"), "--truth", str(tmp_path / "e.csv"),
                 "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "index,mse"
    assert [float(l.split(",")[1]) for l in lines[1:]] == [0.0] * 7
    assert "0" in capsys.readouterr().out


def test_eval_over_mix_manifest(tmp_path):
    main(["synth", "--kind", "heartbeat", "--count", "200", "--seed", "1", "--out", str(tmp_path)])
    main(["synth", "--kind", "motion", "--count", "200", "--seed", "2", "--out", str(tmp_path)])
    main(["synth", "--kind", "mix", "--signal", str(tmp_path / "heartbeat.csv"),
          "--interference", str(tmp_path / "motion.csv"), "--sir", "-26", "--snr", "13", "--out", str(tmp_path)])
    # the trivial estimate s1 = y_hat
    assert main(["eval", "--estimate", str(tmp_path / "mix.csv"), "--manifest", str(tmp_path / "mix.json"),
                 "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 202 and lines[-1].startswith("mean,")
    per = np.array([float(l.split(",")[1]) for l in lines[1:-1]])
    y = np.loadtxt(tmp_path / "mix.csv", delimiter=",")
    s = np.loadtxt(tmp_path / "mix_truth.csv", delimiter=",")
    total = 0.0
    for v in ((y - s) ** 2).mean(axis=1).tolist():
        total += v
    assert float(lines[-1].split(",")[1]) == pytest.approx(total / 200, rel=1e-12)
    assert float(lines[-1].split(",")[1]) == pytest.approx(per.mean(), rel=1e-12)


def test_eval_shape_mismatch(tmp_path):
    np.savetxt(tmp_path / "a.csv", np.zeros((2, 3)), delimiter=",")
    np.savetxt(tmp_path / "b.csv", np.zeros((2, 4)), delimiter=",")
    assert main(["eval", "--estimate", str(tmp_path / "a.csv"), "--truth", str(tmp_path / "b.csv")]) == 1


def test_plotdata(tmp_path):
    rng = np.random.default_rng(1)
    truth, est = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    np.savetxt(tmp_path / "t.csv", truth, delimiter=",", fmt="%.17g")
    np.savetxt(tmp_path / "e.csv", est, delimiter=",", fmt="%.17g")
    out = tmp_path / "plots"
    assert main(["plotdata", "--estimate", str(tmp_path / "e.csv"), "--truth", str(tmp_path / "t.csv"),
                 "--rows", "0,2", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["plot_0000.csv", "plot_0002.csv"]
    arr = np.genfromtxt(out / "plot_0002.csv", delimiter=",", names=True)
    assert arr.dtype.names == ("index", "truth", "estimate", "residual")
    np.testing.assert_array_equal(arr["truth"], truth[2])
    np.testing.assert_array_equal(arr["residual"], est[2] - truth[2])
    assert main(["plotdata", "--estimate", str(tmp_path / "e.csv"), "--truth", str(tmp_path / "t.csv"),
                 "--rows", "5", "--out", str(out)]) == 1
