"""``digsep`` command line: synth, train, separate, validate, eval, plotdata.

Every subcommand reads an optional JSON ``--config``; flags given on the
command line override the matching config fields.  All inputs are checked
before anything is written.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure (including failed validation checks).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dsm, synth
from .priors import prior_from_config
from .sampler import DigConfig, MixtureObservation, RowwiseGenerator, mmse_estimate, run_dig, write_chain
from .schedule import NoiseSchedule
from .sde import SolverConfig
from .suite import CHECKS, run_suite, validate_report

log = logging.getLogger("digsep")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    """Invalid command-line arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return d


def _overlay(cfg: dict, args, keys) -> dict:
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _savetxt(path, arr) -> None:
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")


def _read_matrix(path, what: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file {p} not found")
    try:
        return synth.read_dataset(p)
    except ValueError as exc:
        raise ConfigError(f"{what} file {p} is not a numeric CSV: {exc}") from exc


# ---------------------------------------------------------------- synth


def _signal_spec(kind: str, n: int, preset: str):
    base = {"heartbeat": synth.HeartbeatSpec, "motion": synth.MotionSpec}[kind]
    spec = base.desk() if preset == "desk" else base()
    # keep 10 s clips whatever the length
    return replace(spec, n=n, sample_rate=n / 10.0)


def cmd_synth(args) -> int:
    cfg = _overlay(
        _load_json(args.config), args,
        ["kind", "count", "len", "seed", "out", "name", "preset", "signal", "interference", "sir", "snr"],
    )
    kind = cfg.get("kind")
    if kind not in ("heartbeat", "motion", "mix"):
        raise ConfigError("--kind must be heartbeat, motion or mix")
    seed = int(cfg.get("seed", 0))
    out = Path(cfg.get("out", "."))
    name = cfg.get("name", kind)
    if kind == "mix":
        return _synth_mix(cfg, seed, out, name)

    count = int(cfg.get("count", 100))
    n = int(cfg.get("len", 128))
    preset = cfg.get("preset", "desk")
    if count < 1:
        raise ConfigError(f"--count must be >= 1, got {count}")
    if n < 2:
        raise ConfigError(f"--len must be >= 2, got {n}")
    if preset not in ("desk", "full"):
        raise ConfigError(f"--preset must be desk or full, got {preset!r}")
    spec = _signal_spec(kind, n, preset)

    data, scale = synth.make_dataset(kind, spec, count, seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": kind, "count": count, "seed": seed, "spec": spec, "normalizer": scale}
    synth.write_dataset(out / f"{name}.csv", data, manifest)
    log.info("wrote %d %s signals to %s", count, kind, out / f"{name}.csv")
    return EXIT_OK


def _synth_mix(cfg, seed, out: Path, name: str) -> int:
    for key in ("signal", "interference", "sir", "snr"):
        if cfg.get(key) is None:
            raise ConfigError(f"mix needs --{key}")
    sig = _read_matrix(cfg["signal"], "signal")
    itf = _read_matrix(cfg["interference"], "interference")
    if sig.shape[1] != itf.shape[1]:
        raise ConfigError(f"signal length {sig.shape[1]} differs from interference length {itf.shape[1]}")
    count = int(cfg.get("count") or min(sig.shape[0], itf.shape[0]))
    if not 1 <= count <= min(sig.shape[0], itf.shape[0]):
        raise ConfigError(f"--count must be in [1, {min(sig.shape[0], itf.shape[0])}], got {count}")
    sir, snr = float(cfg["sir"]), float(cfg["snr"])

    seqs = np.random.SeedSequence(seed).spawn(count)
    mixes = [
        synth.mix(sig[b], itf[b], synth.MixSpec(sir, snr, seed), np.random.default_rng(seqs[b]))
        for b in range(count)
    ]
    out.mkdir(parents=True, exist_ok=True)
    files = {"y_hat": f"{name}.csv", "truth": f"{name}_truth.csv", "interference": f"{name}_interference.csv"}
    _savetxt(out / files["y_hat"], np.stack([m.y_hat for m in mixes]))
    _savetxt(out / files["truth"], np.stack([m.signal for m in mixes]))
    _savetxt(out / files["interference"], np.stack([m.interference for m in mixes]))
    manifest = {
        "kind": "mix",
        "count": count,
        "seed": seed,
        "sir_db": sir,
        "snr_db": snr,
        "sources": {"signal": str(cfg["signal"]), "interference": str(cfg["interference"])},
        "files": files,
        "sigma_v": [m.sigma_v for m in mixes],
        "interference_scale": [m.interference_scale for m in mixes],
        "definitions": {
            "sir_db": "10 log10(|s|^2 / |i_scaled|^2)",
            "snr_db": "10 log10(|s|^2 / (n sigma_v^2))",
        },
    }
    _dump(out / f"{name}.json", manifest)
    log.info("wrote %d mixtures (SIR %g dB, SNR %g dB) to %s", count, sir, snr, out)
    return EXIT_OK


# ---------------------------------------------------------------- train


_TRAIN_KEYS = ["epochs", "batch_size", "learning_rate", "sigma_min", "sigma_max", "widths", "optimizer", "weighting", "holdout"]


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    tcfg = dict(cfg.get("train", {}))
    for k in _TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            tcfg[k] = v
    if args.seed is not None:
        tcfg["seed"] = args.seed
    data_path = args.data or cfg.get("data")
    if data_path is None:
        raise ConfigError("train needs --data")
    out = Path(args.out or cfg.get("out", "."))
    name = args.name or cfg.get("name", "model")

    try:
        tc = dsm.TrainConfig(**tcfg)
        tc.validate(NoiseSchedule.from_dict(cfg.get("schedule", {})).sigma_max)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc
    data = _read_matrix(data_path, "data")
    if data.shape[0] < 2:
        raise ConfigError("training data needs at least two rows")

    losses = []
    net = dsm.train(data, tc, callback=lambda step, loss: losses.append(loss))
    out.mkdir(parents=True, exist_ok=True)
    dsm.save_model(net, out / f"{name}.json")
    summary = {"data": str(data_path), "rows": int(data.shape[0]), "n": int(data.shape[1]),
               "config": dsm.config_to_dict(tc), "steps": len(losses), "final_loss": losses[-1]}
    if tc.holdout > 0.0:
        summary["holdout"] = dsm.holdout_losses(net, data, tc)
    _dump(out / f"{name}_train.json", summary)
    log.info("trained %s on %d signals, final loss %.4g", out / f"{name}.json", data.shape[0], losses[-1])
    return EXIT_OK


# ---------------------------------------------------------------- separate


DIG_DEFAULTS = {
    "iterations": 100,
    "burn_in": None,
    "steps": 200,
    "spacing": "uniform-t",
    "sigma_floor": 1e-3,
    "initializer": "equal-split",
    "scan": "ascending",
    "n_samples": 25,
    "thin": 1,
    "mode": "thinned",
    "chunk": 64,
}


def _resolve_run(args):
    cfg = _load_json(args.config)
    base = Path(args.config).parent if args.config else Path(".")
    dig = dict(DIG_DEFAULTS, **cfg.get("dig", {}))
    for k in ("iterations", "burn_in", "steps", "n_samples", "mode", "initializer"):
        v = getattr(args, k, None)
        if v is not None:
            dig[k] = v
    unknown = set(dig) - set(DIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown dig settings {sorted(unknown)}")
    if dig["mode"] not in ("thinned", "independent"):
        raise ConfigError(f"dig.mode must be thinned or independent, got {dig['mode']!r}")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    out = Path(args.out or cfg.get("out", "separation"))
    workers = int(args.workers if args.workers is not None else cfg.get("workers", 1))
    if workers < 1:
        raise ConfigError("--workers must be >= 1")

    try:
        sched = NoiseSchedule.from_dict(cfg.get("schedule", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    y, sigma_v = _observation(cfg.get("observation"), base, args.sigma_v)
    n = y.shape[1]
    descs = cfg.get("priors")
    if not isinstance(descs, list) or not descs:
        raise ConfigError("config needs a non-empty 'priors' list")
    K = int(cfg.get("K", len(descs)))
    if K != len(descs):
        raise ConfigError(f"K={K} but {len(descs)} prior descriptors given")
    try:
        priors = [prior_from_config(d, n, base) for d in descs]
    except FileNotFoundError as exc:
        raise ConfigError(f"prior model file not found: {exc.filename or exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid prior descriptor: {exc}") from exc
    for k, p in enumerate(priors):
        if p.dim != n:
            raise ConfigError(f"prior {k + 1} has dimension {p.dim}, observation length is {n}")

    try:
        solver = SolverConfig(int(dig["steps"]), dig["spacing"], float(dig["sigma_floor"]))
        dcfg = DigConfig(int(dig["iterations"]), dig["burn_in"], solver, dig["initializer"], dig["scan"])
        obs = MixtureObservation(y, sigma_v, K)
        sched.t_of(obs.sigma_v)  # HorizonError before any compute
        obs.check_schedule(sched)
        solver.grid(sched, sched.t_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    n_samples, chunk = int(dig["n_samples"]), int(dig["chunk"])
    if n_samples < 1 or chunk < 1:
        raise ConfigError("n_samples and chunk must be >= 1")
    thin = dig["thin"]
    if thin != "auto" and (int(thin) != thin or int(thin) < 1):
        raise ConfigError(f"dig.thin must be a positive integer or 'auto', got {thin!r}")
    if dig["mode"] == "thinned":
        kept = dcfg.iterations - dcfg.effective_burn_in
        step = max(1, kept // n_samples) if thin == "auto" else int(thin)
        if (kept - 1) // step + 1 < n_samples:
            raise ConfigError(f"{n_samples} samples at interval {step} need more than {kept} post-burn-in sweeps")
    resolved = {
        "schedule": sched.to_dict(),
        "priors": descs,
        "dig": dict(dig, burn_in=dcfg.effective_burn_in),
        "seed": seed,
        "instances": int(y.shape[0]),
        "n": n,
    }
    return {"priors": priors, "sched": sched, "dcfg": dcfg, "dig": dig, "y": y, "sigma_v": np.asarray(obs.sigma_v),
            "seed": seed, "out": out, "workers": workers, "resolved": resolved}


def _observation(desc, base: Path, sigma_override):
    if not isinstance(desc, dict):
        raise ConfigError("config needs an 'observation' object")
    if "y_hat" in desc:
        y = np.atleast_2d(np.asarray(desc["y_hat"], dtype=np.float64))
    elif "path" in desc:
        y = _read_matrix(base / desc["path"], "observation")
    else:
        raise ConfigError("observation needs 'y_hat' values or a 'path' to a CSV")
    sv = sigma_override if sigma_override is not None else desc.get("sigma_v")
    if sv is None and "manifest" in desc:
        man = _load_json(base / desc["manifest"])
        sv = man.get("sigma_v")
    if sv is None:
        raise ConfigError("observation needs sigma_v (value, list, or a mix manifest)")
    sv = np.asarray(sv, dtype=np.float64)
    if sv.ndim == 0:
        sv = np.full(y.shape[0], float(sv))
    if sv.shape != (y.shape[0],):
        raise ConfigError(f"{sv.size} sigma_v values for {y.shape[0]} observations")
    return y, sv


def _separate_chunk(plan, rows):
    """DiG on a block of instances; every instance draws from its own stream."""
    y, sv = plan["y"][rows], plan["sigma_v"][rows]
    dig, dcfg = plan["dig"], plan["dcfg"]
    seqs = np.random.SeedSequence(plan["seed"]).spawn(plan["y"].shape[0])
    rng = RowwiseGenerator([np.random.default_rng(seqs[b]) for b in rows])
    if dig["mode"] == "independent":
        C = int(dig["n_samples"])
        y = np.repeat(y[:, None, :], C, axis=1)
        sv = np.repeat(sv[:, None], C, axis=1)
    obs = MixtureObservation(y, sv, len(plan["priors"]))
    chain = run_dig(plan["priors"], plan["sched"], obs, dcfg, rng, seed=plan["seed"])
    if dig["mode"] == "independent":
        est = chain.samples[-1].mean(axis=2)
    else:
        est = mmse_estimate(chain, int(dig["n_samples"]), dig["thin"])
    return chain, est


def _write_instance(plan, chain, j, b, stage: Path) -> None:
    # build in a scratch directory, then rename into place
    final = plan["out"] / "instances" / f"{b:04d}"
    tmp = Path(tempfile.mkdtemp(prefix=f".{b:04d}-", dir=stage))
    sub = replace(chain, samples=chain.samples[:, :, j], initial=chain.initial[:, j])
    write_chain(sub, tmp, prefix="chain", extra={"instance": b})
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def cmd_separate(args) -> int:
    plan = _resolve_run(args)
    out: Path = plan["out"]
    B = plan["y"].shape[0]
    chunk = int(plan["dig"]["chunk"])
    blocks = [list(range(s, min(B, s + chunk))) for s in range(0, B, chunk)]
    (out / "instances").mkdir(parents=True, exist_ok=True)
    K = len(plan["priors"])
    estimates = np.empty((K, B, plan["y"].shape[1]))

    def work(rows):
        chain, est = _separate_chunk(plan, rows)
        for j, b in enumerate(rows):
            _write_instance(plan, chain, j, b, out / "instances")
        return rows, est

    if plan["workers"] == 1:
        results = [work(rows) for rows in blocks]
    else:
        with ThreadPoolExecutor(max_workers=plan["workers"]) as pool:
            results = list(pool.map(work, blocks))
    for rows, est in results:
        estimates[:, rows] = est

    files = []
    for k in range(K):
        fname = f"estimate_s{k + 1}.csv"
        _savetxt(out / fname, estimates[k])
        files.append(fname)
    _dump(out / "manifest.json", dict(plan["resolved"], estimates=files, chains="instances/<index>/chain_s<k>.csv"))
    log.info("separated %d instance(s) into %s", B, out)
    return EXIT_OK


# ---------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    cfg = _load_json(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    checks = args.checks.split(",") if args.checks else cfg.get("checks")
    if checks is not None and any(c not in CHECKS for c in checks):
        raise ConfigError(f"unknown checks in {checks}; available: {', '.join(CHECKS)}")
    out = Path(args.out or cfg.get("out", "."))
    report = run_suite(seed, checks, flip_score=args.flip_score)
    validate_report(report)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "validation.json", report)
    for c in report["checks"]:
        log.info("%-22s %s  %.4g (threshold %.4g)", c["name"], "pass" if c["passed"] else "FAIL",
                 c["statistic"], c["threshold"])
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


# ---------------------------------------------------------------- eval / plotdata


def _estimate_and_truth(args, cfg):
    est_path = args.estimate or cfg.get("estimate")
    truth_path = args.truth or cfg.get("truth")
    manifest = args.manifest or cfg.get("manifest")
    if truth_path is None and manifest is not None:
        man = _load_json(manifest)
        try:
            truth_path = Path(manifest).parent / man["files"]["truth"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"manifest {manifest} lists no truth file") from exc
    if est_path is None or truth_path is None:
        raise ConfigError("need --estimate and one of --truth or --manifest")
    est = _read_matrix(est_path, "estimate")
    truth = _read_matrix(truth_path, "truth")
    if est.shape != truth.shape:
        raise ConfigError(f"estimate shape {est.shape} does not match truth shape {truth.shape}")
    return est, truth


def cmd_eval(args) -> int:
    cfg = _load_json(args.config)
    est, truth = _estimate_and_truth(args, cfg)
    out = Path(args.out or cfg.get("out", "metrics.csv"))
    rows = [synth.mse(e, t) for e, t in zip(est, truth)]
    mean = float(np.mean(rows))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("index,mse\n")
        for i, v in enumerate(rows):
            fh.write(f"{i},{v!r}\n")
        fh.write(f"mean,{mean!r}\n")
    print(f"mean MSE over {len(rows)} instance(s): {mean:.6g}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    cfg = _load_json(args.config)
    est, truth = _estimate_and_truth(args, cfg)
    rows = [int(r) for r in args.rows.split(",")] if args.rows else list(range(est.shape[0]))
    if any(not 0 <= r < est.shape[0] for r in rows):
        raise ConfigError(f"rows must lie in [0, {est.shape[0]})")
    out = Path(args.out or cfg.get("out", "plotdata"))
    out.mkdir(parents=True, exist_ok=True)
    for r in rows:
        with open(out / f"plot_{r:04d}.csv", "w") as fh:
            fh.write("index,truth,estimate,residual\n")
            for i, (t, e) in enumerate(zip(truth[r].tolist(), est[r].tolist())):
                fh.write(f"{i},{t!r},{e!r},{e - t!r}\n")
    log.info("wrote %d plot file(s) to %s", len(rows), out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _csv_ints(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="digsep", description="Source separation with diffusion priors in a Gibbs sampler.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config; flags override its fields")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)

    s = sub.add_parser("synth", help="generate signals or mixtures")
    common(s, "output directory")
    s.add_argument("--kind", choices=["heartbeat", "motion", "mix"])
    s.add_argument("--count", type=int)
    s.add_argument("--len", type=int, help="samples per signal (10 s clips)")
    s.add_argument("--preset", choices=["desk", "full"])
    s.add_argument("--name", help="file stem (default: the kind)")
    s.add_argument("--signal", help="mix: CSV of target signals")
    s.add_argument("--interference", help="mix: CSV of interference signals")
    s.add_argument("--sir", type=float, help="mix: signal-to-interference ratio in dB")
    s.add_argument("--snr", type=float, help="mix: signal-to-noise ratio in dB")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a denoiser on a dataset CSV")
    common(t, "output directory")
    t.add_argument("--data", help="dataset CSV, one signal per row")
    t.add_argument("--name", help="model file stem (default: model)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--sigma-min", dest="sigma_min", type=float)
    t.add_argument("--sigma-max", dest="sigma_max", type=float)
    t.add_argument("--widths", type=_csv_ints, help="hidden layer widths, e.g. 256,256,256")
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--weighting", choices=["unit", "preconditioned"])
    t.add_argument("--holdout", type=float)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("separate", help="run DiG on the observations of a run config")
    common(r, "output directory")
    r.add_argument("--workers", type=int, help="threads over instance blocks")
    r.add_argument("--iterations", type=int)
    r.add_argument("--burn-in", dest="burn_in", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--n-samples", dest="n_samples", type=int)
    r.add_argument("--mode", choices=["thinned", "independent"])
    r.add_argument("--initializer", choices=["equal-split", "zeros", "prior-draw"])
    r.add_argument("--sigma-v", dest="sigma_v", type=float, help="override the observation noise level")
    r.set_defaults(func=cmd_separate)

    v = sub.add_parser("validate", help="run the oracle suite and write a JSON report")
    common(v, "output directory")
    v.add_argument("--checks", help="comma-separated subset of check groups")
    v.add_argument("--flip-score", dest="flip_score", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_validate)

    e = sub.add_parser("eval", help="per-instance MSE of estimates against ground truth")
    common(e, "metrics CSV path")
    e.add_argument("--estimate")
    e.add_argument("--truth")
    e.add_argument("--manifest", help="mix manifest naming the truth file")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("plotdata", help="export truth/estimate/residual CSVs for plotting")
    common(d, "output directory")
    d.add_argument("--estimate")
    d.add_argument("--truth")
    d.add_argument("--manifest")
    d.add_argument("--rows", help="comma-separated instance indices (default: all)")
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except synth.SynthError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # numerical or I/O failure mid-run
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
