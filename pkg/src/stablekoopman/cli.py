"""Command-line front end: generate, pod, train, eigen, predict.

Exit codes: 0 success, 2 usage, 3 data or format problem, 4 numeric
divergence.
"""

import argparse
import csv
import hashlib
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dd
from .errors import ConvergenceError, DataError, DimensionError, DomainError, FormatError, NumericError
from .linalg import eigenvalues, sort_spectrum
from .model import dumps, koopman_matrix, koopman_spectrum, load_json, model_from_dict, save_checkpoint
from .predict import (predict_map, predict_posterior_diff, predict_posterior_recurrent, summarize,
                      write_prediction_csv, write_samples_csv, write_summary_csv)
from .training import TrainConfig, train_map
from .vi import posterior_from_dict, posterior_mean_draw, sample_posterior, save_posterior, train_vi

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, config, seed, inputs, outputs):
    """``manifest-<command>.json`` with content digests and no timestamps."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {Path(p).name: _digest(p) for p in inputs},
        "outputs": {Path(p).name: _digest(p) for p in outputs},
        "tool_version": _version(),
    }
    path = Path(out) / f"manifest-{command}.json"
    path.write_text(dumps(manifest))
    return path


def _floats(text, what):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _params(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        try:
            out[key] = float(val)
        except ValueError:
            raise UsageError(f"--param {key}: not a number") from None
    return out


def _load_config(args):
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON ({exc})") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg)
    except (DomainError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# commands


def cmd_generate(args):
    out = Path(args.out)
    seed = 0 if args.seed is None else args.seed
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.system == "surrogate":
        t, X = dd.limit_cycle_surrogate(n_full=args.n_full, n_snapshots=args.samples, dt=args.dt, seed=seed)
        path = out / (args.name or "snapshots.csv")
        dd.write_snapshot_csv(path, X, args.dt)
        outputs = [path, Path(str(path) + ".meta.json")]
        print(f"wrote {len(X)} snapshots of width {X.shape[1]} to {path}")
    else:
        try:
            system = dd.get_system(args.system, **_params(args.param))
        except TypeError as exc:
            raise UsageError(f"bad system parameters: {exc}") from None
        path = out / (args.name or "dataset.csv")
        if args.mode == "lhs-derivative":
            if args.n is None:
                raise UsageError("--n is required for lhs-derivative")
            bounds = [_floats(b, "--bounds") for b in (args.bounds or [])]
            if not bounds:
                bounds = [[-1.0, 1.0]] * system.dim
            if len(bounds) == 1:
                bounds = bounds * system.dim
            if len(bounds) != system.dim or any(len(b) != 2 for b in bounds):
                raise UsageError(f"--bounds needs {system.dim} low,high pairs")
            ds = dd.make_diff_dataset(system, dd.lhs_sample(bounds, args.n, seed))
            dd.write_derivative_csv(path, ds)
            print(f"wrote {len(ds)} derivative samples to {path}")
        else:
            x0s = [_floats(x, "--x0") for x in (args.x0 or [])]
            if not x0s:
                raise UsageError("--x0 is required for trajectory mode")
            if any(len(x) != system.dim for x in x0s):
                raise UsageError(f"--x0 needs {system.dim} components")
            ds = dd.simulate_trajectories(system, x0s, args.dt, args.samples)
            dd.write_trajectory_csv(path, ds)
            print(f"wrote {len(x0s)} trajectories of {args.samples} samples to {path}")
        outputs = [path]
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out", "config", "threads")}
    write_manifest(out, "generate", params, seed, [], outputs)


def cmd_pod(args):
    out = Path(args.out)
    X, meta = dd.read_snapshot_csv(args.snapshots)
    if not 1 <= args.rank <= min(X.shape):
        raise UsageError(f"rank {args.rank} must lie in [1, {min(X.shape)}]")
    basis, C = dd.pod_project(X, args.rank)
    seed = 0 if args.seed is None else args.seed
    if args.noise:
        C = dd.add_noise(C, args.noise, seed)
    t = meta["dt"] * np.arange(len(C))
    n_train = len(C) if args.train_snapshots is None else args.train_snapshots
    basis_path = out / "pod_basis.json"
    coeff_path = out / "coefficients.csv"
    basis_path.write_text(dumps(basis.to_dict()))
    dd.write_trajectory_csv(coeff_path, dd.TrajectoryDataset([dd.Trajectory(t[:n_train], C[:n_train])]))
    print(f"energy ratio {basis.energy_ratio!r}")
    params = {"rank": args.rank, "noise": args.noise, "train_snapshots": n_train}
    write_manifest(out, "pod", params, seed, [args.snapshots], [basis_path, coeff_path])


def _write_history(path, history, label):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", label])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


def cmd_train(args):
    out = Path(args.out)
    config = _load_config(args)
    dataset = dd.read_dataset_csv(args.dataset)
    want = dd.DerivativeDataset if config.form == "diff" else dd.TrajectoryDataset
    if not isinstance(dataset, want):
        kind = "derivative" if config.form == "diff" else "trajectory"
        raise UsageError(f"form {config.form!r} needs a {kind} dataset, {args.dataset} is not one")
    if dataset.dim != config.widths[0][0]:
        raise UsageError(f"dataset has {dataset.dim} components, layers start with {config.widths[0][0]}")
    ckpt = out / "checkpoint.json"
    hist = out / "history.csv"
    if config.mode == "map":
        model, history = train_map(config, dataset)
        save_checkpoint(ckpt, model)
        _write_history(hist, history, "loss")
        print("eigenvalues:", " ".join(f"{v.real:.6g}{v.imag:+.6g}j" for v in koopman_spectrum(model)))
    else:
        post, history = train_vi(config, dataset)
        save_posterior(ckpt, post)
        _write_history(hist, history, "elbo")
        mean_lam = koopman_spectrum(posterior_mean_draw(post).model)
        print("mean-parameter eigenvalues:", " ".join(f"{v.real:.6g}{v.imag:+.6g}j" for v in mean_lam))
    write_manifest(out, "train", config.to_dict(), config.seed, [args.dataset], [ckpt, hist])


def _load_any(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    d = load_json(path)
    kind = d.get("format") if isinstance(d, dict) else None
    if kind == "koopman-model":
        return "model", model_from_dict(d)
    if kind == "koopman-posterior":
        return "posterior", posterior_from_dict(d)
    raise FormatError(f"unknown checkpoint format {kind!r}", "format")


def _write_spectrum(path, lam, draw=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re", "im"] if draw is None else ["draw", "re", "im"])
        if draw is None:
            for v in lam:
                w.writerow([repr(float(v.real)), repr(float(v.imag))])
        else:
            for i, draw_lam in enumerate(lam):
                for v in draw_lam:
                    w.writerow([i, repr(float(v.real)), repr(float(v.imag))])


def cmd_eigen(args):
    out = Path(args.out)
    kind, obj = _load_any(args.checkpoint)
    path = out / "eigenvalues.csv"
    outputs = [path]
    seed = 0 if args.seed is None else args.seed
    if kind == "model":
        lam = koopman_spectrum(obj)
    else:
        draws = [eigenvalues(koopman_matrix(d.model)) for d in sample_posterior(obj, args.n_mc, seed)]
        lam = sort_spectrum(np.mean(draws, axis=0))
        draws_path = out / "eigenvalues_draws.csv"
        _write_spectrum(draws_path, draws, draw=True)
        outputs.append(draws_path)
    _write_spectrum(path, lam)
    for v in lam:
        print(f"{float(v.real)!r} {float(v.imag)!r}")
    write_manifest(out, "eigen", {"n_mc": args.n_mc}, seed, [args.checkpoint], outputs)


def cmd_predict(args):
    out = Path(args.out)
    kind, obj = _load_any(args.checkpoint)
    x0 = _floats(args.x0, "--x0")
    model = obj if kind == "model" else obj.base
    if len(x0) != model.N:
        raise UsageError(f"--x0 has {len(x0)} components, model expects {model.N}")
    if not (args.dt > 0 and args.t_max >= 0):
        raise UsageError("--dt must be positive and --t-max nonnegative")
    times = args.dt * np.arange(int(round(args.t_max / args.dt)) + 1)
    seed = 0 if args.seed is None else args.seed
    path = out / "prediction.csv"
    outputs = [path]
    if kind == "model":
        write_prediction_csv(path, times, predict_map(obj, x0, times))
    else:
        if obj.form == "diff":
            ens = predict_posterior_diff(obj, x0, times, args.n_mc, args.m_mc, seed, with_noise=not args.no_noise)
        else:
            ens = predict_posterior_recurrent(obj, x0, times, args.n_mc, seed, with_noise=not args.no_noise)
        mean, std = summarize(ens)
        write_summary_csv(path, times, mean, std)
        if args.samples:
            spath = out / "samples.csv"
            write_samples_csv(spath, ens)
            outputs.append(spath)
    print(f"wrote {path}")
    params = {"x0": x0, "t_max": args.t_max, "dt": args.dt, "n_mc": args.n_mc, "m_mc": args.m_mc,
              "noise": not args.no_noise}
    write_manifest(out, "predict", params, seed, [args.checkpoint], outputs)


# argument parsing


def build_parser():
    def global_flags(suppress):
        # subcommand copies must not overwrite values given before the subcommand
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=dflt(None), help="JSON training configuration")
        g.add_argument("--seed", type=int, default=dflt(None), help="random seed (overrides the config)")
        g.add_argument("--out", default=dflt("."), help="output directory")
        g.add_argument("--threads", type=int, default=dflt(None), help="limit BLAS threads")
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="stablekoopman", parents=[global_flags(False)],
                                description="Stable Bayesian Koopman models from data")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample a benchmark dataset")
    g.add_argument("system", choices=sorted(dd.SYSTEMS) + ["surrogate"])
    g.add_argument("--mode", choices=["lhs-derivative", "trajectory"], default="lhs-derivative")
    g.add_argument("--n", type=int, help="number of LHS samples")
    g.add_argument("--bounds", action="append", help="low,high per dimension (repeat, or give once for all)")
    g.add_argument("--param", action="append", help="system parameter key=value")
    g.add_argument("--x0", action="append", help="initial state, comma separated (repeatable)")
    g.add_argument("--dt", type=float, default=0.1)
    g.add_argument("--samples", type=int, default=100, help="snapshots per trajectory")
    g.add_argument("--n-full", type=int, default=50, help="surrogate state width")
    g.add_argument("--name", help="output file name")
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("pod", parents=[common], help="POD-project a snapshot CSV")
    q.add_argument("snapshots")
    q.add_argument("--rank", "-r", type=int, required=True)
    q.add_argument("--noise", type=float, default=0.0, help="noise-to-signal ratio for the coefficients")
    q.add_argument("--train-snapshots", type=int, help="keep only the first snapshots as training data")
    q.set_defaults(func=cmd_pod)

    t = sub.add_parser("train", parents=[common], help="fit a MAP model or a variational posterior")
    t.add_argument("dataset")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eigen", parents=[common], help="report Koopman eigenvalues")
    e.add_argument("checkpoint")
    e.add_argument("--n-mc", type=int, default=100)
    e.set_defaults(func=cmd_eigen)

    r = sub.add_parser("predict", parents=[common], help="roll out from an initial state")
    r.add_argument("checkpoint")
    r.add_argument("--x0", required=True)
    r.add_argument("--t-max", type=float, required=True)
    r.add_argument("--dt", type=float, default=0.1)
    r.add_argument("--n-mc", type=int, default=100)
    r.add_argument("--m-mc", type=int, default=10)
    r.add_argument("--no-noise", action="store_true", help="omit observation noise from samples")
    r.add_argument("--samples", action="store_true", help="also write every sampled trajectory")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ConvergenceError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
