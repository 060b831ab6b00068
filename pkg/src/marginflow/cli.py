"""Command-line runner: ``marginflow {gen-data,train,analyze,flow,check-grad}``.

Output files go to ``--out`` when given, else to ``$MARGINFLOW_OUTDIR``, else
to the current directory. Exit codes: 0 success, 1 usage or configuration
error, 2 numerical abort (a diagnostic ``abort.json`` is written), 3 a
gradient check over threshold.

Config schema for ``train`` (JSON)::

    {
      "net": {"layer_widths": [2, 16, 1], "activation": "relu",
              "slope": 0.01, "output_activation": false},
      "loss": "exp",                # logistic, exp_pow:a, logistic_pow:a
      "gamma": 0.1,                 # or {"schedule": "power", "gamma0": .., "exponent": ..}
      "batch_size": null,           # null means full batch
      "iterations": 100000,
      "seed": 0,
      "kink": 0.0,                  # derivative used at an exact kink
      "record_stride": 10,
      "snapshot_stride": 1000,
      "init": {"scale": 1.0, "target_norm": null}
    }
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import ROW_FIELDS, analyze_trajectory
from .criticality import DEFAULT_ACTIVE_TOL, euler_di_flow
from .datasets import DatasetError, gen_linear_separable, gen_xor_ring, load_csv, save_csv
from .gradcheck import check_gradients
from .io import build_manifest, load_trajectory, now, save_trajectory, write_json, write_rows
from .net import KinkSelection, NetSpec, init_weights
from .optimizer import ConfigError, ExperimentConfig, NumericalAbort, run

OUTDIR_ENV = "MARGINFLOW_OUTDIR"

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _outdir(args) -> Path:
    out = args.out or os.environ.get(OUTDIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _widths(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}")


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def _net_from_args(args) -> NetSpec:
    if getattr(args, "config", None):
        return _load_config(args.config).net
    return NetSpec(args.widths, args.activation, args.slope, args.output_activation)


def cmd_gen_data(args) -> int:
    if args.generator == "linear":
        if args.d is None or args.margin is None:
            raise UsageError("gen-data linear needs --n, --d and --margin")
        ds = gen_linear_separable(args.seed, args.n, args.d, args.margin, args.radius,
                                  args.symmetric)
    else:
        ds = gen_xor_ring(args.seed, args.n, args.cluster_radius)
    path = _outdir(args) / (args.name or f"{args.generator}.csv")
    save_csv(ds, path)
    print(f"wrote {path} ({ds.n} rows, d={ds.dim})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = now()
    cfg = _load_config(args.config)
    ds = load_csv(args.data)
    cfg.validate(ds.n)
    if cfg.net.input_dim != ds.dim:
        raise ConfigError(f"net input width {cfg.net.input_dim} does not match data dimension {ds.dim}")
    out = _outdir(args)
    try:
        traj = run(cfg, ds)
    except NumericalAbort as exc:
        save_trajectory(exc.trajectory, out)
        write_json({"error": str(exc), "k": exc.k, "last_w": exc.last_w,
                    "last_norm": float(np.linalg.norm(exc.last_w))}, out / "abort.json")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    save_trajectory(traj, out)
    last = traj.records[-1]
    write_json(build_manifest(args.config, args.data, out, started,
                              {"k_sep": traj.k_sep, "final_normalized_margin": last.normalized_margin}),
               out / "manifest.json")
    print(f"k_sep: {traj.k_sep if traj.k_sep is not None else 'none (no separation detected)'}")
    print(f"final normalized margin: {last.normalized_margin:.17g}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    data = args.data
    if data is None:
        man = run_dir / "manifest.json"
        if not man.exists():
            raise UsageError("analyze needs --data when the run has no manifest")
        data = json.loads(man.read_text())["dataset_path"]
    ds = load_csv(data)
    traj = load_trajectory(run_dir)
    if traj.final_w is None:
        raise UsageError(f"{run_dir}: snapshots.npz missing; final weights unavailable")
    res = analyze_trajectory(traj, ds, args.active_tol)
    out = _outdir(args) if args.out or os.environ.get(OUTDIR_ENV) else run_dir
    write_rows(out / "analysis.csv", ROW_FIELDS, res.rows)
    write_json(res.summary, out / "summary.json")
    s = res.summary
    print(f"separation: {s['separation']} (k_sep={s['k_sep']})")
    g = s.get("growth_fit", {})
    if "r_squared" in g:
        print(f"growth fit: slope={g['slope']:.6g} R^2={g['r_squared']:.6f}")
    for c in ("claim1", "claim2", "claim3", "claim4"):
        print(f"{c}: {s[c]['status']}")
    print(f"final margin: {s['final_margin']:.17g}")
    print(f"final residual: {s['final_residual']:.6g} ({s['final_residual_kind']})")
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_flow(args) -> int:
    spec = _net_from_args(args)
    ds = load_csv(args.data)
    if args.u0 is not None:
        u0 = args.u0
        if u0.size != spec.n_params:
            raise UsageError(f"--u0 has {u0.size} entries, net has {spec.n_params} weights")
    else:
        u0 = init_weights(spec, np.random.default_rng(args.seed)).data
    u0 = u0 / np.linalg.norm(u0)
    kink = KinkSelection(args.kink if args.kink is not None else spec.default_kink().e)
    kink.validate(spec)
    path = euler_di_flow(spec, u0, ds, args.h, args.horizon, args.tol, kink, args.active_tol)
    out = _outdir(args)
    path.to_csv(out / "flow.csv")
    write_json({"converged": path.converged, "steps": path.steps, "final_h": path.final_h,
                "rejections": path.rejections, "final_margin": float(path.margin[-1]),
                "final_residual": path.final_residual, "final_u": path.u[-1]},
               out / "flow.json")
    print(f"steps: {path.steps} converged: {path.converged}")
    print(f"final margin: {path.margin[-1]:.17g} residual: {path.final_residual:.6g}")
    return EXIT_OK


def _scale_last_entry(g):
    g = g.copy()
    g[-1] *= 1.01
    return g


def cmd_check_grad(args) -> int:
    spec = _net_from_args(args)
    rep = check_gradients(spec, args.cases, args.seed,
                          fault=_scale_last_entry if args.inject_fault else None)
    write_json(rep.to_dict(), _outdir(args) / "check_grad.json")
    print(f"max Euler identity error: {rep.max_euler_error:.3e}")
    print(f"max homogeneity error: {rep.max_homogeneity_error:.3e}")
    print(f"max field homogeneity error: {rep.max_field_homogeneity_error:.3e}")
    print(f"max finite-difference error: {rep.max_fd_error:.3e} over {rep.fd_cases} cases")
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="marginflow", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_out(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV} or .)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("generator", choices=("linear", "xor-ring"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int)
    g.add_argument("--margin", type=float)
    g.add_argument("--radius", type=float, default=1.0)
    g.add_argument("--symmetric", action="store_true", help="pairs (x, +1), (-x, -1)")
    g.add_argument("--cluster-radius", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", help="file name (default <generator>.csv)")
    add_out(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run (S)GD and write records, snapshots and a manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    add_out(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="decompose a stored trajectory and test its claims")
    a.add_argument("--run", required=True, help="directory written by train")
    a.add_argument("--data", help="dataset CSV (default: from the run manifest)")
    a.add_argument("--active-tol", type=float, default=DEFAULT_ACTIVE_TOL)
    add_out(a)
    a.set_defaults(func=cmd_analyze)

    def add_net(sp):
        sp.add_argument("--config", help="take the net from a train config")
        sp.add_argument("--widths", type=_widths, default=(2, 16, 1))
        sp.add_argument("--activation", choices=("relu", "leaky_relu", "linear"), default="relu")
        sp.add_argument("--slope", type=float, default=0.01)
        sp.add_argument("--output-activation", action="store_true")

    f = sub.add_parser("flow", help="integrate the margin ascent flow on the sphere")
    add_net(f)
    f.add_argument("--data", required=True)
    f.add_argument("--u0", type=_vector, help="initial direction (default: random from --seed)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--h", type=float, default=1e-3)
    f.add_argument("--horizon", type=float, default=20.0)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--kink", type=float)
    f.add_argument("--active-tol", type=float, default=DEFAULT_ACTIVE_TOL)
    add_out(f)
    f.set_defaults(func=cmd_flow)

    c = sub.add_parser("check-grad", help="check homogeneity and backprop on random cases")
    add_net(c)
    c.add_argument("--cases", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="store_true",
                   help="corrupt the gradient on purpose (the check must fail)")
    add_out(c)
    c.set_defaults(func=cmd_check_grad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
