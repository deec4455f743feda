"""Command line entry point.

Exit codes: 0 when every assertion passes, 1 on an assertion failure, 2 on
a configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import empirical as emp
from .galerkin import ModelError, build_torus_model, export_model, save_model
from .runner import ConfigError, inspect_run, load_config, run_config
from .sde import GridError, load_trajectory
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _parse_mapping(text: str | None):
    """``"0:1.0,3:-0.5"`` or a bare number."""
    if text is None:
        return None
    if ":" not in text:
        return float(text)
    out = {}
    for part in text.split(","):
        k, v = part.split(":")
        out[int(k)] = float(v)
    return out


def _emit(doc) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True, default=str))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    record = run_config(cfg, args.out)
    _emit({"run_dir": str(record.run_dir), "passed": record.passed,
           "assertions": {k: v["passed"] for k, v in record.assertions.items()}})
    return EXIT_OK if record.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    if not args.suite:
        for name, members in SUITES.items():
            print(f"{name}: {', '.join(members)}")
        return EXIT_OK
    if args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_suite(args.suite, echo=lambda line: print(line, file=sys.stderr, flush=True))
    _emit({"suite": args.suite, "passed": all(c.passed for c in results),
           "criteria": [c.to_doc() for c in results]})
    return EXIT_OK if all(c.passed for c in results) else EXIT_FAIL


def cmd_export_model(args) -> int:
    model = build_torus_model(args.modes, _parse_mapping(args.forcing), _parse_mapping(args.noise))
    if args.out:
        save_model(model, args.out)
    else:
        _emit(export_model(model))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        doc = inspect_run(args.run_dir)
    except FileNotFoundError:
        print(f"no run record in {args.run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(doc)
    return EXIT_OK if doc["manifest_ok"] and doc["passed"] else EXIT_FAIL


def cmd_simulate(args) -> int:
    model = {"torus": args.modes, "forcing": _parse_mapping(args.forcing), "noise": _parse_mapping(args.noise)}
    cfg = {"kind": "simulate", "master_seed": args.seed, "model": model,
           "params": {"horizon": args.horizon, "dt": args.dt, "count": args.count}}
    record = run_config(cfg, args.out)
    _emit({"run_dir": str(record.run_dir), "passed": record.passed})
    return EXIT_OK if record.passed else EXIT_FAIL


def cmd_empirical(args) -> int:
    if args.what == "distance":
        mu1, mu2 = emp.load_measure(args.inputs[0]), emp.load_measure(args.inputs[1])
        _emit({"distance": emp.dual_lipschitz(mu1, mu2, args.metric)})
        return EXIT_OK
    traj = load_trajectory(args.inputs[0])
    t = args.t if args.t is not None else traj.horizon - (args.T if args.what == "window" else 0.0)
    if args.what == "occupation":
        mu = emp.occupation_measure(traj, t)
    elif args.what == "window":
        mu = emp.windowed_empirical(traj, args.T, t, backward=args.backward)
    else:
        mu = emp.periodized_empirical(traj, t, args.T)
    if args.out:
        emp.save_measure(mu, args.out)
    else:
        _emit(emp.measure_to_doc(mu))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsldp", description="Galerkin Navier-Stokes large-deviation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute a YAML or JSON experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output root (default: $NSLDP_OUTPUT_ROOT or ./nsldp_runs)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run an acceptance suite; no name lists the suites")
    v.add_argument("suite", nargs="?", default="")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export-model", help="write a torus model document")
    e.add_argument("--modes", type=int, required=True, help="maximal wavenumber")
    e.add_argument("--forcing", help="e.g. 0:1.0,3:-0.5")
    e.add_argument("--noise", default="1.0", help="scalar or index:value list")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_model)

    i = sub.add_parser("inspect", help="show a run record and re-check its manifest")
    i.add_argument("run_dir")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("simulate", help="simulate a torus ensemble")
    s.add_argument("--modes", type=int, default=2)
    s.add_argument("--dt", type=float, required=True)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--forcing")
    s.add_argument("--noise", default="1.0")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("empirical", help="empirical measures of stored trajectories")
    m.add_argument("what", choices=["occupation", "window", "periodize", "distance"])
    m.add_argument("inputs", nargs="+", help="trajectory file, or two measure files for distance")
    m.add_argument("--t", type=float)
    m.add_argument("--T", type=float, default=0.0)
    m.add_argument("--backward", action="store_true")
    m.add_argument("--metric", choices=["state", "window", "weighted"])
    m.add_argument("--out")
    m.set_defaults(func=cmd_empirical)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, GridError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

