"""Command line: plan, transform, simulate and report."""

import argparse
import json
import os
import sys

import numpy as np

from ..planning import NotConverged
from .plan import (FlatnessAbort, plan_scenario, planned_from_dict, planned_to_dict,
                   reference_stream)
from .report import report, save_log
from .scenario import builtin_path, load_scenario
from .sim import run_closed_loop

EXIT_OK, EXIT_FAIL, EXIT_PLANNER, EXIT_FLATNESS = 0, 1, 2, 3

REF_COLUMNS = ("t", "p_0", "p_1", "p_2", "v_0", "v_1", "v_2") + tuple(
    f"R_{i}" for i in range(9)) + ("a_T", "omega_0", "omega_1", "omega_2", "alpha", "gamma",
                                   "branch")


def _vec3(text):
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return vals


def _scenario(path, args):
    if not os.path.exists(path) and os.path.exists(builtin_path(path)):
        path = builtin_path(path)
    cfg = load_scenario(path)
    compensation = False if getattr(args, "no_wind_compensation", False) else None
    return cfg.with_overrides(wind=getattr(args, "wind", None), seed=getattr(args, "seed", None),
                              horizon=getattr(args, "mpc_horizon", None),
                              compensation=compensation), path


def _add_common(p):
    p.add_argument("--wind", type=_vec3, help="constant true wind x,y,z (m/s)")
    p.add_argument("--seed", type=int, help="seed for measurement noise")
    p.add_argument("--mpc-horizon", type=int, help="MPC horizon length")
    p.add_argument("--no-wind-compensation", action="store_true",
                   help="plan and transform with zero surrogate wind")


def _load_traj(path):
    with open(path) as f:
        return json.load(f)


def cmd_plan(args):
    cfg, path = _scenario(args.scenario, args)
    planned = plan_scenario(cfg)
    d = planned_to_dict(planned)
    d["scenario"] = os.path.abspath(path)
    with open(args.output, "w") as f:
        json.dump(d, f, indent=1)
    print(f"planned {cfg.name}: {planned.trajectory.n_segments} segments, "
          f"{planned.duration:.3f} s -> {args.output}")
    return EXIT_OK


def cmd_transform(args):
    d = _load_traj(args.traj)
    scen = args.scenario or d.get("scenario")
    if scen is None:
        raise SystemExit("transform needs --scenario when the trajectory does not name one")
    cfg, _ = _scenario(scen, args)
    planned = planned_from_dict(d)
    rate = args.rate if args.rate else cfg.control_rate
    ref = reference_stream(planned, cfg, rate=rate)
    table = np.column_stack([ref.t, ref.p, ref.v, ref.R.reshape(len(ref), 9), ref.a_T,
                             ref.omega, ref.alpha, ref.gamma, ref.branch])
    np.savetxt(args.output, table, delimiter=",", fmt="%.17g", header=",".join(REF_COLUMNS),
               comments="")
    print(f"{len(ref)} reference samples at {rate:g} Hz -> {args.output}")
    return EXIT_OK


def cmd_simulate(args):
    cfg, _ = _scenario(args.scenario, args)
    planned = planned_from_dict(_load_traj(args.traj)) if args.traj else plan_scenario(cfg)
    log, metrics = run_closed_loop(cfg, planned)
    save_log(log, args.output)
    report(log, os.path.join(args.output, "metrics.json"),
           os.path.join(args.output, "errors.csv"))
    print(f"{cfg.name}: {len(log)} samples, RMS position error "
          f"{metrics.rms_position_error:.4f} m, RMS attitude error "
          f"{np.rad2deg(metrics.rms_attitude_error):.3f} deg -> {args.output}")
    if log.diverged:
        print(f"simulation diverged: {log.message}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_report(args):
    m = report(args.run, args.output)
    print(json.dumps(m.to_dict(), indent=1))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="tailsitter",
                                 description="Tail-sitter trajectory planning and tracking")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plan", help="optimize the scenario trajectory")
    p.add_argument("scenario", help="scenario JSON file or built-in scenario name")
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_plan)
    p = sub.add_parser("transform", help="flatness transform of a planned trajectory")
    p.add_argument("traj")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--scenario", help="scenario file (defaults to the one recorded in traj)")
    p.add_argument("--rate", type=float, help="sample rate in Hz (default: control rate)")
    _add_common(p)
    p.set_defaults(func=cmd_transform)
    p = sub.add_parser("simulate", help="closed-loop simulation")
    p.add_argument("scenario")
    p.add_argument("--traj", help="planned trajectory (plans the scenario if omitted)")
    p.add_argument("-o", "--output", required=True, help="run directory")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("report", help="metrics of a run directory")
    p.add_argument("run")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NotConverged as e:
        print(f"planner did not converge: {e}", file=sys.stderr)
        return EXIT_PLANNER
    except FlatnessAbort as e:
        print(f"flatness singularity: {e}", file=sys.stderr)
        return EXIT_FLATNESS


if __name__ == "__main__":
    sys.exit(main())
