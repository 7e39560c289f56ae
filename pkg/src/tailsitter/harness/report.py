"""Run logs on disk, metrics JSON and per-axis error CSV."""

import json
import os

import numpy as np

from ..so3 import log_so3
from .sim import RunLog, compute_metrics

# (field, width) in column order of log.csv
LOG_COLUMNS = (("t", 1), ("p", 3), ("v", 3), ("R", 9), ("omega", 3), ("a_T_cmd", 1),
               ("omega_cmd", 3), ("p_d", 3), ("v_d", 3), ("R_d", 9), ("a_T_d", 1),
               ("omega_d", 3), ("w", 3), ("w_bar", 3), ("v_aB", 3), ("acc", 3), ("branch", 1))
MPC_COLUMNS = ("t", "cost", "kkt_residual", "iterations", "solve_time")
FMT = "%.17g"


def _header(columns):
    names = []
    for name, width in columns:
        names += [name] if width == 1 else [f"{name}_{i}" for i in range(width)]
    return ",".join(names)


def save_log(log, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    n = len(log)
    blocks = [np.asarray(getattr(log, name), dtype=float).reshape(n, width)
              for name, width in LOG_COLUMNS]
    table = np.hstack(blocks) if n else np.zeros((0, sum(w for _, w in LOG_COLUMNS)))
    np.savetxt(os.path.join(out_dir, "log.csv"), table, delimiter=",", fmt=FMT,
               header=_header(LOG_COLUMNS), comments="")
    mpc = np.column_stack([np.asarray(log.mpc.get(k, np.zeros(0)), dtype=float)
                           for k in MPC_COLUMNS]) if len(log.mpc.get("t", [])) \
        else np.zeros((0, len(MPC_COLUMNS)))
    np.savetxt(os.path.join(out_dir, "mpc.csv"), mpc, delimiter=",", fmt=FMT,
               header=",".join(MPC_COLUMNS), comments="")
    meta = {"events": log.events, "diverged": log.diverged, "message": log.message,
            "u_min": None if log.u_min is None else np.asarray(log.u_min).tolist(),
            "u_max": None if log.u_max is None else np.asarray(log.u_max).tolist()}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def _read_table(path, ncol):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, ncol)


def load_log(run_dir):
    ncol = sum(w for _, w in LOG_COLUMNS)
    table = _read_table(os.path.join(run_dir, "log.csv"), ncol)
    n = len(table)
    fields, col = {}, 0
    for name, width in LOG_COLUMNS:
        block = table[:, col:col + width]
        col += width
        if name in ("R", "R_d"):
            fields[name] = block.reshape(n, 3, 3)
        elif width == 1:
            fields[name] = block[:, 0].astype(int) if name == "branch" else block[:, 0]
        else:
            fields[name] = block
    mpc_path = os.path.join(run_dir, "mpc.csv")
    mpc = {k: np.zeros(0) for k in MPC_COLUMNS}
    if os.path.exists(mpc_path):
        m = _read_table(mpc_path, len(MPC_COLUMNS))
        mpc = {k: m[:, i] for i, k in enumerate(MPC_COLUMNS)}
        mpc["iterations"] = mpc["iterations"].astype(int)
    meta = {}
    meta_path = os.path.join(run_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    u_min = meta.get("u_min")
    u_max = meta.get("u_max")
    return RunLog(**fields, mpc=mpc, events=meta.get("events", {}),
                  u_min=None if u_min is None else np.asarray(u_min),
                  u_max=None if u_max is None else np.asarray(u_max),
                  diverged=bool(meta.get("diverged", False)), message=meta.get("message", ""))


def error_table(log):
    """Rows (t, dp_x, dp_y, dp_z, dtheta_x, dtheta_y, dtheta_z) with dp = p_d - p."""
    n = len(log)
    if n == 0:
        return np.zeros((0, 7))
    dth = np.array([log_so3(R.T @ Rd) for R, Rd in zip(log.R, log.R_d)])
    return np.column_stack([log.t, log.p_d - log.p, dth])


def report(log, metrics_path, errors_path=None):
    """Write the metrics JSON and the per-axis error CSV; returns the metrics."""
    if isinstance(log, str):
        log = load_log(log)
    metrics = compute_metrics(log)
    d = os.path.dirname(os.path.abspath(metrics_path))
    os.makedirs(d, exist_ok=True)
    with open(metrics_path, "w") as f:
        json.dump(metrics.to_dict(), f, indent=1)
    if errors_path is None:
        errors_path = os.path.splitext(metrics_path)[0] + "_errors.csv"
    np.savetxt(errors_path, error_table(log), delimiter=",", fmt=FMT,
               header="t,dp_x,dp_y,dp_z,dtheta_x,dtheta_y,dtheta_z", comments="")
    return metrics
