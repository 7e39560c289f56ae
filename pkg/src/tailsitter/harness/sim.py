"""Closed loop: reference stream -> MPC at the control rate -> rate lag -> RK4 simulator."""

from dataclasses import asdict, dataclass, field

import numpy as np

from ..dynamics import (ControlInput, SimulationDiverged, VehicleState, rate_actuator_step,
                        rk4_step)
from ..mpc import MpcController, horizon_samples
from ..so3 import log_so3
from .plan import reference_stream

DIVERGENCE_RADIUS = 1e4

LOG_FIELDS = ("t", "p", "v", "R", "omega", "a_T_cmd", "omega_cmd", "p_d", "v_d", "R_d",
              "a_T_d", "omega_d", "w", "w_bar", "v_aB", "acc", "branch")


@dataclass
class RunLog:
    """Per sim-step arrays plus per control-tick MPC diagnostics."""
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    a_T_cmd: np.ndarray
    omega_cmd: np.ndarray
    p_d: np.ndarray
    v_d: np.ndarray
    R_d: np.ndarray
    a_T_d: np.ndarray
    omega_d: np.ndarray
    w: np.ndarray
    w_bar: np.ndarray
    v_aB: np.ndarray
    acc: np.ndarray
    branch: np.ndarray
    mpc: dict = field(default_factory=dict)     # arrays: t, cost, kkt_residual, iterations, solve_time
    events: dict = field(default_factory=dict)
    u_min: np.ndarray = None
    u_max: np.ndarray = None
    diverged: bool = False
    message: str = ""

    def __len__(self):
        return len(self.t)

    @classmethod
    def empty(cls):
        z3 = np.zeros((0, 3))
        return cls(np.zeros(0), z3, z3, np.zeros((0, 3, 3)), z3, np.zeros(0), z3, z3, z3,
                   np.zeros((0, 3, 3)), np.zeros(0), z3, z3, z3, z3, z3, np.zeros(0, int),
                   {"t": np.zeros(0), "cost": np.zeros(0), "kkt_residual": np.zeros(0),
                    "iterations": np.zeros(0, int), "solve_time": np.zeros(0)})


@dataclass
class RunMetrics:
    duration: float = 0.0
    samples: int = 0
    rms_position_error: float = 0.0
    max_position_error: float = 0.0
    rms_attitude_error: float = 0.0
    max_attitude_error: float = 0.0
    final_position_error: float = 0.0
    max_speed: float = 0.0
    max_acceleration: float = 0.0
    max_angular_rate: float = 0.0
    rms_lateral_airspeed: float = 0.0
    mean_solve_time: float = 0.0
    max_solve_time: float = 0.0
    max_kkt_residual: float = 0.0
    max_qp_iterations: int = 0
    branch_switches: int = 0
    bound_violations: int = 0
    diverged: bool = False
    events: dict = field(default_factory=dict)   # name -> {"t", "position_error", "attitude_error"}

    def to_dict(self):
        return asdict(self)


def attitude_errors(R, R_d):
    """Angle of Log(R^T R_d) per sample."""
    return np.array([np.linalg.norm(log_so3(a.T @ b)) for a, b in zip(R, R_d)])


def compute_metrics(log):
    n = len(log)
    if n == 0:
        return RunMetrics()
    ep = np.linalg.norm(log.p_d - log.p, axis=1)
    ea = attitude_errors(log.R, log.R_d)
    st = np.asarray(log.mpc.get("solve_time", np.zeros(0)), dtype=float)
    kkt = np.asarray(log.mpc.get("kkt_residual", np.zeros(0)), dtype=float)
    its = np.asarray(log.mpc.get("iterations", np.zeros(0)), dtype=int)
    viol = 0
    if log.u_min is not None:
        u = np.column_stack([log.a_T_cmd, log.omega_cmd])
        viol = int(np.count_nonzero(np.any((u < log.u_min) | (u > log.u_max), axis=1)))
    events = {}
    for name, te in log.events.items():
        i = int(np.argmin(np.abs(log.t - te)))
        if abs(log.t[i] - te) <= 1e-6 + 0.5 * (log.t[1] - log.t[0] if n > 1 else 0.0):
            events[name] = {"t": float(log.t[i]), "position_error": float(ep[i]),
                            "attitude_error": float(ea[i])}
    return RunMetrics(
        duration=float(log.t[-1] - log.t[0]), samples=n,
        rms_position_error=float(np.sqrt(np.mean(ep**2))), max_position_error=float(ep.max()),
        rms_attitude_error=float(np.sqrt(np.mean(ea**2))), max_attitude_error=float(ea.max()),
        final_position_error=float(ep[-1]),
        max_speed=float(np.linalg.norm(log.v, axis=1).max()),
        max_acceleration=float(np.linalg.norm(log.acc, axis=1).max()),
        max_angular_rate=float(np.linalg.norm(log.omega, axis=1).max()),
        rms_lateral_airspeed=float(np.sqrt(np.mean(log.v_aB[:, 1]**2))),
        mean_solve_time=float(st.mean()) if st.size else 0.0,
        max_solve_time=float(st.max()) if st.size else 0.0,
        max_kkt_residual=float(kkt.max()) if kkt.size else 0.0,
        max_qp_iterations=int(its.max()) if its.size else 0,
        branch_switches=int(np.count_nonzero(np.diff(log.branch) != 0)) if n > 1 else 0,
        bound_violations=viol, diverged=bool(log.diverged), events=events)


def _translational_accel(x, a_T, w, model):
    from ..dynamics import reduced_derivative
    return reduced_derivative(x, a_T, np.zeros(3), w, model)[1]


def run_closed_loop(cfg, planned, reference=None, duration=None):
    """Simulate the scenario; returns (RunLog, RunMetrics).

    The reference is the flatness transform at the simulation rate; the MPC
    horizon takes every control-period sample from it and holds the last one.
    Divergence (non-finite state or |p| > 1e4 m) stops the run with a partial log.
    """
    ref = reference if reference is not None else reference_stream(planned, cfg)
    if duration is None:
        duration = cfg.duration if cfg.duration is not None else planned.duration
    dt = cfg.sim_dt
    sub = cfg.substeps
    n_ticks = int(np.floor(duration / cfg.control_dt + 1e-9))
    if n_ticks <= 0 or len(ref) == 0:
        log = RunLog.empty()
        return log, compute_metrics(log)
    rng = np.random.default_rng(cfg.seed)
    noise_p = float(cfg.noise.get("position", 0.0))
    noise_v = float(cfg.noise.get("velocity", 0.0))
    wind = cfg.wind_field()
    model = cfg.model
    last = len(ref) - 1
    samples = {}

    def sample(i):
        i = min(i, last)
        if i not in samples:
            samples[i] = ref.sample(i)
        return samples[i]

    s0 = sample(0)
    x = VehicleState(s0.p + planned.start_offset, s0.v.copy(), s0.R.copy(), s0.omega.copy())
    omega_act = s0.omega.copy()
    ctrl = MpcController(cfg.mpc, model)
    N = cfg.mpc.N
    n_steps = n_ticks * sub
    rec = {k: [] for k in LOG_FIELDS}
    diag = {"t": [], "cost": [], "kkt_residual": [], "iterations": [], "solve_time": []}
    diverged, message = False, ""

    def record(t, x, u, i):
        r = sample(i)
        w = wind.w(t)
        rec["t"].append(t)
        rec["p"].append(x.p.copy())
        rec["v"].append(x.v.copy())
        rec["R"].append(x.R.copy())
        rec["omega"].append(x.omega.copy())
        rec["a_T_cmd"].append(u.a_T)
        rec["omega_cmd"].append(np.asarray(u.omega, float).copy())
        rec["p_d"].append(r.p)
        rec["v_d"].append(r.v)
        rec["R_d"].append(r.R)
        rec["a_T_d"].append(r.a_T)
        rec["omega_d"].append(r.omega)
        rec["w"].append(w)
        rec["w_bar"].append(r.v - r.v_a)
        rec["v_aB"].append(x.R.T @ (x.v - w))
        rec["acc"].append(_translational_accel(x, u.a_T, w, model))
        rec["branch"].append(int(r.branch))

    t = 0.0
    for k in range(n_ticks):
        i0 = k * sub
        horizon = [sample(i0 + q * sub) for q in range(N)]
        meas = x.copy()
        if noise_p > 0:
            meas.p = meas.p + noise_p * rng.standard_normal(3)
        if noise_v > 0:
            meas.v = meas.v + noise_v * rng.standard_normal(3)
        w_bar = horizon[0].v - horizon[0].v_a
        u, d = ctrl.step(meas, horizon, w_bar)
        diag["t"].append(t)
        diag["cost"].append(d.cost)
        diag["kkt_residual"].append(d.kkt_residual)
        diag["iterations"].append(d.iterations)
        diag["solve_time"].append(d.solve_time)
        for q in range(sub):
            step = i0 + q
            record(t, x, u, step)
            omega_act = rate_actuator_step(omega_act, u.omega, dt, cfg.rate_time_constant,
                                           cfg.rate_accel_limit)
            try:
                x = rk4_step(x, ControlInput(u.a_T, omega_act), t, dt, wind, model)
            except SimulationDiverged as e:
                diverged, message = True, str(e)
                break
            t = (step + 1) * dt
            if np.linalg.norm(x.p) > DIVERGENCE_RADIUS:
                diverged, message = True, f"position left {DIVERGENCE_RADIUS} m at t={t:.3f}"
                break
        if diverged:
            break
    if not diverged:
        record(t, x, u, n_steps)
    arr = {}
    for key in LOG_FIELDS:
        arr[key] = np.array(rec[key])
    log = RunLog(**arr, mpc={k: np.array(v) for k, v in diag.items()},
                 events=dict(planned.events), u_min=cfg.mpc.u_min.copy(),
                 u_max=cfg.mpc.u_max.copy(), diverged=diverged, message=message)
    return log, compute_metrics(log)
