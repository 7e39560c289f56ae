"""Spatial-temporal trajectory optimization through waypoints.

Decision variables are the free control points inserted between waypoints
and the segment durations (softplus-encoded so they stay positive). The cost
integrates the weighted input effort given by the flatness transform, a
time penalty and smoothed hinge penalties on speed, input bounds and the
specific-acceleration margin.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ..aero import AeroModel, default_model
from ..dynamics import G_VEC, hover_attitude
from ..flatness import FlatnessCache, FlatnessConfig, NoRootError, alpha_root_gap, transform_batch
from .lbfgs import lbfgs
from .minco import FlatTrajectory, MincoSystem, basis, rest_state, snap_energy


# The low-airspeed branch drops the aerodynamic terms, so the inputs jump where a
# quadrature node crosses the speed threshold. The planner uses a much lower
# threshold than the tracker to keep that kink small.
PLANNER_V_MIN = 0.01


class NotConverged(RuntimeError):
    """Raised by callers that require convergence; optimize itself only flags it."""


@dataclass
class PlanningProblem:
    start: np.ndarray                      # (4, 3): p, v, a, jerk
    end: np.ndarray                        # (4, 3)
    waypoints: np.ndarray = None           # (K, 3) interior waypoints, in order
    n_ctrl: int = 2                        # free control points per gap
    W: np.ndarray = field(default_factory=lambda: np.array([0.1, 1.0, 1.0, 1.0]))
    rho: float = 100.0
    v_max: float = 12.0
    u_min: np.ndarray = field(default_factory=lambda: np.array(
        [6.0, -np.deg2rad(200.0), -np.deg2rad(200.0), -np.deg2rad(200.0)]))
    u_max: np.ndarray = field(default_factory=lambda: np.array(
        [16.0, np.deg2rad(200.0), np.deg2rad(200.0), np.deg2rad(200.0)]))
    eps: float = 0.1
    wind: np.ndarray = field(default_factory=lambda: np.zeros(3))
    model: AeroModel = field(default_factory=default_model)
    w_input: float = 1e3
    w_vel: float = 1e3
    w_sing: float = 1e4
    w_snap: float = 1e-2                   # minimum-snap energy regularizer
    mu: float = 0.1                        # hinge smoothing width
    quad: int = 16                         # quadrature intervals per segment
    cache: FlatnessCache = None            # attitude memory at the start
    flat_config: FlatnessConfig = None     # defaults to a low-speed threshold of 0.01 m/s

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(4, 3)
        self.end = np.asarray(self.end, dtype=float).reshape(4, 3)
        wp = np.zeros((0, 3)) if self.waypoints is None else self.waypoints
        self.waypoints = np.asarray(wp, dtype=float).reshape(-1, 3)
        self.W = np.asarray(self.W, dtype=float).reshape(4)
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(4)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(4)
        self.wind = np.asarray(self.wind, dtype=float).reshape(3)
        if np.any(self.W < 0):
            raise ValueError("W must be nonnegative")
        if self.rho < 0 or self.eps <= 0:
            raise ValueError("rho must be nonnegative and eps positive")
        if self.n_ctrl < 0:
            raise ValueError("n_ctrl must be nonnegative")

    def planner_config(self):
        return self.flat_config or FlatnessConfig(v_min=PLANNER_V_MIN)

    @property
    def n_gaps(self):
        return len(self.waypoints) + 1

    @property
    def n_segments(self):
        return self.n_gaps * (self.n_ctrl + 1)

    @property
    def n_free(self):
        return self.n_gaps * self.n_ctrl

    def initial_cache(self, traj=None):
        """Attitude memory at the start.

        From rest the hover heading (belly direction) is taken from the first
        nonzero horizontal derivative of the trajectory at t = 0, so that the
        low-airspeed and coordinated branches agree on y_b as speed builds up.
        Without a trajectory the direction toward the first target is used.
        """
        if self.cache is not None:
            return self.cache.copy()
        targets = np.vstack([self.waypoints, self.end[0:1]])
        return start_cache(traj, targets[0] - self.start[0])


def start_cache(traj=None, fallback=None):
    """Hover-heading attitude memory for the start of a trajectory.

    The belly direction is the first nonzero horizontal derivative at t = 0,
    else the horizontal part of `fallback`, else north. For a moving start
    this puts the belly along the horizontal velocity, which selects the
    upright (positive lift) coordinated solution.
    """
    d = None
    if traj is not None:
        for k in range(1, 5):
            dk = traj.derivative(0.0, k).copy()
            dk[2] = 0.0
            if np.linalg.norm(dk) > 1e-6:
                d = dk
                break
    if d is None and fallback is not None:
        d = np.array(fallback, dtype=float).reshape(3)
        d[2] = 0.0
    if d is None or np.linalg.norm(d) < 1e-9:
        d = np.array([1.0, 0.0, 0.0])
    return FlatnessCache.from_rotation(hover_attitude(d))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def smooth_hinge(x, mu):
    """C2 relaxation of max(x, 0): cubic on (0, mu), linear beyond. Returns (value, slope)."""
    x = np.asarray(x, dtype=float)
    val = np.zeros_like(x)
    der = np.zeros_like(x)
    mid = (x > 0) & (x < mu)
    hi = x >= mu
    xm = x[mid] / mu
    val[mid] = (mu - 0.5 * x[mid]) * xm**3
    der[mid] = 3 * xm**2 - 2 * xm**3
    val[hi] = x[hi] - 0.5 * mu
    der[hi] = 1.0
    return val, der


def interleave(problem, ctrl):
    """Point sequence: control points of each gap followed by the gap's closing waypoint."""
    ctrl = np.asarray(ctrl, dtype=float).reshape(problem.n_gaps, problem.n_ctrl, 3)
    rows = []
    for g in range(problem.n_gaps):
        rows.extend(ctrl[g])
        if g < len(problem.waypoints):
            rows.append(problem.waypoints[g])
    return np.array(rows).reshape(-1, 3)


def _free_index(problem):
    """Positions of the free control points inside the interleaved sequence."""
    idx = []
    pos = 0
    for g in range(problem.n_gaps):
        idx.extend(range(pos, pos + problem.n_ctrl))
        pos += problem.n_ctrl + 1
    return np.array(idx, dtype=int)


def pack(D, T):
    return np.concatenate([np.asarray(D, float).reshape(-1), softplus_inv(T)])


def unpack(problem, x):
    nf = 3 * problem.n_free
    D = x[:nf].reshape(-1, 3)
    tau = x[nf:]
    return D, softplus(tau), tau


def _gap_penalty_grad(v, a, problem, h=1e-6):
    """Finite-difference gradient of the root-gap penalty with respect to (v, a)."""
    def gap(vv, aa):
        return _root_gap(vv, aa, problem)
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (gap(v + e[:3], a + e[3:]) - gap(v - e[:3], a - e[3:])) / (2 * h)
    return g


def _root_gap(v, a, problem):
    m = problem.model
    v_a = v - problem.wind
    sp = a - G_VEC
    V = np.linalg.norm(v_a)
    sn = np.linalg.norm(sp)
    if V == 0 or m.rho * m.S == 0:
        return 0.0
    gamma = np.arctan2(np.linalg.norm(np.cross(v_a, sp)), v_a @ sp)
    h = 2.0 * m.mass * sn / (m.rho * m.S * V * V)
    return alpha_root_gap(h, gamma, m)


def objective_and_gradient(problem, D, T):
    """Cost J and its gradients with respect to control points D (n_free, 3) and durations T."""
    D = np.asarray(D, dtype=float).reshape(-1, 3)
    T = np.asarray(T, dtype=float)
    sysm = MincoSystem(problem.start, problem.end, T)
    pts = interleave(problem, D)
    coeffs = sysm.solve(pts)
    M = len(T)
    K = problem.quad
    frac = np.arange(K + 1) / K
    tl = frac[None, :] * T[:, None]                           # (M, K+1)
    Bs = [basis(tl, d) for d in range(5)]                     # (M, K+1, 8)
    P = [np.einsum("mkb,mbj->mkj", B, coeffs) for B in Bs]   # p, v, a, j, s
    tw = np.full(K + 1, 1.0 / K)
    tw[0] = tw[-1] = 0.5 / K
    wts = tw[None, :] * T[:, None]                            # trapezoid weights

    n = M * (K + 1)
    v, a, j, s = (P[d].reshape(n, 3) for d in (1, 2, 3, 4))
    traj = FlatTrajectory(coeffs, T)
    ref = transform_batch(v, a, j, s, problem.initial_cache(traj), problem.model,
                          problem.planner_config(), wind=problem.wind, gradients=True,
                          on_error="mask")
    u = ref.u()
    valid = ref.valid
    L = np.zeros(n)
    gu = np.zeros((n, 4))        # dL/du
    gv = np.zeros((n, 3))        # direct dL/dv
    ga = np.zeros((n, 3))        # direct dL/da

    # input effort and bounds
    L += np.where(valid, u**2 @ problem.W, 0.0)
    gu += 2 * problem.W * u
    hi_val, hi_der = smooth_hinge(u - problem.u_max, problem.mu)
    lo_val, lo_der = smooth_hinge(problem.u_min - u, problem.mu)
    L += np.where(valid, problem.w_input * (hi_val + lo_val).sum(1), 0.0)
    gu += problem.w_input * (hi_der - lo_der)
    gu[~valid] = 0.0

    # speed bound
    vv_val, vv_der = smooth_hinge(np.sum(v * v, 1) - problem.v_max**2, problem.mu)
    L += problem.w_vel * vv_val
    gv += (problem.w_vel * 2 * vv_der)[:, None] * v

    # specific-acceleration margin
    sp = a - G_VEC
    ss_val, ss_der = smooth_hinge(problem.eps**2 - np.sum(sp * sp, 1), problem.mu)
    L += problem.w_sing * ss_val
    ga += (-problem.w_sing * 2 * ss_der)[:, None] * sp

    # flatness chain rule: grad is d(a_T, omega)/d(v, a, jerk)
    gflat = np.einsum("ni,nik->nk", gu, ref.grad)
    gv += gflat[:, 0:3]
    ga += gflat[:, 3:6]
    gj = gflat[:, 6:9]

    # transform failures
    for err in ref.errors:
        i = err.index
        if isinstance(err, NoRootError):
            gap = _root_gap(v[i], a[i], problem)
            L[i] += 1e6 * gap
            g6 = 1e6 * _gap_penalty_grad(v[i], a[i], problem)
            gv[i] += g6[:3]
            ga[i] += g6[3:]
        else:
            L[i] += 1e6

    L = L.reshape(M, K + 1)
    gP = [gv.reshape(M, K + 1, 3), ga.reshape(M, K + 1, 3), gj.reshape(M, K + 1, 3)]
    J = float(np.sum(wts * L) + problem.rho * np.sum(T))
    if problem.w_snap > 0:
        E, dE_dc, dE_dT = snap_energy(coeffs, T)
        J += problem.w_snap * float(np.sum(E))

    # gradient with respect to coefficients
    dJ_dc = np.zeros_like(coeffs)
    for d, g in zip((1, 2, 3), gP):
        dJ_dc += np.einsum("mk,mkb,mkj->mbj", wts, Bs[d], g)
    if problem.w_snap > 0:
        dJ_dc += problem.w_snap * dE_dc
    lam, dpts = sysm.adjoint(dJ_dc)
    dT = sysm.time_gradient(lam, coeffs)
    # explicit dependence: quadrature weights and node positions move with T
    dT += np.sum(tw[None, :] * L, 1) + problem.rho
    if problem.w_snap > 0:
        dT += problem.w_snap * dE_dT
    for d, g in zip((1, 2, 3), gP):
        dT += np.einsum("mk,k,mkj,mkj->m", wts, frac, g, P[d + 1])
    dD = dpts[_free_index(problem)]
    return J, dD, dT


@dataclass
class PlanResult:
    trajectory: FlatTrajectory
    J: float
    converged: bool
    iterations: int
    evaluations: int
    message: str
    runtime: float
    trace: list
    residuals: dict


def seed_problem(problem, speed=None):
    """Straight-line seed: control points evenly spaced along the waypoint polyline."""
    pts = np.vstack([problem.start[0], problem.waypoints, problem.end[0]])
    if speed is None:
        vb = max(np.linalg.norm(problem.start[1]), np.linalg.norm(problem.end[1]))
        speed = max(0.5 * problem.v_max, vb)
    D, T = [], []
    for g in range(problem.n_gaps):
        p0, p1 = pts[g], pts[g + 1]
        for k in range(1, problem.n_ctrl + 1):
            D.append(p0 + (p1 - p0) * k / (problem.n_ctrl + 1))
        dist = np.linalg.norm(p1 - p0)
        Tg = max(2.0 * dist / speed, 0.0) + 1.0
        T.extend([Tg / (problem.n_ctrl + 1)] * (problem.n_ctrl + 1))
    return np.array(D).reshape(-1, 3), np.array(T)


def build_from(problem, D, T):
    sysm = MincoSystem(problem.start, problem.end, T)
    return FlatTrajectory(sysm.solve(interleave(problem, D)), np.asarray(T, float))


def penalty_residuals(problem, traj, rate=1000.0):
    """Worst bound violations on a dense resampling (0 when satisfied)."""
    n = max(int(np.ceil(traj.total_duration * rate)), 1) + 1
    times = np.linspace(0.0, traj.total_duration, n)
    p, v, a, j, s = traj.sample(times)
    ref = transform_batch(v, a, j, s, problem.initial_cache(traj), problem.model,
                          problem.planner_config(),
                          wind=problem.wind, on_error="mask")
    u = ref.u()[ref.valid]
    speed = np.linalg.norm(v, axis=1)
    spn = np.linalg.norm(a - G_VEC, axis=1)
    over = np.max(np.maximum(u - problem.u_max, problem.u_min - u), axis=0) if len(u) else np.zeros(4)
    return {
        "max_speed": float(speed.max()),
        "speed_violation": float(max(speed.max() - problem.v_max, 0.0)),
        "thrust_violation": float(max(over[0], 0.0)),
        "rate_violation": float(max(np.max(over[1:]), 0.0)),
        "min_specific_accel": float(spn.min()),
        "invalid_samples": int(np.count_nonzero(~ref.valid)),
    }


def optimize(problem, seed=None, max_iter=3000, rel_tol=1e-5, memory=10):
    """L-BFGS over (control points, softplus durations); returns a PlanResult."""
    t0 = time.perf_counter()
    if seed is None:
        D0, T0 = seed_problem(problem)
    else:
        D0, T0 = seed
    x0 = pack(D0, T0)
    nf = 3 * problem.n_free

    def fun(x):
        D, T, tau = unpack(problem, x)
        if np.any(T < 1e-3):
            return np.inf, np.zeros_like(x)
        J, dD, dT = objective_and_gradient(problem, D, T)
        g = np.empty_like(x)
        g[:nf] = dD.reshape(-1)
        g[nf:] = dT * softplus_grad(tau)
        return J, g

    res = lbfgs(fun, x0, memory=memory, max_iter=max_iter, rel_tol=rel_tol)
    D, T, _ = unpack(problem, res.x)
    traj = build_from(problem, D, T)
    return PlanResult(traj, float(res.f), res.converged, res.iterations, res.evaluations,
                      res.message, time.perf_counter() - t0, res.trace,
                      penalty_residuals(problem, traj))


def rest_to_rest(p0, p1, **kw):
    """Convenience constructor for a hover-to-hover problem."""
    return PlanningProblem(rest_state(p0), rest_state(p1), **kw)
