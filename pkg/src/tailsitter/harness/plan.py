"""Scenario planning: boundary states, per-piece optimization and the reference stream."""

from dataclasses import dataclass, field

import numpy as np

from ..flatness import FlatnessConfig, FlatnessError, transform_batch
from ..planning import (FlatTrajectory, MincoSystem, NotConverged, PlanningProblem, TraverseSpec,
                        optimize, rest_state, start_cache, traverse_boundary_state)
from ..planning.minco import ORDER

DEFAULT_PLANNER = {
    "rho": 100.0, "W": [0.1, 1.0, 1.0, 1.0], "v_max": 12.0, "a_T_min": 6.0, "a_T_max": 16.0,
    "omega_max_deg": 200.0, "n_ctrl": 2, "eps": 0.1, "max_iter": 3000, "rel_tol": 1e-5,
}


class FlatnessAbort(RuntimeError):
    """The flatness transform failed while generating the reference stream."""

    def __init__(self, msg, t=None):
        super().__init__(msg)
        self.t = t


@dataclass
class PlannedScenario:
    trajectory: FlatTrajectory
    events: dict = field(default_factory=dict)     # name -> time, e.g. window crossings
    pieces: list = field(default_factory=list)     # PlanResult per optimized piece
    start_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cache: object = None                           # attitude memory at t = 0

    @property
    def duration(self):
        return self.trajectory.total_duration


def planner_settings(cfg):
    s = dict(DEFAULT_PLANNER)
    s.update(cfg.planner)
    return s


def _problem(cfg, start, end, waypoints=None, cache=None, w_bar=np.zeros(3)):
    s = planner_settings(cfg)
    om = np.deg2rad(s["omega_max_deg"])
    return PlanningProblem(start, end, waypoints=waypoints, n_ctrl=int(s["n_ctrl"]), W=s["W"],
                           rho=float(s["rho"]), v_max=float(s["v_max"]),
                           u_min=[s["a_T_min"], -om, -om, -om],
                           u_max=[s["a_T_max"], om, om, om], eps=float(s["eps"]),
                           wind=w_bar, model=cfg.model, cache=cache)


def _optimize(cfg, problem, label):
    s = planner_settings(cfg)
    res = optimize(problem, max_iter=int(s["max_iter"]), rel_tol=float(s["rel_tol"]))
    if not res.converged:
        err = NotConverged(f"planner did not converge on {label}: {res.message}; "
                           f"residuals {res.residuals}")
        err.result = res
        raise err
    return res


def _end_cache(problem, traj, rate=200.0):
    """Attitude memory after running the planner's transform along a piece."""
    cache = problem.initial_cache(traj)
    n = max(int(np.ceil(traj.total_duration * rate)), 1) + 1
    _, v, a, j, s = traj.sample(np.linspace(0.0, traj.total_duration, n))
    transform_batch(v, a, j, s, cache, problem.model, problem.planner_config(),
                    wind=problem.wind, on_error="mask")
    return cache


def _chain(cfg, states, waypoints, labels, w_bar):
    """Optimize consecutive pieces between boundary states, carrying attitude memory."""
    pieces, trajs, cache, first = [], [], None, None
    for i in range(len(states) - 1):
        problem = _problem(cfg, states[i], states[i + 1], waypoints[i], cache, w_bar)
        res = _optimize(cfg, problem, labels[i])
        if first is None:
            first = problem.initial_cache(res.trajectory)
        cache = _end_cache(problem, res.trajectory)
        pieces.append(res)
        trajs.append(res.trajectory)
    traj = trajs[0]
    for t in trajs[1:]:
        traj = traj.concatenate(t)
    return traj, pieces, first


def _polynomial(p0, v0, duration):
    coeffs = np.zeros((1, ORDER, 3))
    coeffs[0, 0] = p0
    coeffs[0, 1] = v0
    return FlatTrajectory(coeffs, np.array([float(duration)]))


def _circle(center, radius, speed, laps, per_lap, sign, phase):
    """C^6 MINCO chain through equally timed points of a horizontal circle."""
    center = np.asarray(center, dtype=float)
    w = sign * speed / radius
    period = 2.0 * np.pi / abs(w)
    M = max(int(round(laps * per_lap)), 1)
    T = np.full(M, laps * period / M)
    times = np.concatenate([[0.0], np.cumsum(T)])

    def deriv(t, k):
        ang = phase + w * t
        c, s = np.cos(ang + k * np.pi / 2), np.sin(ang + k * np.pi / 2)
        out = radius * w**k * np.array([c, s, 0.0])
        return out + (center if k == 0 else 0.0)

    start = np.array([deriv(0.0, k) for k in range(4)])
    end = np.array([deriv(times[-1], k) for k in range(4)])
    pts = np.array([deriv(t, 0) for t in times[1:-1]]).reshape(-1, 3)
    return FlatTrajectory(MincoSystem(start, end, T).solve(pts), T), deriv


def _moving_state(p, v, a=None):
    s = np.zeros((4, 3))
    s[0], s[1] = p, v
    if a is not None:
        s[2] = a
    return s


def plan_scenario(cfg):
    """Assemble boundary states, optimize each piece and concatenate the result.

    Raises NotConverged (with the PlanResult attached) when a piece fails.
    """
    m = cfg.maneuver
    kind = m["kind"]
    w_bar = cfg.wind_field().w(0.0) if cfg.wind_compensation else np.zeros(3)
    if kind == "hover_step":
        p0 = np.asarray(m.get("position", [0.0, 0.0, 0.0]), dtype=float)
        dur = cfg.duration if cfg.duration is not None else float(m.get("duration", 10.0))
        traj = _polynomial(p0, np.zeros(3), max(dur, 1e-3))
        cache = start_cache(None, m.get("heading", [1.0, 0.0, 0.0]))
        return PlannedScenario(traj, start_offset=np.asarray(m.get("offset", [1.0, 0, 0]), float),
                               cache=cache)
    if kind == "straight_line":
        d = np.asarray(m.get("direction", [1.0, 0.0, 0.0]), dtype=float)
        d /= np.linalg.norm(d)
        v = float(m["speed"]) * d
        cruise = _polynomial(np.asarray(m.get("start", [0, 0, 0]), float), v,
                             float(m.get("cruise_time", 4.5)))
        if not m.get("transitions", False):
            return PlannedScenario(cruise, events={"cruise_start": 0.0,
                                                   "cruise_end": cruise.total_duration})
        a = cruise.boundary()
        b = cruise.boundary(end=True)
        lead = float(m.get("transition_distance", 10.0))
        A = rest_state(a[0] - lead * d)
        C = rest_state(b[0] + lead * d)
        t1, p1, c1 = _chain(cfg, [A, a], [None], ["forward transition"], w_bar)
        t3, p3, _ = _chain(cfg, [b, C], [None], ["backward transition"], w_bar)
        traj = t1.concatenate(cruise).concatenate(t3)
        T1 = t1.total_duration
        return PlannedScenario(traj, {"cruise_start": T1, "cruise_end": T1 + cruise.total_duration},
                               p1 + p3, cache=c1)
    if kind == "loiter":
        traj, _ = _circle(m.get("center", [0.0, 0.0, -20.0]), float(m["radius"]),
                          float(m["speed"]), float(m.get("laps", 1.0)),
                          int(m.get("points_per_lap", 16)), 1.0 if m.get("clockwise", True) else -1.0,
                          np.deg2rad(float(m.get("phase_deg", 0.0))))
        return PlannedScenario(traj, cache=start_cache(traj))
    if kind == "window_traverse":
        specs = [TraverseSpec.from_dict(w) for w in m["windows"]]
        s = planner_settings(cfg)
        states = [rest_state(m["start"])]
        for spec in specs:
            state, _, _ = traverse_boundary_state(spec, cfg.model, (s["a_T_min"], s["a_T_max"]),
                                                  w_bar)
            states.append(state)
        states.append(rest_state(m["goal"]))
        labels = [f"piece {i}" for i in range(len(states) - 1)]
        wps = m.get("waypoints") or [None] * (len(states) - 1)
        traj, pieces, cache = _chain(cfg, states, wps, labels, w_bar)
        ends = np.cumsum([p.trajectory.total_duration for p in pieces])
        events = {f"window_{i}": float(ends[i]) for i in range(len(specs))}
        return PlannedScenario(traj, events, pieces, cache=cache)
    # aerobatic: boundary points with optional per-piece waypoints
    pts = m["boundary"]
    states = []
    for b in pts:
        if "v" in b:
            states.append(_moving_state(b["p"], b["v"], b.get("a")))
        else:
            states.append(rest_state(b["p"]))
    wps = m.get("waypoints") or [None] * (len(states) - 1)
    labels = [b.get("label", f"point {i}") for i, b in enumerate(pts[1:])]
    traj, pieces, cache = _chain(cfg, states, wps, labels, w_bar)
    ends = np.concatenate([[0.0], np.cumsum([p.trajectory.total_duration for p in pieces])])
    events = {b.get("label", f"point {i}"): float(ends[i]) for i, b in enumerate(pts)}
    return PlannedScenario(traj, events, pieces, cache=cache)


def surrogate_wind(cfg, times):
    """w_bar(t) rows: the true wind when compensation is on, else zero."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if not cfg.wind_compensation:
        return np.zeros((len(times), 3)), np.zeros((len(times), 3)), np.zeros((len(times), 3))
    field_ = cfg.wind_field()
    w = np.array([field_.w(t) for t in times])
    wd = np.array([field_.w_dot(t) for t in times])
    wdd = np.array([field_.w_ddot(t) for t in times])
    return w, wd, wdd


def reference_stream(planned, cfg, rate=None, flat_config=None):
    """Flatness transform of the planned trajectory sampled at `rate` (default: sim rate)."""
    rate = 1.0 / cfg.sim_dt if rate is None else float(rate)
    traj = planned.trajectory
    n = int(np.floor(traj.total_duration * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    p, v, a, j, s = traj.sample(times)
    w, wd, wdd = surrogate_wind(cfg, times)
    cache = (planned.cache or start_cache(traj)).copy()
    try:
        return transform_batch(v, a, j, s, cache, cfg.model, flat_config or FlatnessConfig(),
                               wind=w, wind_dot=wd, wind_ddot=wdd, p=p, t=times)
    except FlatnessError as e:
        t = times[e.index] if getattr(e, "index", None) is not None else None
        raise FlatnessAbort(f"flatness transform failed at t={t}: {e}", t) from e


def planned_to_dict(planned):
    d = planned.trajectory.to_dict()
    c = planned.cache
    d.update({
        "events": planned.events,
        "start_offset": np.asarray(planned.start_offset, float).tolist(),
        "cache": None if c is None else {"y_b_prev": c.y_b_prev.tolist(),
                                         "z_b_fix": c.z_b_fix.tolist(),
                                         "alpha_prev": c.alpha_prev,
                                         "branch_prev": int(c.branch_prev)},
        "pieces": [{"converged": p.converged, "iterations": p.iterations, "J": p.J,
                    "message": p.message, "runtime": p.runtime, "residuals": p.residuals}
                   for p in planned.pieces],
    })
    return d


def planned_from_dict(d):
    from ..flatness import Branch, FlatnessCache
    c = d.get("cache")
    cache = None if c is None else FlatnessCache(
        np.asarray(c["y_b_prev"], float), np.asarray(c["z_b_fix"], float),
        float(c["alpha_prev"]), Branch(int(c["branch_prev"])))
    return PlannedScenario(FlatTrajectory.from_dict(d), dict(d.get("events", {})), [],
                           np.asarray(d.get("start_offset", [0, 0, 0]), float), cache)
