"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from oracles import (Loiter, Poly, cofactor_det, fd_jacobian, random_samples, rel_err,
                     roundtrip_error)

from tailsitter.aero import AeroModel, aero_force_body, aero_force_jacobian
from tailsitter.dynamics import G_VEC
from tailsitter.flatness import (Branch, FlatnessCache, FlatSample, flatness_gradients,
                                 flatness_transform, transform_batch)
from tailsitter.harness import ScenarioConfig, builtin_path, plan_scenario, run_closed_loop
from tailsitter.mpc import error_dynamics, linearize
from tailsitter.planning import optimize, seed_problem
from tailsitter.planning.objective import objective_and_gradient, rest_to_rest

MODEL = AeroModel()
INDOOR_Q = [1800, 1800, 1800, 5, 5, 5, 50, 50, 50]
TRACKING_R = [0.3, 0.4, 0.4, 0.4]


def flying_cache():
    return FlatnessCache(np.array([0, 1.0, 0]), np.array([0, 0, 1.0]), 0.3, Branch.COORDINATED)


def scenario(name, **overrides):
    with open(builtin_path(name)) as f:
        d = json.load(f)
    d.update(overrides)
    return ScenarioConfig.from_dict(d)


@pytest.fixture(scope="module")
def hover_run():
    cfg = scenario("hover_step", mpc={"Q": INDOOR_Q, "R": TRACKING_R, "N": 12})
    t0 = time.perf_counter()
    log, metrics = run_closed_loop(cfg, plan_scenario(cfg))
    return cfg, log, metrics, time.perf_counter() - t0


@pytest.fixture(scope="module")
def traverse_run():
    cfg = scenario("window_traverse")
    planned = plan_scenario(cfg)
    log, metrics = run_closed_loop(cfg, planned)
    return cfg, planned, log, metrics


def test_01_flatness_round_trip(verdict):
    t0 = time.perf_counter()
    err, ref = roundtrip_error(Loiter(20.0, 10.0), MODEL, flying_cache())
    runtime = time.perf_counter() - t0
    ok = err < 1e-3 and runtime < 5.0
    verdict(1, "flatness round trip", ok,
            f"terminal error {err:.2e} m (< 1e-3), runtime {runtime:.2f} s (< 5)")
    assert ok


def test_02_determinant_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = {}
    for kind, branch in (("coordinated", Branch.COORDINATED), ("low", Branch.LOW_AIRSPEED),
                         ("small_gamma", Branch.SMALL_GAMMA)):
        errs = []
        while len(errs) < 1000:
            v, a, j, s = random_samples(rng, 1, kind)
            zf = rng.normal(size=3)
            cache = FlatnessCache(np.array([0, 1.0, 0]), zf / np.linalg.norm(zf), 0.0,
                                  Branch.COORDINATED)
            ref = transform_batch(v[0], a[0], j[0], s[0], cache, MODEL, on_error="mask")
            if ref.valid[0] and ref.branch[0] == branch:
                errs.append(rel_err(ref.det[0], cofactor_det(ref.N[0])))
        worst[kind] = max(errs)
    ok = max(worst.values()) < 1e-9
    verdict(2, "determinant oracles", ok, "max rel error " + ", ".join(
        f"{k} {e:.1e}" for k, e in worst.items()) + " over 1000 states each (< 1e-9)")
    assert ok


def test_03_force_jacobian(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        # the Jacobian is defined at zero sideslip; alpha covers the full circle and the FD
        # oracle uses the full-sideslip force, so the lateral column is checked as well
        V, alpha = rng.uniform(0.5, 30.0), rng.uniform(-np.pi, np.pi)
        v = V * np.array([np.cos(alpha), 0.0, np.sin(alpha)])
        J = aero_force_jacobian(v, MODEL)
        fd = fd_jacobian(lambda x: aero_force_body(x, MODEL), v)
        worst = max(worst, rel_err(J, fd))
    ok = worst < 1e-6
    verdict(3, "force Jacobian", ok, f"max rel error {worst:.1e} over 1000 states (< 1e-6)")
    assert ok


def _rate_blocks_error(sample_at, ts, cache_fn, branch, wind_at=None, h=1e-5):
    worst = 0.0
    for t in ts:
        r = [flatness_transform(sample_at(tt), None if wind_at is None else wind_at(tt),
                                cache_fn(), MODEL) for tt in (t - h, t, t + h)]
        assert all(x.branch == branch for x in r)
        worst = max(worst, rel_err(r[1].N_dot, (r[2].N - r[0].N) / (2 * h)),
                    rel_err(r[1].h_dot, (r[2].h - r[0].h) / (2 * h)))
    return worst


def test_04_rate_matrix_derivatives(verdict):
    ts = np.linspace(0.1, 1.5, 8)
    worst = {"coordinated": _rate_blocks_error(Loiter(20.0, 10.0).sample, ts, flying_cache,
                                               Branch.COORDINATED)}
    turn = Poly([[0.0, 0.2, 8.0, 0], [0.3, 0.8, 0.0, 0], [0.0, -0.2, 0.3, -10]])
    worst["coordinated"] = max(worst["coordinated"], _rate_blocks_error(
        turn.sample, ts, flying_cache, Branch.COORDINATED))
    slow = Poly([[0.05, -0.1, 0.2, 0], [-0.03, 0.1, 0, 0], [0.02, 0.05, -0.1, -2]])
    worst["low"] = _rate_blocks_error(slow.sample, [0.3, 0.7, 1.1], FlatnessCache,
                                      Branch.LOW_AIRSPEED)
    # wind keeps the air velocity parallel to the special acceleration
    climb = Poly([[0.1, 0.3, 2.0, 0], [-0.2, 0.5, 1.0, 0], [0.05, -0.4, -3.0, 0]])

    def wind_at(t):
        p, v, a, j, s = climb.derivs(t)
        return (v - 0.4 * (a - G_VEC), a - 0.4 * j, j - 0.4 * s)

    zf = np.array([1.0, 0.0, 0.0])
    worst["small_gamma"] = _rate_blocks_error(climb.sample, [0.2, 0.6, 0.9],
                                              lambda: FlatnessCache(z_b_fix=zf),
                                              Branch.SMALL_GAMMA, wind_at)
    ok = max(worst.values()) < 1e-5
    verdict(4, "N_dot / h_dot blocks", ok, "max rel error " + ", ".join(
        f"{k} {e:.1e}" for k, e in worst.items()) + " (< 1e-5)")
    assert ok


def test_05_flatness_gradients(verdict):
    rng = np.random.default_rng(5)
    worst, n = 0.0, 0
    while n < 100:
        v, a, j, s = random_samples(rng, 1, "coordinated")
        ref = transform_batch(v[0], a[0], j[0], s[0], flying_cache(), MODEL, on_error="mask")
        if not ref.valid[0] or ref.branch[0] != Branch.COORDINATED:
            continue

        def U(P):
            r = transform_batch(P[0:3], P[3:6], P[6:9], s[0], flying_cache(), MODEL)
            return np.concatenate([r.a_T, r.omega[0]])

        G = flatness_gradients(FlatSample(np.zeros(3), v[0], a[0], j[0], s[0]), None,
                               flying_cache(), MODEL)
        worst = max(worst, rel_err(G, fd_jacobian(U, np.concatenate([v[0], a[0], j[0]]))))
        n += 1
    ok = worst < 1e-5
    verdict(5, "flatness gradients", ok, f"max rel error {worst:.1e} on 100 states (< 1e-5)")
    assert ok


def test_06_planner_gradient_and_convergence(verdict):
    pb = rest_to_rest([0, 0, 0], [12, 4, -3], n_ctrl=2, rho=100.0)
    D, T = seed_problem(pb)
    D = D + np.random.default_rng(6).normal(size=D.shape) * 0.3
    J, dD, dT = objective_and_gradient(pb, D, T)
    x = np.concatenate([D.reshape(-1), T])

    def f(xx):
        return np.array([objective_and_gradient(pb, xx[:D.size].reshape(-1, 3), xx[D.size:])[0]])

    g_err = rel_err(np.concatenate([dD.reshape(-1), dT]), fd_jacobian(f, x)[0])
    res = optimize(pb)
    ok = (g_err < 1e-4 and res.converged and res.message == "gradient tolerance reached"
          and res.iterations < 3000 and res.runtime < 10.0)
    verdict(6, "planner gradient", ok,
            f"FD rel error {g_err:.1e} (< 1e-4); converged={res.converged} "
            f"({res.message}) in {res.iterations} iterations, {res.runtime:.2f} s")
    assert ok


def test_07_mpc_linearization(verdict):
    rng = np.random.default_rng(7)
    worst, ratios, n = 0.0, [], 0
    while n < 20:
        w = rng.uniform(-5, 5, 3)
        v, a, j, s = random_samples(rng, 1, "coordinated")
        ref = transform_batch(v[0] + w, a[0], j[0], s[0], flying_cache(), MODEL, wind=w,
                              on_error="mask")
        if not ref.valid[0] or ref.branch[0] != Branch.COORDINATED:
            continue
        r = ref.sample(0)
        sys = linearize(r, MODEL, w)
        Fx = fd_jacobian(lambda dx: error_dynamics(dx, np.zeros(4), r, MODEL, w, w), np.zeros(9))
        Fu = fd_jacobian(lambda du: error_dynamics(np.zeros(9), du, r, MODEL, w, w), np.zeros(4))
        worst = max(worst, rel_err(sys.F_x, Fx), rel_err(sys.F_u, Fu))
        d = rng.normal(size=13)
        d /= np.linalg.norm(d)

        def resid(e):
            return np.linalg.norm(error_dynamics(e * d[:9], e * d[9:], r, MODEL, w, w)
                                  - sys.F_x @ (e * d[:9]) - sys.F_u @ (e * d[9:]))

        ratios.append(resid(1e-2) / resid(5e-3))
        n += 1
    ok = worst < 1e-4 and all(3.5 <= q <= 4.5 for q in ratios)
    verdict(7, "MPC linearization", ok,
            f"max FD rel error {worst:.1e} (< 1e-4); residual ratio in "
            f"[{min(ratios):.3f}, {max(ratios):.3f}] (expected 4)")
    assert ok


def test_08_closed_loop_regulation(verdict, hover_run):
    cfg, log, m, runtime = hover_run
    after = log.t >= 5.0
    late = np.linalg.norm(log.p_d[after] - log.p[after], axis=1).max()
    ok = (late < 0.01 and m.bound_violations == 0 and not m.diverged and runtime < 30.0
          and np.array_equal(cfg.mpc.Q, INDOOR_Q) and cfg.mpc.N == 12)
    verdict(8, "closed-loop regulation", ok,
            f"max error after 5 s {late * 1000:.2f} mm (< 10), bound violations "
            f"{m.bound_violations}, runtime {runtime:.1f} s (< 30)")
    assert ok


def test_09_window_traverse(verdict, traverse_run):
    cfg, planned, log, m = traverse_run
    ev = m.events["window_0"]
    att = np.degrees(ev["attitude_error"])
    ok = ev["position_error"] < 0.15 and att < 7.0 and not m.diverged
    verdict(9, "SE(3) window traverse", ok,
            f"error at traverse {ev['position_error'] * 100:.2f} cm (< 15), {att:.3f} deg (< 7)")
    assert ok


def test_10_mpc_solve_time(verdict, hover_run, traverse_run):
    times = np.concatenate([hover_run[1].mpc["solve_time"], traverse_run[2].mpc["solve_time"]])
    mean, peak = times.mean(), times.max()
    ok = mean < 0.01 and hover_run[0].mpc.N == traverse_run[0].mpc.N == 12
    verdict(10, "MPC solve time", ok,
            f"mean {mean * 1e3:.3f} ms (< 10), max {peak * 1e3:.3f} ms over {len(times)} solves")
    assert ok


def test_11_wind_compensation(verdict):
    base = scenario("loiter")
    assert np.allclose(base.wind_field().w(0.0), [6, 0, 0])
    rms = {}
    for comp in (True, False):
        cfg = base.with_overrides(compensation=comp)
        _, m = run_closed_loop(cfg, plan_scenario(cfg))
        rms[comp] = m.rms_lateral_airspeed
    reduction = 1.0 - rms[True] / rms[False]
    ok = reduction >= 0.5
    verdict(11, "wind compensation", ok,
            f"RMS lateral airspeed {rms[True]:.4f} m/s with vs {rms[False]:.4f} m/s without, "
            f"reduction {reduction * 100:.1f}% (>= 50%)")
    assert ok
