import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import (Loiter, Poly, cofactor_det, fd_jacobian, random_samples, rel_err,
                     roundtrip_error)

from tailsitter.aero import AeroModel, TableCoefficients, coeff_vector
from tailsitter.dynamics import G_VEC
from tailsitter.flatness import (Branch, DegenerateFixError, FlatnessCache, FlatnessConfig,
                                 FlatnessError, FlatSample, FreeFallError, NoRootError,
                                 SingularNError, attitude_and_thrust, compute_gamma,
                                 flatness_gradients, flatness_transform, model_acceleration,
                                 select_yb, small_gamma_psi23, solve_alpha, transform_batch,
                                 transform_low_airspeed, transform_small_gamma)
from tailsitter.so3 import E2, log_so3, skew

MODEL = AeroModel()
vec = arrays(np.float64, 3, elements=st.floats(-10, 10, allow_nan=False))


def flying_cache(alpha=0.3):
    return FlatnessCache(np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), alpha,
                         Branch.COORDINATED)


def level(V=10.0, jerk=(0, 0, 0)):
    return FlatSample(np.zeros(3), [V, 0, 0], np.zeros(3), jerk, np.zeros(3))


def table_model():
    a = np.linspace(-np.pi, np.pi, 73)
    return AeroModel(coeffs=TableCoefficients(
        a, 1.1 * np.sin(2 * a), 0.05 + 1.5 * np.sin(a) ** 2, -0.4 + 0.0 * a))


# ---------------------------------------------------------------- gamma and y_b

def test_gamma_parallel_and_perpendicular():
    assert compute_gamma([1, 0, 0], [3, 0, 0]) == 0.0
    assert np.isclose(compute_gamma([1, 0, 0], [0, 0, -2], r=1), np.pi / 2)
    with pytest.raises(FlatnessError):
        compute_gamma([0, 0, 0], [1, 0, 0])


@given(vec, vec, st.sampled_from([1.0, -1.0]))
def test_gamma_matches_arccos(v_a, sp, r):
    nv, ns = np.linalg.norm(v_a), np.linalg.norm(sp)
    if nv < 1e-3 or ns < 1e-3:
        return
    c = np.clip(v_a @ sp / (nv * ns), -1, 1)
    assert np.isclose(compute_gamma(v_a, sp, r), r * np.arccos(c), atol=1e-6)


def test_select_yb_examples():
    y, r = select_yb([1, 0, 0], [0, 0, -9.8], np.array([0, 1.0, 0]))
    assert np.allclose(y, [0, 1, 0]) and r == 1
    y, r = select_yb([1, 0, 0], [0, 0, -9.8], np.array([0, -1.0, 0]))
    assert np.allclose(y, [0, -1, 0]) and r == -1
    # tie: previous axis orthogonal to the normal
    y, r = select_yb([1, 0, 0], [0, 0, -9.8], np.array([1.0, 0, 0]))
    assert r == 1 and np.allclose(y, [0, 1, 0])
    with pytest.raises(FlatnessError):
        select_yb([1, 0, 0], [2, 0, 0], np.array([0, 1.0, 0]))


@given(vec, vec, vec)
def test_select_yb_continuity(v_a, sp, prev):
    if np.linalg.norm(np.cross(v_a, sp)) < 1e-6 or np.linalg.norm(prev) < 1e-6:
        return
    y, _ = select_yb(v_a, sp, prev)
    assert abs(np.linalg.norm(y) - 1) < 1e-12 and y @ prev >= -1e-12 * np.linalg.norm(prev)
    assert abs(y @ v_a) < 1e-9 * np.linalg.norm(v_a) and abs(y @ sp) < 1e-9 * np.linalg.norm(sp)


# ---------------------------------------------------------------- angle of attack

def residual(alpha, h, gamma, model):
    return h * np.sin(gamma - alpha) + coeff_vector(alpha, model).c[..., 2]


def test_alpha_symmetric_case():
    assert np.isclose(solve_alpha(2.0, np.pi / 2, 0.0, MODEL), np.pi / 4, atol=1e-12)


def test_alpha_weightless_limit():
    assert abs(solve_alpha(0.0, 0.3, 0.1, MODEL)) < 1e-12


def grid_bisection_root(h, gamma, model, near):
    grid = np.arange(-np.pi, np.pi, 1e-6)
    f = residual(grid, h, gamma, model)
    idx = np.flatnonzero(np.sign(f[:-1]) != np.sign(f[1:]))
    roots = 0.5 * (grid[idx] + grid[idx + 1])
    return roots[np.argmin(abs(roots - near))]


@pytest.mark.parametrize("model", [MODEL, table_model()], ids=["flat_plate", "table"])
def test_alpha_matches_grid_scan(model):
    a = solve_alpha(1.0, 0.5, 0.0, model)
    assert abs(residual(a, 1.0, 0.5, model)) < 1e-10
    assert abs(a - grid_bisection_root(1.0, 0.5, model, 0.0)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(-np.pi, np.pi), st.floats(-1.0, 1.0))
def test_alpha_residual_small(h, gamma, prev):
    for model in (MODEL, table_model()):
        try:
            a = solve_alpha(h, gamma, prev, model)
        except NoRootError:
            continue
        assert abs(residual(a, h, gamma, model)) < 1e-10 * max(1.0, h)


def test_alpha_rejects_negative_h():
    with pytest.raises(ValueError):
        solve_alpha(-1.0, 0.0, 0.0, MODEL)


def test_alpha_no_root():
    # c_z = -2 - 2 sin(alpha); with h = 0.5, gamma = pi: F = -2 - 1.5 sin(alpha) < 0
    a = np.linspace(-np.pi, np.pi, 361)
    model = AeroModel(coeffs=TableCoefficients(a, 2 * np.cos(a), 2 + 2 * np.sin(a), 0 * a))
    assert np.max(residual(np.linspace(-np.pi, np.pi, 10001), 0.5, np.pi, model)) < -0.4
    with pytest.raises(NoRootError) as exc:
        solve_alpha(0.5, np.pi, 0.0, model)
    assert exc.value.gap > 0.4


# ---------------------------------------------------------------- attitude, thrust, rates

def test_level_flight_balance():
    ref = flatness_transform(level(), None, flying_cache(), MODEL)
    assert ref.branch == Branch.COORDINATED
    # flat plate: thrust along x_b plus body-z force -2 q sin(a) must cancel gravity
    q = MODEL.half_rho_S * 100
    a = ref.alpha
    thrust_world = ref.a_T * ref.R[:, 0] + ref.R @ np.array([0, 0, -2 * q * np.sin(a)]) / MODEL.mass
    assert np.allclose(thrust_world + G_VEC, 0, atol=1e-8)
    assert np.linalg.norm(model_acceleration(ref, MODEL) - np.zeros(3)) < 1e-8
    assert np.allclose(ref.omega, 0, atol=1e-12) and abs(ref.a_T_dot) < 1e-12
    assert np.allclose(ref.omega_dot, 0, atol=1e-12) and np.allclose(ref.tau, 0, atol=1e-12)


def test_attitude_zero_alpha():
    s = level()
    R, a_T = attitude_and_thrust(s, np.array([10.0, 0, 0]), 0.0, 0.0, E2, MODEL)
    assert np.allclose(R[:, 0], [1, 0, 0]) and np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
    assert np.isclose(a_T, 0.0)  # sp = -g is orthogonal to x_b


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coordinated_invariants(seed):
    rng = np.random.default_rng(seed)
    v, a, j, s = random_samples(rng, 1, "coordinated")
    w = rng.uniform(-4, 4, 3)
    ref = transform_batch(v, a, j, s, flying_cache(), MODEL, wind=w, on_error="mask")
    if not ref.valid[0] or ref.branch[0] != Branch.COORDINATED:
        return
    r = ref.sample(0)
    R = r.R
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12 and abs(np.linalg.det(R) - 1) < 1e-12
    # zero sideslip
    assert abs(E2 @ R.T @ (r.v - w)) < 1e-9 * max(1, np.linalg.norm(r.v - w))
    # defining equation
    assert np.linalg.norm(model_acceleration(r, MODEL, w) - a[0]) < 1e-8
    # lateral rate constraint
    va_dot = a[0]
    lat = -(r.v - w) @ R @ skew(E2) @ r.omega + R[:, 1] @ va_dot
    assert abs(lat) < 1e-8 * max(1, np.linalg.norm(va_dot))
    # linear-solve residual
    b = np.concatenate([[r.a_T_dot], r.omega])
    assert np.linalg.norm(r.N @ b - r.h) < 1e-10 * max(1, np.linalg.norm(r.h))


@pytest.mark.parametrize("kind,branch", [("coordinated", Branch.COORDINATED),
                                         ("low", Branch.LOW_AIRSPEED),
                                         ("small_gamma", Branch.SMALL_GAMMA)])
def test_closed_form_determinants(kind, branch):
    rng = np.random.default_rng(11)
    v, a, j, s = random_samples(rng, 300, kind)
    checked = 0
    for i in range(len(v)):
        zf = rng.normal(size=3)
        cache = FlatnessCache(np.array([0, 1.0, 0]), zf / np.linalg.norm(zf), 0.0,
                              Branch.COORDINATED)
        ref = transform_batch(v[i], a[i], j[i], s[i], cache, MODEL, on_error="mask")
        if not ref.valid[0] or ref.branch[0] != branch:
            continue
        assert rel_err(ref.det[0], cofactor_det(ref.N[0])) < 1e-9
        checked += 1
    assert checked > 250


def test_small_gamma_psi23_factorization():
    rng = np.random.default_rng(5)
    v, a, j, s = random_samples(rng, 50, "small_gamma")
    for i in range(50):
        zf = np.array([1.0, 0.3, 0.0]) / np.linalg.norm([1.0, 0.3, 0.0])
        ref = transform_batch(v[i], a[i], j[i], s[i], FlatnessCache(z_b_fix=zf), MODEL,
                              on_error="mask")
        if not ref.valid[0]:
            continue
        r = ref.sample(0)
        sp = a[i] - G_VEC
        V = np.linalg.norm(r.v_a)
        co = coeff_vector(r.alpha, MODEL)
        psi32 = (-np.linalg.norm(sp) * np.cos(r.gamma - r.alpha)
                 + MODEL.half_rho_S * V**2 / MODEL.mass * co.dc[2])
        k_fix = np.linalg.norm(np.cross(zf, sp))
        psi23 = small_gamma_psi23(sp, r.alpha, r.gamma, V, MODEL)
        assert rel_err(psi32 * k_fix * psi23, cofactor_det(r.N)) < 1e-9


def test_hover_low_airspeed():
    hover = FlatSample(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    ref = transform_low_airspeed(hover, np.array([1.0, 0, 0]), MODEL)
    assert ref.branch == Branch.LOW_AIRSPEED
    assert np.allclose(ref.R[:, 0], [0, 0, -1]) and ref.a_T == pytest.approx(9.8)
    assert np.allclose(ref.omega, 0) and np.allclose(ref.tau, 0)
    assert ref.det == pytest.approx(-941.192, rel=1e-12)
    assert cofactor_det(ref.N) == pytest.approx(-941.192, rel=1e-12)
    ref2 = flatness_transform(hover, None, FlatnessCache(), MODEL)
    assert ref2.branch == Branch.LOW_AIRSPEED and ref2.a_T == pytest.approx(9.8)


def test_low_airspeed_gradient_is_norm_projection():
    s = FlatSample(np.zeros(3), [0.1, 0.05, 0.0], [0.3, -0.2, 0.1], [0.1, 0, 0.2], np.zeros(3))
    G = flatness_gradients(s, None, FlatnessCache(), MODEL)
    sp = s.a - G_VEC
    assert np.allclose(G[0, 3:6], sp / np.linalg.norm(sp), atol=1e-12)
    assert np.allclose(G[0, 0:3], 0) and np.allclose(G[0, 6:9], 0)


def test_small_gamma_vertical_climb():
    climb = FlatSample(np.zeros(3), [0, 0, -5.0], np.zeros(3), np.zeros(3), np.zeros(3))
    ref = transform_small_gamma(climb, np.array([1.0, 0, 0]), MODEL)
    assert ref.branch == Branch.SMALL_GAMMA
    assert abs(ref.alpha) < 1e-12 and np.allclose(ref.R[:, 0], [0, 0, -1])
    assert np.allclose(ref.omega, 0, atol=1e-12) and ref.a_T == pytest.approx(9.8)
    with pytest.raises(FlatnessError):
        transform_small_gamma(level(), np.array([1.0, 0, 0]), MODEL)
    with pytest.raises(FlatnessError):
        transform_low_airspeed(level(), np.array([1.0, 0, 0]), MODEL)


def test_free_fall_and_degenerate_fix():
    fall = FlatSample(np.zeros(3), np.zeros(3), G_VEC, np.zeros(3), np.zeros(3))
    with pytest.raises(FreeFallError):
        flatness_transform(fall, None, FlatnessCache(), MODEL)
    hover = FlatSample(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    with pytest.raises(DegenerateFixError):
        transform_low_airspeed(hover, np.array([0, 0, 1.0]), MODEL)


def test_singular_rate_matrix_reported():
    with pytest.raises(SingularNError) as exc:
        flatness_transform(level(), None, flying_cache(), MODEL, FlatnessConfig(det_tol=1e12))
    assert exc.value.det != 0.0


def test_masked_errors_do_not_raise():
    v = np.array([[10.0, 0, 0], [0, 0, 0]])
    a = np.array([[0, 0, 0], G_VEC])
    ref = transform_batch(v, a, np.zeros((2, 3)), np.zeros((2, 3)), flying_cache(), MODEL,
                          on_error="mask")
    assert list(ref.valid) == [True, False] and isinstance(ref.errors[0], FreeFallError)


def test_cache_updates():
    cache = flying_cache()
    ref = flatness_transform(level(), None, cache, MODEL)
    assert np.allclose(cache.z_b_fix, ref.R[:, 2]) and np.allclose(cache.y_b_prev, ref.R[:, 1])
    assert cache.alpha_prev == ref.alpha and cache.branch_prev == Branch.COORDINATED
    # non-coordinated branches keep the fixed body z axis
    fix = cache.z_b_fix.copy()
    hover = FlatSample(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    flatness_transform(hover, None, cache, MODEL)
    assert np.array_equal(cache.z_b_fix, fix) and cache.branch_prev == Branch.LOW_AIRSPEED


def test_steady_level_flight_gradient_symmetry():
    G = flatness_gradients(level(), None, flying_cache(), MODEL)
    # a_T does not change to first order with lateral velocity or acceleration
    assert abs(G[0, 1]) < 1e-9 and abs(G[0, 4]) < 1e-9 and abs(G[0, 7]) < 1e-9


def test_gradient_omega_wrt_jerk_fd():
    s = level()

    def U(jerk):
        r = flatness_transform(FlatSample(s.p, s.v, s.a, jerk, s.s), None, flying_cache(), MODEL)
        return np.concatenate([[r.a_T], r.omega])

    G = flatness_gradients(s, None, flying_cache(), MODEL)
    fd = fd_jacobian(U, np.zeros(3))
    assert rel_err(G[:, 6:9], fd) < 1e-5


@pytest.mark.parametrize("kind", ["low", "small_gamma"])
def test_branch_gradients_fd(kind):
    rng = np.random.default_rng(8)
    v, a, j, s = random_samples(rng, 10, kind)
    zf = np.array([1.0, 0.2, 0.1]) / np.linalg.norm([1.0, 0.2, 0.1])
    for i in range(10):
        def U(P):
            r = transform_batch(P[0:3], P[3:6], P[6:9], s[i], FlatnessCache(z_b_fix=zf), MODEL)
            return np.concatenate([r.a_T, r.omega[0]])

        G = flatness_gradients(FlatSample(np.zeros(3), v[i], a[i], j[i], s[i]), None,
                               FlatnessCache(z_b_fix=zf), MODEL)
        assert rel_err(G, fd_jacobian(U, np.concatenate([v[i], a[i], j[i]]))) < 1e-5


# ---------------------------------------------------------------- along trajectories

def _fd_blocks(sample_at, t, cache_fn, wind_at=None, h=1e-5):
    def at(tt):
        return flatness_transform(sample_at(tt), None if wind_at is None else wind_at(tt),
                                  cache_fn(), MODEL)
    r0, rp, rm = at(t), at(t + h), at(t - h)
    assert r0.branch == rp.branch == rm.branch
    return r0, (rp.N - rm.N) / (2 * h), (rp.h - rm.h) / (2 * h)


def test_rate_matrix_derivatives_coordinated():
    loiter = Loiter(20.0, 10.0)
    for t in (0.1, 0.7, 2.3):
        r0, Nd, hd = _fd_blocks(loiter.sample, t, flying_cache)
        assert r0.branch == Branch.COORDINATED
        assert rel_err(r0.N_dot, Nd) < 1e-5 and rel_err(r0.h_dot, hd) < 1e-5


def test_rate_matrix_derivatives_low_airspeed():
    slow = Poly([[0.05, -0.1, 0.2, 0], [-0.03, 0.1, 0, 0], [0.02, 0.05, -0.1, -2]])
    for t in (0.3, 1.1):
        r0, Nd, hd = _fd_blocks(slow.sample, t, FlatnessCache)
        assert r0.branch == Branch.LOW_AIRSPEED
        assert rel_err(r0.N_dot, Nd) < 1e-5 and rel_err(r0.h_dot, hd) < 1e-5


def test_rate_matrix_derivatives_small_gamma():
    # wind chosen so the air velocity stays parallel to the specific acceleration
    traj = Poly([[0.1, 0.3, 2.0, 0], [-0.2, 0.5, 1.0, 0], [0.05, -0.4, -3.0, 0]])
    c = 0.4

    def wind_at(t):
        p, v, a, j, s = traj.derivs(t)
        return (v - c * (a - G_VEC), a - c * j, j - c * s)

    zf = np.array([1.0, 0.0, 0.0])
    for t in (0.2, 0.9):
        r0, Nd, hd = _fd_blocks(traj.sample, t, lambda: FlatnessCache(z_b_fix=zf), wind_at)
        assert r0.branch == Branch.SMALL_GAMMA
        assert rel_err(r0.N_dot, Nd) < 1e-5 and rel_err(r0.h_dot, hd) < 1e-5


def test_angular_acceleration_matches_rate_fd():
    traj = Poly([[0.0, 0.2, 8.0, 0], [0.3, 0.8, 0.0, 0], [0.0, -0.2, 0.3, -10]])
    h = 1e-5
    rs = [flatness_transform(traj.sample(t), None, flying_cache(), MODEL)
          for t in (1.0 - h, 1.0, 1.0 + h)]
    assert np.linalg.norm(rs[1].omega_dot) > 1e-2
    assert rel_err(rs[1].omega_dot, (rs[2].omega - rs[0].omega) / (2 * h)) < 1e-6
    assert abs(rs[1].a_T_ddot - (rs[2].a_T_dot - rs[0].a_T_dot) / (2 * h)) < 1e-6


def test_torque_from_angular_acceleration():
    model = AeroModel(J=np.eye(3))
    r = flatness_transform(Loiter().sample(0.3), None, flying_cache(), model)
    assert np.allclose(r.tau, r.omega_dot + np.cross(r.omega, r.omega), atol=1e-12)


def test_roundtrip_accelerating_turn():
    traj = Poly([[0.0, 0.2, 8.0, 0], [0.3, 0.8, 0.0, 0], [0.0, -0.2, 0.3, -10]])
    err, ref = roundtrip_error(traj, MODEL, flying_cache())
    assert np.all(ref.branch == Branch.COORDINATED)
    assert err < 1e-3


def test_vertical_ascent_branch_continuity():
    ascent = Poly([[0.0], [0.0], [-0.2, 0.0, 0.0]])
    ts = np.arange(0.0, 3.0, 1e-3)
    p, v, a, j, s = ascent.arrays(ts)
    ref = transform_batch(v, a, j, s, FlatnessCache(), MODEL, p=p, t=ts)
    assert ref.branch[0] == Branch.LOW_AIRSPEED and ref.branch[-1] == Branch.SMALL_GAMMA
    k = np.flatnonzero(np.diff(ref.branch))[0]
    gap = np.linalg.norm(log_so3(ref.R[k].T @ ref.R[k + 1]))
    assert gap < 0.05
    assert np.allclose(ref.a_T, np.linalg.norm(a - G_VEC, axis=1))


def test_loiter_continuity_and_replay():
    loiter = Loiter(20.0, 10.0)
    ts = np.arange(0.0, 3.0, 1e-3)
    p, v, a, j, s = loiter.arrays(ts)
    r1 = transform_batch(v, a, j, s, flying_cache(), MODEL, p=p, t=ts)
    r2 = transform_batch(v, a, j, s, flying_cache(), MODEL, p=p, t=ts)
    assert np.array_equal(r1.branch, r2.branch) and np.array_equal(r1.R, r2.R)
    step = [np.linalg.norm(log_so3(r1.R[i].T @ r1.R[i + 1])) for i in range(len(ts) - 1)]
    assert max(step) < 0.02 and np.max(np.abs(np.diff(r1.alpha))) < 0.01
