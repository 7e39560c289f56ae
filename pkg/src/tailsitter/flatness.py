"""Differential-flatness transform for a coordinated-flight tail-sitter.

Maps the position trajectory p(t) and its derivatives (plus an assumed wind
w_bar) to attitude R, thrust acceleration a_T, body rates and their
derivatives, and the control torque.

Three branches:

* coordinated: airspeed above v_min and the air velocity not parallel to
  the specific acceleration sp = v_dot - g. y_b is normal to both.
* low airspeed: body x along sp, heading fixed by the cached body z axis.
* small gamma: air velocity (anti)parallel to sp. y_b comes from the
  cached body z axis, angle of attack and thrust from the usual balance.

The rates solve a 4x4 linear system N [a_T_dot; omega] = h whose first row
encodes the lateral (or heading) constraint and whose last three rows are the
time derivative of the translational dynamics. Angular accelerations come
from differentiating that system once more.

Most of the work is batched over samples; only branch selection, the sign
of y_b and the angle-of-attack root are resolved sequentially because they
depend on the previous sample.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .aero import FlatPlateCoefficients, aero_force, coeff_vector
from .dynamics import G_VEC
from .so3 import skew_batch


class Branch(enum.IntEnum):
    COORDINATED = 0
    LOW_AIRSPEED = 1
    SMALL_GAMMA = 2


class FlatnessError(RuntimeError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class NoRootError(FlatnessError):
    def __init__(self, msg, gap=np.inf, index=None):
        super().__init__(msg, index)
        self.gap = gap


class SingularNError(FlatnessError):
    def __init__(self, msg, det=0.0, index=None):
        super().__init__(msg, index)
        self.det = det


class FreeFallError(FlatnessError):
    pass


class DegenerateFixError(FlatnessError):
    pass


@dataclass
class FlatnessConfig:
    v_min: float = 0.5
    gamma_min: float = np.deg2rad(5.0)
    free_fall_eps: float = 1e-3
    det_tol: float = 1e-8
    fix_tol: float = 1e-6
    # extra margin required to leave the small-gamma branch (0 = as listed)
    gamma_hysteresis: float = 0.0


@dataclass
class FlatSample:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "a", "j", "s"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != (3,) or not np.all(np.isfinite(val)):
                raise ValueError(f"flat sample field {name} must be a finite 3-vector")
            setattr(self, name, val)


@dataclass
class FlatnessCache:
    y_b_prev: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    z_b_fix: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    alpha_prev: float = 0.0
    branch_prev: Branch = Branch.LOW_AIRSPEED

    @classmethod
    def from_rotation(cls, R0, alpha=None):
        """Memory from a known attitude; pass alpha when the vehicle is already flying."""
        R0 = np.asarray(R0, dtype=float)
        if alpha is None:
            return cls(R0[:, 1].copy(), R0[:, 2].copy(), 0.0, Branch.LOW_AIRSPEED)
        return cls(R0[:, 1].copy(), R0[:, 2].copy(), float(alpha), Branch.COORDINATED)

    def copy(self):
        return FlatnessCache(self.y_b_prev.copy(), self.z_b_fix.copy(), self.alpha_prev,
                             self.branch_prev)


@dataclass
class ReferenceSample:
    t: float
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    a_T: float
    omega: np.ndarray
    a_T_dot: float
    a_T_ddot: float
    omega_dot: np.ndarray
    tau: np.ndarray
    alpha: float
    gamma: float
    branch: Branch
    v_a: np.ndarray
    N: np.ndarray
    h: np.ndarray
    N_dot: np.ndarray
    h_dot: np.ndarray
    det: float

    @property
    def u(self):
        return np.concatenate([[self.a_T], self.omega])


@dataclass
class ReferenceTrajectory:
    """Batched transform output, arrays indexed by sample."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    a_T: np.ndarray
    omega: np.ndarray
    a_T_dot: np.ndarray
    a_T_ddot: np.ndarray
    omega_dot: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    branch: np.ndarray
    v_a: np.ndarray
    sp: np.ndarray
    N: np.ndarray
    h: np.ndarray
    N_dot: np.ndarray
    h_dot: np.ndarray
    det: np.ndarray
    valid: np.ndarray
    errors: list
    grad: np.ndarray = None

    def __len__(self):
        return len(self.t)

    def sample(self, i):
        return ReferenceSample(
            float(self.t[i]), self.p[i].copy(), self.v[i].copy(), self.R[i].copy(),
            float(self.a_T[i]), self.omega[i].copy(), float(self.a_T_dot[i]),
            float(self.a_T_ddot[i]), self.omega_dot[i].copy(), self.tau[i].copy(),
            float(self.alpha[i]), float(self.gamma[i]), Branch(int(self.branch[i])),
            self.v_a[i].copy(), self.N[i].copy(), self.h[i].copy(), self.N_dot[i].copy(),
            self.h_dot[i].copy(), float(self.det[i]))

    def u(self):
        return np.column_stack([self.a_T, self.omega])


# ---------------------------------------------------------------------------
# scalar building blocks

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def compute_gamma(v_a, sp, r=1.0):
    """Signed angle between air velocity and specific acceleration."""
    v_a = np.asarray(v_a, dtype=float)
    if np.linalg.norm(v_a) == 0.0:
        raise FlatnessError("gamma undefined at zero airspeed")
    return float(r * np.arctan2(np.linalg.norm(np.cross(sp, v_a)), np.dot(sp, v_a)))


def select_yb(v_a, sp, y_b_prev):
    """Body y axis normal to air velocity and specific acceleration, sign kept continuous."""
    n = np.cross(v_a, sp)
    nn = np.linalg.norm(n)
    if nn == 0.0:
        raise FlatnessError("air velocity parallel to specific acceleration")
    r = 1.0 if np.dot(n, y_b_prev) >= 0.0 else -1.0
    return r * n / nn, r


def _cz(alpha, model):
    if np.ndim(alpha) == 0 and isinstance(model.coeffs, FlatPlateCoefficients):
        # c_z = -2 sin(alpha) for the flat plate
        return -2.0 * math.sin(alpha), -2.0 * math.cos(alpha)
    co = coeff_vector(alpha, model)
    return co.c[..., 2], co.dc[..., 2]


def _alpha_residual(alpha, h, gamma, model):
    """F(alpha) = h sin(gamma - alpha) + c_z(alpha), divided by h when h > 1."""
    cz, dcz = _cz(alpha, model)
    if np.ndim(alpha) == 0:
        sg, cg = math.sin(gamma - alpha), math.cos(gamma - alpha)
    else:
        sg, cg = np.sin(gamma - alpha), np.cos(gamma - alpha)
    if h > 1.0:
        return sg + cz / h, -cg + dcz / h
    return h * sg + cz, -h * cg + dcz


_GRID = np.linspace(-np.pi, np.pi, 361)


def alpha_root_gap(h, gamma, model):
    """Smallest |F| on the 1-degree grid; a measure of how far from having a root."""
    f, _ = _alpha_residual(_GRID, h, gamma, model)
    return float(np.min(np.abs(f)))


def solve_alpha(h, gamma, alpha_prev, model, tol=1e-10):
    """Angle of attack solving h sin(gamma - alpha) + c_z(alpha) = 0.

    Newton from alpha_prev; if it stalls or lands far from alpha_prev while a
    closer sign change exists, the bracket nearest alpha_prev on a 1-degree
    grid is refined by Brent's method.
    """
    if h < 0:
        raise ValueError("h must be nonnegative")
    if isinstance(model.coeffs, FlatPlateCoefficients):
        # h sin(gamma - a) - 2 sin a = h sin(gamma) cos a - (h cos(gamma) + 2) sin a:
        # roots a0 and a0 + pi; keep the one nearest alpha_prev
        y, x = h * math.sin(gamma), h * math.cos(gamma) + 2.0
        if math.hypot(x, y) > 1e-12:
            a0 = math.atan2(y, x)
            a1 = _wrap(a0 + math.pi)
            if abs(_wrap(a1 - alpha_prev)) < abs(_wrap(a0 - alpha_prev)):
                return float(a1)
            return float(a0)
    a = float(alpha_prev)
    ok = False
    for _ in range(50):
        f, fp = _alpha_residual(a, h, gamma, model)
        if not np.isfinite(f) or not np.isfinite(fp) or fp == 0.0:
            break
        step = f / fp
        a = _wrap(a - step)
        if abs(step) < 1e-15 or abs(f) < 1e-16:
            ok = True
            break
    if ok:
        f, _ = _alpha_residual(a, h, gamma, model)
        ok = abs(f) < tol
    if ok and abs(_wrap(a - alpha_prev)) < np.deg2rad(10.0):
        return a
    # grid scan for sign changes
    f, _ = _alpha_residual(_GRID, h, gamma, model)
    sign_change = np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0)
    if sign_change.size == 0:
        if ok:
            return a
        raise NoRootError("no angle-of-attack root for this acceleration/airspeed pair",
                          gap=float(np.min(np.abs(f))))
    mids = 0.5 * (_GRID[sign_change] + _GRID[sign_change + 1])
    k = sign_change[np.argmin(np.abs(_wrap(mids - alpha_prev)))]
    lo, hi = _GRID[k], _GRID[k + 1]
    if f[k] == 0.0:
        root = lo
    elif f[k + 1] == 0.0:
        root = hi
    else:
        root = brentq(lambda x: _alpha_residual(x, h, gamma, model)[0], lo, hi,
                      xtol=1e-15, rtol=1e-15, maxiter=200)
    if ok and abs(_wrap(a - alpha_prev)) <= abs(_wrap(root - alpha_prev)):
        return a
    # polish
    for _ in range(3):
        fr, fpr = _alpha_residual(root, h, gamma, model)
        if fpr == 0.0 or not np.isfinite(fpr):
            break
        root = _wrap(root - fr / fpr)
    return float(root)


def attitude_from_alpha(u_hat, y_b, alpha):
    """x_b = Exp(alpha y_b) u_hat for u_hat orthogonal to y_b; returns R = [x_b y_b z_b]."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    x_b = ca * u_hat + sa * np.cross(y_b, u_hat)
    z_b = np.cross(x_b, y_b)
    return np.column_stack([x_b, y_b, z_b])


def attitude_and_thrust(sample, v_a, alpha, gamma, y_b, model):
    """Attitude and thrust acceleration of the coordinated branch.

    gamma is accepted for interface symmetry; the thrust is computed from the
    projection of sp on x_b, which equals |sp| cos(gamma - alpha).
    """
    v_a = np.asarray(v_a, dtype=float)
    V = np.linalg.norm(v_a)
    if V == 0.0:
        raise FlatnessError("attitude undefined at zero airspeed")
    R = attitude_from_alpha(v_a / V, y_b, alpha)
    sp = sample.a - G_VEC
    co = coeff_vector(alpha, model)
    f_a = model.half_rho_S * V**2 * co.c
    a_T = float(R[:, 0] @ sp - f_a[0] / model.mass)
    return R, a_T


# ---------------------------------------------------------------------------
# sequential attitude pass

def _vcross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _vdot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _vnorm(a):
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def _vscale(a, k):
    return (a[0] * k, a[1] * k, a[2] * k)


def _attitude_step(v_a, sp, cache, model, cfg):
    """Branch, attitude and alpha for one sample; updates the cache.

    Plain float arithmetic: this runs once per sample in a Python loop.
    """
    v_a = tuple(float(x) for x in v_a)
    sp = tuple(float(x) for x in sp)
    sn = _vnorm(sp)
    if sn < cfg.free_fall_eps:
        raise FreeFallError(f"specific acceleration {sn:.3e} below free-fall threshold")
    V = _vnorm(v_a)
    z_fix = tuple(float(x) for x in cache.z_b_fix)
    if V < cfg.v_min:
        m = _vcross(z_fix, sp)
        k = _vnorm(m)
        if k < cfg.fix_tol:
            raise DegenerateFixError("fixed body z axis parallel to specific acceleration")
        x_b = _vscale(sp, 1.0 / sn)
        y_b = _vscale(m, 1.0 / k)
        z_b = _vcross(x_b, y_b)
        if V > 0:
            alpha = math.atan2(_vdot(z_b, v_a), _vdot(x_b, v_a))
            gamma = math.atan2(_vdot(_vcross(v_a, sp), y_b), _vdot(v_a, sp))
        else:
            alpha, gamma = cache.alpha_prev, 0.0
        branch = Branch.LOW_AIRSPEED
        r = 1.0
        u_hat = x_b
    else:
        n = _vcross(v_a, sp)
        nn = _vnorm(n)
        sin_g = nn / (V * sn)
        limit = cfg.gamma_min
        if cache.branch_prev == Branch.SMALL_GAMMA:
            limit += cfg.gamma_hysteresis
        if sin_g < math.sin(limit):
            m = _vcross(z_fix, sp)
            k = _vnorm(m)
            if k < cfg.fix_tol:
                raise DegenerateFixError("fixed body z axis parallel to specific acceleration")
            y_b = _vscale(m, 1.0 / k)
            yv = _vdot(y_b, v_a)
            u = (v_a[0] - yv * y_b[0], v_a[1] - yv * y_b[1], v_a[2] - yv * y_b[2])
            u_hat = _vscale(u, 1.0 / _vnorm(u))
            branch = Branch.SMALL_GAMMA
            r = 1.0
        else:
            yp = cache.y_b_prev
            r = 1.0 if n[0] * yp[0] + n[1] * yp[1] + n[2] * yp[2] >= 0.0 else -1.0
            y_b = _vscale(n, r / nn)
            u_hat = _vscale(v_a, 1.0 / V)
            branch = Branch.COORDINATED
        gamma = math.atan2(_vdot(_vcross(u_hat, sp), y_b), _vdot(u_hat, sp))
        # leaving the low-airspeed branch, x_b was along sp (alpha = gamma);
        # that is the continuous reference, not an alpha measured at ~zero speed
        alpha_ref = gamma if cache.branch_prev == Branch.LOW_AIRSPEED else cache.alpha_prev
        if model.rho * model.S > 0:
            h = 2.0 * model.mass * sn / (model.rho * model.S * V * V)
            alpha = solve_alpha(h, gamma, alpha_ref, model)
        else:
            alpha = gamma
        ca, sa = math.cos(alpha), math.sin(alpha)
        yu = _vcross(y_b, u_hat)
        x_b = (ca * u_hat[0] + sa * yu[0], ca * u_hat[1] + sa * yu[1], ca * u_hat[2] + sa * yu[2])
        z_b = _vcross(x_b, y_b)
    y_b = np.array(y_b)
    z_b = np.array(z_b)
    cache.y_b_prev = y_b.copy()
    if branch == Branch.COORDINATED:
        cache.z_b_fix = z_b.copy()
    cache.alpha_prev = float(alpha)
    cache.branch_prev = branch
    return branch, np.array(x_b), y_b, z_b, np.array(u_hat), float(alpha), float(gamma), r, np.array(z_fix)


# ---------------------------------------------------------------------------
# batched helpers

def _cross(a, b):
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _dot(a, b):
    return np.einsum("ni,ni->n", a, b)


def _mv(M, v):
    return np.einsum("nij,nj->ni", M, v)


def _mtv(M, v):
    return np.einsum("nji,nj->ni", M, v)


def _mm(A, B):
    return np.einsum("nij,njk->nik", A, B)


def _cross_t(a, dB):
    """a x dB for a (n,3) and tangent stack dB (n,3,K)."""
    return np.einsum("nij,njk->nik", skew_batch(a), dB)


def _dot_t(a, dB):
    return np.einsum("ni,nik->nk", a, dB)


def _normalize_t(x, dx):
    nx = np.linalg.norm(x, axis=1)
    xh = x / nx[:, None]
    P = np.eye(3)[None] - np.einsum("ni,nj->nij", xh, xh)
    return np.einsum("nij,njk->nik", P, dx) / nx[:, None, None]


class _Aero:
    """Aerodynamic quantities of the coordinated force model at given attitudes."""

    def __init__(self, R, v_a, alpha, model):
        self.model = model
        m = model.mass
        hrs = model.half_rho_S
        self.v_aB = _mtv(R, v_a)
        self.V = np.linalg.norm(v_a, axis=1)
        co = coeff_vector(alpha, model)
        self.c, self.dc, self.d2c = co.c, co.dc, co.d2c
        self.cyb, self.dcyb = co.cy_beta, co.dcy_beta
        self.qdyn = hrs * self.V**2
        self.f_a = self.qdyn[:, None] * self.c
        vxz = self.v_aB.copy()
        vxz[:, 1] = 0.0
        self.vxz = vxz
        self.Vxz = np.linalg.norm(vxz, axis=1)
        # w^T = v^T [e2] = [-v_z, 0, v_x]
        self.wv = np.stack([-vxz[:, 2], np.zeros(len(alpha)), vxz[:, 0]], 1)
        cb = np.zeros_like(self.c)
        cb[:, 1] = self.cyb
        self.cbeta = cb
        e2 = np.array([0.0, 1.0, 0.0])
        self.Jf = hrs * (2.0 * np.einsum("ni,nj->nij", self.c, vxz)
                         + np.einsum("ni,nj->nij", self.dc, self.wv)
                         + self.Vxz[:, None, None] * np.einsum("ni,j->nij", cb, e2))
        self.inv_m = 1.0 / m


def _aero_rows(R, a_T, ae, va_dot, jerk):
    """N rows 2-4 and h rows 2-4 for the branches with aerodynamics."""
    n = len(a_T)
    inv_m = ae.inv_m
    fvec = np.zeros((n, 3))
    fvec[:, 0] = a_T
    fvec += ae.f_a * inv_m
    Psi = -skew_batch(fvec) + _mm(ae.Jf, skew_batch(ae.v_aB)) * inv_m
    N2 = np.concatenate([R[:, :, 0:1], _mm(R, Psi)], axis=2)
    h2 = jerk - _mv(R, _mv(ae.Jf, _mtv(R, va_dot))) * inv_m
    return N2, h2, Psi


def _noaero_rows(R, a_T, jerk):
    e1 = skew_batch(np.array([1.0, 0.0, 0.0]))
    N2 = np.concatenate([R[:, :, 0:1], -a_T[:, None, None] * np.einsum("nij,jk->nik", R, e1)],
                        axis=2)
    return N2, jerk.copy()


def _lateral_row(ae, y_b, va_dot):
    n = len(y_b)
    N1 = np.zeros((n, 4))
    N1[:, 1] = -ae.v_aB[:, 2]
    N1[:, 3] = ae.v_aB[:, 0]
    return N1, _dot(y_b, va_dot)


def _heading_row(z_fix, sp, jerk, z_b):
    m = _cross(z_fix, sp)
    k = np.linalg.norm(m, axis=1)
    N1 = np.zeros((len(k), 4))
    N1[:, 1] = k
    return N1, _dot(_cross(z_fix, jerk), z_b), k


def _closed_form_det(branch, sp, v_a, alpha, gamma, a_T, ae, k_fix):
    """Closed-form determinants of N for each branch."""
    sn = np.linalg.norm(sp, axis=1)
    if branch == Branch.LOW_AIRSPEED:
        return -a_T**2 * k_fix
    psi32 = -sn * np.cos(gamma - alpha) + ae.qdyn * ae.inv_m * ae.dc[:, 2]
    if branch == Branch.COORDINATED:
        # |v_a x sp| carries the sign of gamma (i.e. of the y_b orientation r)
        V = np.linalg.norm(v_a, axis=1)
        return -psi32 * V * sn * np.sin(gamma)
    psi23 = sn * np.cos(gamma - alpha) - ae.qdyn * ae.inv_m * ae.cyb * np.cos(alpha)
    return psi32 * k_fix * psi23


def small_gamma_psi23(sp, alpha, gamma, V, model):
    """psi_23 entry of the factored rate matrix in the small-gamma branch."""
    co = coeff_vector(alpha, model)
    qdyn = model.half_rho_S * V**2
    return np.linalg.norm(sp) * np.cos(gamma - alpha) - qdyn / model.mass * co.cy_beta * np.cos(alpha)


# ---------------------------------------------------------------------------
# time derivatives of N and h

def _aero_dot(R, omega, a_T_dot, ae, Psi, va_dot, va_ddot, v_a, snap):
    """Time derivatives of the aerodynamic rows (re-derived, checked by finite differences)."""
    inv_m = ae.inv_m
    hrs = ae.model.half_rho_S
    n = len(omega)
    W = skew_batch(omega)
    Rdot = _mm(R, W)
    vB = ae.v_aB
    vB_dot = -_cross(omega, vB) + _mtv(R, va_dot)
    vxz, Vxz = ae.vxz, ae.Vxz
    vxz_dot = vB_dot.copy()
    vxz_dot[:, 1] = 0.0
    alpha_dot = (vxz[:, 0] * vxz_dot[:, 2] - vxz[:, 2] * vxz_dot[:, 0]) / Vxz**2
    V_dot = _dot(v_a, va_dot) / ae.V
    Vxz_dot = _dot(vxz, vxz_dot) / Vxz
    f_dot = hrs * (2 * ae.V * V_dot)[:, None] * ae.c + (ae.qdyn * alpha_dot)[:, None] * ae.dc
    wv_dot = np.stack([-vxz_dot[:, 2], np.zeros(n), vxz_dot[:, 0]], 1)
    cb_dot = np.zeros((n, 3))
    cb_dot[:, 1] = ae.dcyb * alpha_dot
    e2 = np.array([0.0, 1.0, 0.0])
    Jf_dot = hrs * (2.0 * (np.einsum("ni,nj->nij", ae.dc * alpha_dot[:, None], vxz)
                           + np.einsum("ni,nj->nij", ae.c, vxz_dot))
                    + np.einsum("ni,nj->nij", ae.d2c * alpha_dot[:, None], ae.wv)
                    + np.einsum("ni,nj->nij", ae.dc, wv_dot)
                    + np.einsum("ni,j->nij", Vxz_dot[:, None] * ae.cbeta + Vxz[:, None] * cb_dot, e2))
    fvec_dot = f_dot * inv_m
    fvec_dot[:, 0] += a_T_dot
    Psi_dot = (-skew_batch(fvec_dot)
               + (_mm(Jf_dot, skew_batch(vB)) + _mm(ae.Jf, skew_batch(vB_dot))) * inv_m)
    N2_dot = np.concatenate([Rdot[:, :, 0:1], _mm(Rdot, Psi) + _mm(R, Psi_dot)], axis=2)
    vdB = _mtv(R, va_dot)
    h2_dot = snap - inv_m * (_mv(Rdot, _mv(ae.Jf, vdB)) + _mv(R, _mv(Jf_dot, vdB))
                             + _mv(R, _mv(ae.Jf, _mtv(Rdot, va_dot)))
                             + _mv(R, _mv(ae.Jf, _mtv(R, va_ddot))))
    return N2_dot, h2_dot


def _noaero_dot(R, omega, a_T, sp, jerk, snap):
    W = skew_batch(omega)
    Rdot = _mm(R, W)
    a_T_dot = _dot(sp, jerk) / a_T
    e1 = skew_batch(np.array([1.0, 0.0, 0.0]))
    blk = -np.einsum("nij,jk->nik", a_T_dot[:, None, None] * R + a_T[:, None, None] * Rdot, e1)
    N2_dot = np.concatenate([Rdot[:, :, 0:1], blk], axis=2)
    return N2_dot, snap.copy()


def _lateral_dot(ae, R, omega, va_dot, va_ddot):
    vB_dot = -_cross(omega, ae.v_aB) + _mtv(R, va_dot)
    n = len(omega)
    N1_dot = np.zeros((n, 4))
    N1_dot[:, 1] = -vB_dot[:, 2]
    N1_dot[:, 3] = vB_dot[:, 0]
    h1_dot = (-_cross(omega, _mtv(R, va_dot)) + _mtv(R, va_ddot))[:, 1]
    return N1_dot, h1_dot


def _heading_dot(z_fix, sp, jerk, snap, R, omega, k):
    m = _cross(z_fix, sp)
    mj = _cross(z_fix, jerk)
    N1_dot = np.zeros((len(k), 4))
    N1_dot[:, 1] = _dot(m, mj) / k
    e3 = np.array([0.0, 0.0, 1.0])
    zb_dot = _mv(R, _cross(omega, np.broadcast_to(e3, omega.shape)))
    h1_dot = _dot(_cross(z_fix, snap), R[:, :, 2]) + _dot(mj, zb_dot)
    return N1_dot, h1_dot


# ---------------------------------------------------------------------------
# forward-mode gradients with respect to (v, a, jerk)

def _tangent_attitude_aero(v_a, sp, y_b, u_hat, r, alpha, gamma, model, branch,
                           z_fix, dv, dsp):
    """Tangents of y_b, u_hat, gamma, alpha, x_b, z_b for the aerodynamic branches."""
    n = len(alpha)
    if branch == Branch.COORDINATED:
        nv = _cross(v_a, sp)
        dn = _cross_t(v_a, dsp) - _cross_t(sp, dv)
        dy = r[:, None, None] * _normalize_t(nv, dn)
    else:
        m = _cross(z_fix, sp)
        dy = _normalize_t(m, _cross_t(z_fix, dsp))
    yv = _dot(y_b, v_a)
    u = v_a - yv[:, None] * y_b
    du = (dv - dy * yv[:, None, None]
          - y_b[:, :, None] * (_dot_t(v_a, dy) + _dot_t(y_b, dv))[:, None, :])
    duh = _normalize_t(u, du)
    X = _dot(u_hat, sp)
    us = _cross(u_hat, sp)
    Y = _dot(us, y_b)
    dX = _dot_t(sp, duh) + _dot_t(u_hat, dsp)
    dY = _dot_t(y_b, -_cross_t(sp, duh) + _cross_t(u_hat, dsp)) + _dot_t(us, dy)
    dgam = (X[:, None] * dY - Y[:, None] * dX) / (X**2 + Y**2)[:, None]
    V = np.linalg.norm(v_a, axis=1)
    sn = np.linalg.norm(sp, axis=1)
    dV = _dot_t(v_a / V[:, None], dv)
    dsn = _dot_t(sp / sn[:, None], dsp)
    co = coeff_vector(alpha, model)
    q = model.half_rho_S * V**2 / (model.mass * sn)
    dq = q[:, None] * (2 * dV / V[:, None] - dsn / sn[:, None])
    ga = -np.cos(gamma - alpha) + q * co.dc[:, 2]
    dal = -(co.c[:, 2][:, None] * dq + np.cos(gamma - alpha)[:, None] * dgam) / ga[:, None]
    ca, sa = np.cos(alpha), np.sin(alpha)
    yu = _cross(y_b, u_hat)
    x_b = ca[:, None] * u_hat + sa[:, None] * yu
    dx = ((-sa[:, None] * u_hat + ca[:, None] * yu)[:, :, None] * dal[:, None, :]
          + ca[:, None, None] * duh
          + sa[:, None, None] * (-_cross_t(u_hat, dy) + _cross_t(y_b, duh)))
    dz = -_cross_t(y_b, dx) + _cross_t(x_b, dy)
    return dy, dx, dz, dal, dV


def _gradients(branch, ctx, model):
    """d(a_T, omega)/d(v, a, jerk) for one branch subset; shape (n, 4, 9)."""
    v_a, sp, va_dot, jerk = ctx["v_a"], ctx["sp"], ctx["va_dot"], ctx["jerk"]
    R, b, a_T = ctx["R"], ctx["b"], ctx["a_T"]
    N = ctx["N"]
    n = len(a_T)
    K = 9
    I3 = np.eye(3)
    Z = np.zeros((3, 3))
    dv = np.broadcast_to(np.hstack([I3, Z, Z]), (n, 3, K))
    dsp = np.broadcast_to(np.hstack([Z, I3, Z]), (n, 3, K))
    dvd = dsp
    dj = np.broadcast_to(np.hstack([Z, Z, I3]), (n, 3, K))
    omega = b[:, 1:]
    aT_dot = b[:, 0]
    y_b, x_b, z_b = R[:, :, 1], R[:, :, 0], R[:, :, 2]
    z_fix = ctx["z_fix"]
    dN_b = np.zeros((n, 4, K))
    dh = np.zeros((n, 4, K))
    if branch == Branch.LOW_AIRSPEED:
        sn = np.linalg.norm(sp, axis=1)
        dx = _normalize_t(sp, dsp)
        m = _cross(z_fix, sp)
        dy = _normalize_t(m, _cross_t(z_fix, dsp))
        dz = -_cross_t(y_b, dx) + _cross_t(x_b, dy)
        da_T = _dot_t(sp / sn[:, None], dsp)
        dR = np.stack([dx, dy, dz], axis=2)
        k = np.linalg.norm(m, axis=1)
        dk = _dot_t(m, _cross_t(z_fix, dsp)) / k[:, None]
        dN_b[:, 0] = dk * omega[:, 0:1]
        dh[:, 0] = _dot_t(z_b, _cross_t(z_fix, dj)) + _dot_t(_cross(z_fix, jerk), dz)
        e1s = skew_batch(np.array([1.0, 0.0, 0.0]))
        e1w = np.einsum("ij,nj->ni", e1s, omega)
        dN_b[:, 1:] = (np.einsum("nijk,j->nik", dR, np.array([1.0, 0, 0])) * aT_dot[:, None, None]
                       - _mv(R, e1w)[:, :, None] * da_T[:, None, :]
                       - a_T[:, None, None] * np.einsum("nijk,nj->nik", dR, e1w))
        dh[:, 1:] = dj
    else:
        dy, dx, dz, dal, dV = _tangent_attitude_aero(
            v_a, sp, y_b, ctx["u_hat"], ctx["r"], ctx["alpha"], ctx["gamma"], model, branch,
            z_fix, dv, dsp)
        dR = np.stack([dx, dy, dz], axis=2)
        ae = ctx["ae"]
        inv_m = ae.inv_m
        hrs = model.half_rho_S
        dvB = np.einsum("njik,nj->nik", dR, v_a) + np.einsum("nji,njk->nik", R, dv)
        dc = ae.dc[:, :, None] * dal[:, None, :]
        ddc = ae.d2c[:, :, None] * dal[:, None, :]
        df = (2 * hrs * ae.V)[:, None, None] * ae.c[:, :, None] * dV[:, None, :] + ae.qdyn[:, None, None] * dc
        da_T = _dot_t(x_b, dsp) + _dot_t(sp, dx) - df[:, 0] * inv_m
        dvxz = dvB.copy()
        dvxz[:, 1] = 0.0
        dVxz = _dot_t(ae.vxz / ae.Vxz[:, None], dvxz)
        dwv = np.zeros_like(dvxz)
        dwv[:, 0] = -dvxz[:, 2]
        dwv[:, 2] = dvxz[:, 0]
        dcb = np.zeros((n, 3, K))
        dcb[:, 1] = ae.dcyb[:, None] * dal
        dJf = hrs * (2 * (np.einsum("nik,nj->nijk", dc, ae.vxz) + np.einsum("ni,njk->nijk", ae.c, dvxz))
                     + np.einsum("nik,nj->nijk", ddc, ae.wv) + np.einsum("ni,njk->nijk", ae.dc, dwv))
        dJf[:, :, 1, :] += hrs * (ae.cbeta[:, :, None] * dVxz[:, None, :] + ae.Vxz[:, None, None] * dcb)
        dfv = df * inv_m
        dfv[:, 0] += da_T
        Psi = ctx["Psi"]
        # dPsi omega = -(dfv x omega)... written via skew products
        Sv = skew_batch(ae.v_aB)
        dPsi_w = (_cross_t(omega, dfv)
                  + np.einsum("nijk,nj->nik", dJf, _mv(Sv, omega)) * inv_m
                  + np.einsum("nij,njk->nik", ae.Jf, -_cross_t(omega, dvB)) * inv_m)
        e1 = np.array([1.0, 0.0, 0.0])
        dN_b[:, 1:] = (np.einsum("nijk,j->nik", dR, e1) * aT_dot[:, None, None]
                       + np.einsum("nijk,nj->nik", dR, _mv(Psi, omega))
                       + np.einsum("nij,njk->nik", R, dPsi_w))
        vdB = _mtv(R, va_dot)
        Jv = _mv(ae.Jf, vdB)
        dh[:, 1:] = dj - inv_m * (np.einsum("nijk,nj->nik", dR, Jv)
                                  + np.einsum("nij,njk->nik", R, np.einsum("nijk,nj->nik", dJf, vdB))
                                  + np.einsum("nij,njk->nik", R, np.einsum("nij,njk->nik", ae.Jf,
                                              np.einsum("njik,nj->nik", dR, va_dot)
                                              + np.einsum("nji,njk->nik", R, dvd))))
        if branch == Branch.COORDINATED:
            dN_b[:, 0] = -dvB[:, 2] * omega[:, 0:1] + dvB[:, 0] * omega[:, 2:3]
            dh[:, 0] = _dot_t(va_dot, dy) + _dot_t(y_b, dvd)
        else:
            m = _cross(z_fix, sp)
            k = np.linalg.norm(m, axis=1)
            dk = _dot_t(m, _cross_t(z_fix, dsp)) / k[:, None]
            dN_b[:, 0] = dk * omega[:, 0:1]
            dh[:, 0] = _dot_t(z_b, _cross_t(z_fix, dj)) + _dot_t(_cross(z_fix, jerk), dz)
    db = np.linalg.solve(N, dh - dN_b)
    out = np.empty((n, 4, K))
    out[:, 0] = da_T
    out[:, 1:] = db[:, 1:]
    return out


# ---------------------------------------------------------------------------
# main entry points

def _as_rows(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.broadcast_to(x, (n, 3)).copy()
    return x


def transform_batch(v, a, j, s, cache, model, config=None, wind=None, wind_dot=None,
                    wind_ddot=None, p=None, t=None, gradients=False, on_error="raise"):
    """Run the transform over an ordered sequence of flat samples.

    v, a, j, s are (n, 3) arrays of velocity, acceleration, jerk and snap;
    wind and its derivatives are (3,) or (n, 3). The cache is advanced
    through every sample in order. With on_error="mask" failing samples are
    flagged invalid instead of raising (errors are reported in `errors`).
    """
    cfg = config or FlatnessConfig()
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = len(v)
    a, j, s = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (a, j, s))
    w = _as_rows(np.zeros(3) if wind is None else wind, n)
    wd = _as_rows(np.zeros(3) if wind_dot is None else wind_dot, n)
    wdd = _as_rows(np.zeros(3) if wind_ddot is None else wind_ddot, n)
    p = np.zeros((n, 3)) if p is None else np.atleast_2d(np.asarray(p, dtype=float))
    t = np.arange(n, dtype=float) if t is None else np.asarray(t, dtype=float)

    v_a = v - w
    sp = a - G_VEC
    va_dot = a - wd
    va_ddot = j - wdd

    branch = np.zeros(n, dtype=int)
    R = np.zeros((n, 3, 3))
    u_hat = np.zeros((n, 3))
    alpha = np.zeros(n)
    gamma = np.zeros(n)
    r = np.ones(n)
    z_fix = np.zeros((n, 3))
    valid = np.ones(n, dtype=bool)
    errors = []
    for i in range(n):
        try:
            br, x_b, y_b, z_b, uh, al, ga, ri, zf = _attitude_step(v_a[i], sp[i], cache, model, cfg)
        except FlatnessError as exc:
            exc.index = i
            if on_error == "raise":
                raise
            valid[i] = False
            errors.append(exc)
            R[i] = np.eye(3)
            z_fix[i] = cache.z_b_fix
            continue
        branch[i] = int(br)
        R[i] = np.column_stack([x_b, y_b, z_b])
        u_hat[i], alpha[i], gamma[i], r[i], z_fix[i] = uh, al, ga, ri, zf

    a_T = np.zeros(n)
    N = np.zeros((n, 4, 4))
    hv = np.zeros((n, 4))
    N_dot = np.zeros((n, 4, 4))
    h_dot = np.zeros((n, 4))
    det = np.zeros(n)
    b = np.zeros((n, 4))
    c2 = np.zeros((n, 4))
    grad = np.zeros((n, 4, 9)) if gradients else None

    for br in Branch:
        idx = np.flatnonzero(valid & (branch == int(br)))
        if idx.size == 0:
            continue
        Ri = R[idx]
        if br == Branch.LOW_AIRSPEED:
            aT = np.linalg.norm(sp[idx], axis=1)
            N2, h2 = _noaero_rows(Ri, aT, j[idx])
            N1, h1, k = _heading_row(z_fix[idx], sp[idx], j[idx], Ri[:, :, 2])
            ae = None
            Psi = None
        else:
            ae = _Aero(Ri, v_a[idx], alpha[idx], model)
            aT = _dot(Ri[:, :, 0], sp[idx]) - ae.f_a[:, 0] * ae.inv_m
            N2, h2, Psi = _aero_rows(Ri, aT, ae, va_dot[idx], j[idx])
            if br == Branch.COORDINATED:
                N1, h1 = _lateral_row(ae, Ri[:, :, 1], va_dot[idx])
                k = None
            else:
                N1, h1, k = _heading_row(z_fix[idx], sp[idx], j[idx], Ri[:, :, 2])
        Ni = np.concatenate([N1[:, None, :], N2], 1)
        hi = np.concatenate([h1[:, None], h2], 1)
        deti = _closed_form_det(br, sp[idx], v_a[idx], alpha[idx], gamma[idx], aT, ae, k)
        bad = np.abs(deti) < cfg.det_tol
        if br == Branch.SMALL_GAMMA:
            psi23 = small_gamma_psi23_batch(sp[idx], alpha[idx], gamma[idx], ae)
            bad |= np.abs(psi23) < 1e-8
        if np.any(bad):
            first = int(idx[np.flatnonzero(bad)[0]])
            if on_error == "raise":
                raise SingularNError(f"rate matrix singular at sample {first} (branch {br.name})",
                                     det=float(deti[np.flatnonzero(bad)[0]]), index=first)
            for q in idx[bad]:
                errors.append(SingularNError("rate matrix singular", det=0.0, index=int(q)))
            valid[idx[bad]] = False
            keep = ~bad
            idx = idx[keep]
            if idx.size == 0:
                continue
            Ri, aT, Ni, hi, deti, N2 = Ri[keep], aT[keep], Ni[keep], hi[keep], deti[keep], N2[keep]
            if ae is not None:
                ae = _Aero(Ri, v_a[idx], alpha[idx], model)
                Psi = Psi[keep]
            if k is not None:
                k = k[keep]
        bi = np.linalg.solve(Ni, hi[:, :, None])[:, :, 0]
        omega = bi[:, 1:]
        if br == Branch.LOW_AIRSPEED:
            N2d, h2d = _noaero_dot(Ri, omega, aT, sp[idx], j[idx], s[idx])
            N1d, h1d = _heading_dot(z_fix[idx], sp[idx], j[idx], s[idx], Ri, omega, k)
        else:
            N2d, h2d = _aero_dot(Ri, omega, bi[:, 0], ae, Psi, va_dot[idx], va_ddot[idx],
                                 v_a[idx], s[idx])
            if br == Branch.COORDINATED:
                N1d, h1d = _lateral_dot(ae, Ri, omega, va_dot[idx], va_ddot[idx])
            else:
                N1d, h1d = _heading_dot(z_fix[idx], sp[idx], j[idx], s[idx], Ri, omega, k)
        Nd = np.concatenate([N1d[:, None, :], N2d], 1)
        hd = np.concatenate([h1d[:, None], h2d], 1)
        ci = np.linalg.solve(Ni, (hd - _mv(Nd, bi))[:, :, None])[:, :, 0]
        a_T[idx], N[idx], hv[idx], N_dot[idx], h_dot[idx] = aT, Ni, hi, Nd, hd
        det[idx], b[idx], c2[idx] = deti, bi, ci
        if gradients:
            ctx = dict(v_a=v_a[idx], sp=sp[idx], va_dot=va_dot[idx], jerk=j[idx], R=Ri, b=bi,
                       a_T=aT, N=Ni, z_fix=z_fix[idx], u_hat=u_hat[idx], r=r[idx],
                       alpha=alpha[idx], gamma=gamma[idx], ae=ae, Psi=Psi)
            grad[idx] = _gradients(br, ctx, model)

    omega = b[:, 1:]
    omega_dot = c2[:, 1:]
    J = model.J
    v_aB = _mtv(R, v_a)
    V = np.linalg.norm(v_aB, axis=1)
    alpha_flow = np.arctan2(v_aB[:, 2], v_aB[:, 0])
    M_a = (model.half_rho_S * model.cbar * V**2)[:, None] * np.asarray(
        model.coeffs.moments(alpha_flow), dtype=float).reshape(n, 3)
    Jw = omega @ J.T
    tau = omega_dot @ J.T - M_a + _cross(omega, Jw)
    tau[~valid] = 0.0
    return ReferenceTrajectory(
        t=t, p=p, v=v, R=R, a_T=a_T, omega=omega, a_T_dot=b[:, 0], a_T_ddot=c2[:, 0],
        omega_dot=omega_dot, tau=tau, alpha=alpha, gamma=gamma, branch=branch, v_a=v_a, sp=sp,
        N=N, h=hv, N_dot=N_dot, h_dot=h_dot, det=det, valid=valid, errors=errors, grad=grad)


def small_gamma_psi23_batch(sp, alpha, gamma, ae):
    sn = np.linalg.norm(sp, axis=1)
    return sn * np.cos(gamma - alpha) - ae.qdyn * ae.inv_m * ae.cyb * np.cos(alpha)


def _wind_triplet(w_bar):
    """Accepts a 3-vector or a (w, w_dot, w_ddot) triple."""
    if w_bar is None:
        return np.zeros(3), np.zeros(3), np.zeros(3)
    if isinstance(w_bar, (tuple, list)) and len(w_bar) == 3 and np.ndim(w_bar[0]) == 1:
        return tuple(np.asarray(x, dtype=float) for x in w_bar)
    return np.asarray(w_bar, dtype=float), np.zeros(3), np.zeros(3)


def flatness_transform(sample, w_bar, cache, model, config=None, t=0.0):
    """Transform one flat sample; updates the cache exactly once."""
    w, wd, wdd = _wind_triplet(w_bar)
    out = transform_batch(sample.v[None], sample.a[None], sample.j[None], sample.s[None], cache,
                          model, config, wind=w, wind_dot=wd, wind_ddot=wdd, p=sample.p[None],
                          t=np.array([t]))
    return out.sample(0)


def flatness_gradients(sample, w_bar, cache, model, config=None):
    """d(a_T, omega)/d(v, a, jerk) as a 4x9 matrix; the cache is advanced."""
    w, wd, wdd = _wind_triplet(w_bar)
    out = transform_batch(sample.v[None], sample.a[None], sample.j[None], sample.s[None], cache,
                          model, config, wind=w, wind_dot=wd, wind_ddot=wdd, gradients=True)
    return out.grad[0]


def transform_low_airspeed(sample, z_b_fix, model, w_bar=None, config=None):
    cfg = config or FlatnessConfig()
    w, _, _ = _wind_triplet(w_bar)
    if np.linalg.norm(sample.v - w) >= cfg.v_min:
        raise FlatnessError("airspeed above v_min; low-airspeed branch not applicable")
    cache = FlatnessCache(np.array([0.0, 1.0, 0.0]), np.asarray(z_b_fix, dtype=float))
    return flatness_transform(sample, w_bar, cache, model, cfg)


def transform_small_gamma(sample, z_b_fix, model, w_bar=None, alpha_prev=0.0, config=None):
    cfg = config or FlatnessConfig()
    w, _, _ = _wind_triplet(w_bar)
    v_a = sample.v - w
    sp = sample.a - G_VEC
    V = np.linalg.norm(v_a)
    if V < cfg.v_min or np.linalg.norm(np.cross(v_a, sp)) >= np.sin(cfg.gamma_min) * V * np.linalg.norm(sp):
        raise FlatnessError("sample not in the small-gamma branch")
    cache = FlatnessCache(np.array([0.0, 1.0, 0.0]), np.asarray(z_b_fix, dtype=float), alpha_prev,
                          Branch.SMALL_GAMMA)
    return flatness_transform(sample, w_bar, cache, model, cfg)


def model_acceleration(ref, model, wind=None, coordinated=True):
    """g + a_T R e1 + R f_a / m at a reference sample (coordinated force by default)."""
    w = np.zeros(3) if wind is None else np.asarray(wind, dtype=float)
    f_a = aero_force(ref.R, ref.v - w, model, coordinated=coordinated)
    return G_VEC + ref.a_T * ref.R[:, 0] + ref.R @ f_a / model.mass
