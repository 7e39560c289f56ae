"""Error state on the manifold, its nonlinear dynamics and the first-order linearization.

Conventions: dx = (p_d - p, v_d - v, Log(R^T R_d)) and du = u_d - u, both
reference minus actual. The surrogate wind error is dw = w_bar - w.
"""

from dataclasses import dataclass

import numpy as np

from ..aero import aero_force_body, aero_force_jacobian
from ..so3 import exp_so3, jacobian_A, log_so3, skew

E1 = np.array([1.0, 0.0, 0.0])


@dataclass
class LinearizedErrorSystem:
    F_x: np.ndarray   # (9, 9), per second
    F_u: np.ndarray   # (9, 4)
    F_w: np.ndarray   # (9, 3)


def _wind(w):
    return np.zeros(3) if w is None else np.asarray(w, dtype=float)


def error_state(p_d, v_d, R_d, p, v, R):
    """Stacked 9-vector (dp, dv, dtheta) with dtheta = Log(R^T R_d)."""
    return np.concatenate([np.asarray(p_d, float) - p, np.asarray(v_d, float) - v,
                           log_so3(np.asarray(R).T @ R_d)])


def error_state_of(sample, x):
    """Error between a ReferenceSample and a VehicleState."""
    return error_state(sample.p, sample.v, sample.R, x.p, x.v, x.R)


def actual_from_error(sample, dx, du=None):
    """Reconstruct (p, v, R, a_T, omega) from the reference and the error pair."""
    dx = np.asarray(dx, dtype=float)
    p = sample.p - dx[0:3]
    v = sample.v - dx[3:6]
    R = sample.R @ exp_so3(dx[6:9]).T
    u = sample.u if du is None else sample.u - np.asarray(du, dtype=float)
    return p, v, R, float(u[0]), u[1:4]


def _accel(v, R, a_T, w, model):
    return a_T * R[:, 0] + R @ aero_force_body(R.T @ (v - w), model) / model.mass


def error_dynamics(dx, du, sample, model, w=None, w_bar=None):
    """d/dt of the error state for actual wind w and surrogate wind w_bar.

    The reference satisfies the model under w_bar, so gravity cancels in dv_dot.
    Exponential coordinates evolve with A(dtheta)^{-T} times the relative rate.
    """
    w, w_bar = _wind(w), _wind(w_bar)
    dx = np.asarray(dx, dtype=float)
    _, v, R, a_T, omega = actual_from_error(sample, dx, du)
    dv_dot = (_accel(sample.v, sample.R, sample.a_T, w_bar, model)
              - _accel(v, R, a_T, w, model))
    rel = sample.omega - sample.R.T @ R @ omega
    dtheta_dot = np.linalg.solve(jacobian_A(dx[6:9]).T, rel)
    return np.concatenate([dx[3:6], dv_dot, dtheta_dot])


def linearize(sample, model, w_bar=None):
    """F_x, F_u, F_w of the error dynamics at dx = 0, du = 0, dw = 0.

    The force Jacobian vanishes below 1e-9 m/s airspeed, so the matrices are
    defined at every reference state including hover.
    """
    w_bar = _wind(w_bar)
    R_d = sample.R
    m = model.mass
    v_aB = R_d.T @ (sample.v - w_bar)
    f_a = aero_force_body(v_aB, model)
    Jf = aero_force_jacobian(v_aB, model)
    M_T = R_d[:, 0]
    M_v = R_d @ Jf @ R_d.T / m
    M_R = R_d @ (-sample.a_T * skew(E1) - skew(f_a / m) + Jf @ skew(v_aB / m))
    F_x = np.zeros((9, 9))
    F_x[0:3, 3:6] = np.eye(3)
    F_x[3:6, 3:6] = M_v
    F_x[3:6, 6:9] = M_R
    F_x[6:9, 6:9] = -skew(sample.omega)
    F_u = np.zeros((9, 4))
    F_u[3:6, 0] = M_T
    F_u[6:9, 1:4] = np.eye(3)
    F_w = np.zeros((9, 3))
    F_w[3:6] = -M_v
    return LinearizedErrorSystem(F_x, F_u, F_w)
