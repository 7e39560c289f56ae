"""Rigid-body tail-sitter models, wind fields, RK4 integration and a rate actuator.

World frame is north-east-down, so gravity is +9.8 along the third axis.
The body x axis is the thrust axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .aero import aero_force_body, aero_moment, airflow_angles
from .so3 import project_to_so3, skew

GRAVITY = 9.8
G_VEC = np.array([0.0, 0.0, GRAVITY])


class SimulationDiverged(RuntimeError):
    pass


@dataclass
class VehicleState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return VehicleState(self.p.copy(), self.v.copy(), self.R.copy(), self.omega.copy())

    def as_vector(self):
        return np.concatenate([self.p, self.v, self.R.reshape(-1), self.omega])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:15].reshape(3, 3).copy(), x[15:18].copy())


@dataclass
class ControlInput:
    a_T: float
    omega: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))


class WindField:
    """Wind velocity w(t) with first and second time derivatives."""

    def w(self, t):
        raise NotImplementedError

    def w_dot(self, t):
        return np.zeros(3)

    def w_ddot(self, t):
        return np.zeros(3)

    def sample(self, t):
        return self.w(t), self.w_dot(t), self.w_ddot(t)


class ConstantWind(WindField):
    def __init__(self, w=(0.0, 0.0, 0.0)):
        self.value = np.asarray(w, dtype=float).copy()

    def w(self, t):
        return self.value.copy()


class PiecewiseConstantWind(WindField):
    """Wind held constant between switch times; derivatives are zero almost everywhere."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(-1, 3)
        if len(self.times) != len(self.values):
            raise ValueError("one wind vector per switch time")

    def w(self, t):
        i = np.searchsorted(self.times, t, side="right") - 1
        if i < 0:
            return np.zeros(3)
        return self.values[i].copy()


class FunctionWind(WindField):
    """Wind from user callables returning w, w_dot, w_ddot."""

    def __init__(self, w, w_dot=None, w_ddot=None):
        self._w, self._wd, self._wdd = w, w_dot, w_ddot

    def w(self, t):
        return np.asarray(self._w(t), dtype=float)

    def w_dot(self, t):
        return np.zeros(3) if self._wd is None else np.asarray(self._wd(t), dtype=float)

    def w_ddot(self, t):
        return np.zeros(3) if self._wdd is None else np.asarray(self._wdd(t), dtype=float)


def as_wind_field(wind):
    if isinstance(wind, WindField):
        return wind
    if wind is None:
        return ConstantWind()
    return ConstantWind(wind)


def _translational(v, R, a_T, wind, model):
    v_aB = R.T @ (v - wind)
    f_a = aero_force_body(v_aB, model)
    return G_VEC + a_T * R[:, 0] + R @ f_a / model.mass


def full_derivative(x, u, wind, model):
    """Returns (p_dot, v_dot, R_dot, omega_dot) of the rigid-body model."""
    wind = np.asarray(wind, dtype=float)
    v_dot = _translational(x.v, x.R, u.a_T, wind, model)
    flow = airflow_angles(x.R.T @ (x.v - wind))
    M_a = aero_moment(flow, model)
    Jw = model.J @ x.omega
    omega_dot = np.linalg.solve(model.J, u.tau + M_a - np.cross(x.omega, Jw))
    return x.v.copy(), v_dot, x.R @ skew(x.omega), omega_dot


def reduced_derivative(x, a_T, omega, wind, model):
    """Body rates act as an input: returns (p_dot, v_dot, R_dot)."""
    wind = np.asarray(wind, dtype=float)
    v_dot = _translational(x.v, x.R, a_T, wind, model)
    return x.v.copy(), v_dot, x.R @ skew(np.asarray(omega, dtype=float))


def _check_finite(x, t):
    if not (np.all(np.isfinite(x.p)) and np.all(np.isfinite(x.v))
            and np.all(np.isfinite(x.R)) and np.all(np.isfinite(x.omega))):
        raise SimulationDiverged(f"non-finite state at t={t:.6f}")


def rk4_step(x, u, t, dt, wind_field, model, mode="reduced", continuous=False):
    """One classical RK4 step followed by polar re-orthonormalization.

    u is a ControlInput, or with continuous=True a callable u(t, x) evaluated
    at every stage. In reduced mode the body rate is u.omega; in full mode it
    is part of the state and u.tau drives it.
    """
    wind_field = as_wind_field(wind_field)

    def control(ts, xs):
        return u(ts, xs) if continuous else u

    def f(ts, xs):
        us = control(ts, xs)
        w = wind_field.w(ts)
        if mode == "full":
            return full_derivative(xs, us, w, model)
        pd, vd, Rd = reduced_derivative(xs, us.a_T, us.omega, w, model)
        return pd, vd, Rd, np.zeros(3)

    def shifted(k, h):
        return VehicleState(x.p + h * k[0], x.v + h * k[1], x.R + h * k[2], x.omega + h * k[3])

    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, shifted(k1, 0.5 * dt))
    k3 = f(t + 0.5 * dt, shifted(k2, 0.5 * dt))
    k4 = f(t + dt, shifted(k3, dt))
    comb = [(a + 2 * b + 2 * c + d) * (dt / 6.0) for a, b, c, d in zip(k1, k2, k3, k4)]
    out = VehicleState(x.p + comb[0], x.v + comb[1], project_to_so3(x.R + comb[2]),
                       x.omega + comb[3])
    if mode == "reduced":
        last = control(t + dt, out) if continuous else u
        out.omega = np.asarray(last.omega, dtype=float).copy()
    _check_finite(out, t + dt)
    return out


def integrate_rk4(x0, u_of_t, wind_field, dt, steps, model, mode="reduced",
                  continuous=False, t0=0.0):
    """Fixed-step RK4 integration; returns the list of states (length steps + 1).

    u_of_t(t, x) -> ControlInput. With continuous=False the input is held
    over each step (zero-order hold at the step start).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    wind_field = as_wind_field(wind_field)
    xs = [x0.copy()]
    x = x0.copy()
    for k in range(steps):
        t = t0 + k * dt
        u = u_of_t if continuous else u_of_t(t, x)
        x = rk4_step(x, u, t, dt, wind_field, model, mode, continuous)
        xs.append(x)
    return xs


def rate_actuator_step(omega_state, omega_cmd, dt, time_constant=0.03, rate_limit=None):
    """First-order lag toward the commanded rate with an optional per-axis slew clamp."""
    if time_constant <= 0:
        raise ValueError("time constant must be positive")
    delta = (dt / time_constant) * (np.asarray(omega_cmd, float) - np.asarray(omega_state, float))
    if rate_limit is not None:
        lim = rate_limit * dt
        delta = np.clip(delta, -lim, lim)
    return omega_state + delta


def hover_attitude(belly=(1.0, 0.0, 0.0)):
    """Attitude with body x pointing up and body z toward the given horizontal direction."""
    x_b = np.array([0.0, 0.0, -1.0])
    z_b = np.asarray(belly, dtype=float).copy()
    z_b = z_b - (z_b @ x_b) * x_b
    z_b /= np.linalg.norm(z_b)
    y_b = np.cross(z_b, x_b)
    return np.column_stack([x_b, y_b, z_b])
