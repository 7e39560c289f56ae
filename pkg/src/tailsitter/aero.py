"""Aerodynamic coefficient models, airflow angles, force/moment and force Jacobian.

Coefficients are modelled on the beta = 0 slice only (C_L, C_D as functions
of alpha) plus the side-force slope dC_Y/dbeta(alpha). With this structure
the symmetric-airframe conditions hold by construction.

The body-frame coefficient vector is

    c_x = -C_D cos(a) + C_L sin(a)
    c_y = dC_Y/dbeta * beta
    c_z = -C_D sin(a) - C_L cos(a)
"""

import json
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .so3 import E2, skew

AirflowState = namedtuple("AirflowState", "V alpha beta v_aB degenerate")
AeroCoeffs = namedtuple("AeroCoeffs", "c dc d2c cy_beta dcy_beta")


class FlatPlateCoefficients:
    """C_L = 2 sin a cos a, C_D = 2 sin^2 a, dC_Y/dbeta = -0.5.

    Gives c_x = 0 and c_z = -2 sin a, which makes many flatness quantities
    checkable by hand.
    """

    kind = "flat_plate"

    def __init__(self, dcy_dbeta=-0.5):
        self.dcy_dbeta = float(dcy_dbeta)

    def lift_drag(self, alpha):
        s2, c2 = np.sin(2 * alpha), np.cos(2 * alpha)
        CL, dCL, d2CL = s2, 2 * c2, -4 * s2
        CD, dCD, d2CD = 1 - c2, 2 * s2, 4 * c2
        return CL, dCL, d2CL, CD, dCD, d2CD

    def side_slope(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return np.full(alpha.shape, self.dcy_dbeta), np.zeros(alpha.shape)

    def moments(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return np.zeros(alpha.shape + (3,))

    def to_dict(self):
        return {"kind": self.kind}


class TableCoefficients:
    """Cubic-spline interpolation of tabulated coefficients on a uniform alpha grid."""

    kind = "table"

    def __init__(self, alpha_grid, CL, CD, dCY_dbeta, moments=None):
        a = np.asarray(alpha_grid, dtype=float)
        if a.ndim != 1 or a.size < 4 or np.any(np.diff(a) <= 0):
            raise ValueError("alpha grid must be strictly increasing with >= 4 points")
        self.alpha_grid = a
        self._raw = {"CL": np.asarray(CL, float), "CD": np.asarray(CD, float),
                     "dCY_dbeta": np.asarray(dCY_dbeta, float)}
        if np.any(self._raw["CD"] < 0):
            raise ValueError("C_D must be nonnegative")
        periodic = np.isclose(a[-1] - a[0], 2 * np.pi)
        self._period = a[-1] - a[0] if periodic else None

        def spline(y):
            y = np.asarray(y, dtype=float)
            if periodic and np.allclose(y[0], y[-1]):
                yy = y.copy()
                yy[-1] = yy[0]
                return CubicSpline(a, yy, bc_type="periodic")
            return CubicSpline(a, y)

        self._cl = spline(CL)
        self._cd = spline(CD)
        self._cyb = spline(dCY_dbeta)
        self._mom = None
        if moments is not None:
            self._raw["moments"] = np.asarray(moments, float)
            self._mom = [spline(np.asarray(moments)[:, k]) for k in range(3)]

    def _wrap(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if self._period is None:
            return np.clip(alpha, self.alpha_grid[0], self.alpha_grid[-1])
        return (alpha - self.alpha_grid[0]) % self._period + self.alpha_grid[0]

    def lift_drag(self, alpha):
        a = self._wrap(alpha)
        return (self._cl(a), self._cl(a, 1), self._cl(a, 2),
                self._cd(a), self._cd(a, 1), self._cd(a, 2))

    def side_slope(self, alpha):
        a = self._wrap(alpha)
        return self._cyb(a), self._cyb(a, 1)

    def moments(self, alpha):
        a = self._wrap(alpha)
        if self._mom is None:
            return np.zeros(np.shape(a) + (3,))
        return np.stack([s(a) for s in self._mom], axis=-1)

    def to_dict(self):
        d = {"kind": self.kind, "alpha_grid": self.alpha_grid.tolist(),
             "CL": self._raw["CL"].tolist(), "CD": self._raw["CD"].tolist(),
             "dCY_dbeta": self._raw["dCY_dbeta"].tolist()}
        if "moments" in self._raw:
            d["moments"] = self._raw["moments"].tolist()
        return d


@dataclass(frozen=True)
class AeroModel:
    rho: float = 1.225
    S: float = 0.2
    cbar: float = 0.2
    mass: float = 1.2
    J: np.ndarray = field(default_factory=lambda: np.diag([0.015, 0.02, 0.03]))
    coeffs: object = field(default_factory=FlatPlateCoefficients)

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float).reshape(3, 3)
        object.__setattr__(self, "J", J)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.rho < 0 or self.S < 0:
            raise ValueError("rho and S must be nonnegative")

    @property
    def half_rho_S(self):
        return 0.5 * self.rho * self.S

    def with_area(self, S):
        return AeroModel(self.rho, S, self.cbar, self.mass, self.J, self.coeffs)

    def to_dict(self):
        d = {"rho": self.rho, "S": self.S, "cbar": self.cbar, "m": self.mass,
             "J": self.J.reshape(-1).tolist()}
        d.update(self.coeffs.to_dict())
        return d


def model_from_dict(d):
    kind = d.get("kind", "flat_plate")
    if kind == "flat_plate":
        coeffs = FlatPlateCoefficients(d.get("dCY_dbeta", -0.5))
    elif kind == "table":
        coeffs = TableCoefficients(d["alpha_grid"], d["CL"], d["CD"], d["dCY_dbeta"],
                                   d.get("moments"))
    else:
        raise ValueError(f"unknown aero model kind {kind!r}")
    J = d.get("J", [0.015, 0, 0, 0, 0.02, 0, 0, 0, 0.03])
    return AeroModel(rho=float(d.get("rho", 1.225)), S=float(d.get("S", 0.2)),
                     cbar=float(d.get("cbar", 0.2)), mass=float(d.get("m", 1.2)),
                     J=np.asarray(J, float).reshape(3, 3), coeffs=coeffs)


def load_model(path):
    with open(path) as f:
        return model_from_dict(json.load(f))


def airflow_angles(v_aB):
    v_aB = np.asarray(v_aB, dtype=float)
    V = float(np.linalg.norm(v_aB))
    if V == 0.0:
        return AirflowState(0.0, 0.0, 0.0, v_aB, True)
    alpha = float(np.arctan2(v_aB[2], v_aB[0]))
    beta = float(np.arcsin(np.clip(v_aB[1] / V, -1.0, 1.0)))
    return AirflowState(V, alpha, beta, v_aB, False)


def coeff_vector(alpha, model):
    """Body coefficient vector at beta = 0 and its alpha derivatives.

    Works elementwise on arrays of alpha; vector outputs have a trailing axis of 3.
    Returns AeroCoeffs(c, dc/da, d2c/da2, dc_y/dbeta, d(dc_y/dbeta)/da).
    """
    alpha = np.asarray(alpha, dtype=float)
    CL, dCL, d2CL, CD, dCD, d2CD = model.coeffs.lift_drag(alpha)
    sa, ca = np.sin(alpha), np.cos(alpha)
    zero = np.zeros_like(alpha)
    cx = -CD * ca + CL * sa
    cz = -CD * sa - CL * ca
    dcx = -dCD * ca + CD * sa + dCL * sa + CL * ca
    dcz = -dCD * sa - CD * ca - dCL * ca + CL * sa
    d2cx = -d2CD * ca + 2 * dCD * sa + CD * ca + d2CL * sa + 2 * dCL * ca - CL * sa
    d2cz = -d2CD * sa - 2 * dCD * ca + CD * sa - d2CL * ca + 2 * dCL * sa + CL * ca
    cyb, dcyb = model.coeffs.side_slope(alpha)
    return AeroCoeffs(np.stack([cx, zero, cz], -1), np.stack([dcx, zero, dcz], -1),
                      np.stack([d2cx, zero, d2cz], -1), cyb, dcyb)


def aero_force_body(v_aB, model, coordinated=False):
    """f_a = 1/2 rho V^2 S c(alpha, beta) in body axes.

    With coordinated=True the sideslip is taken as zero (the flatness
    transform's evaluation); otherwise the linear side force is included.
    """
    flow = airflow_angles(v_aB)
    if flow.degenerate:
        return np.zeros(3)
    co = coeff_vector(flow.alpha, model)
    c = co.c.copy()
    if not coordinated:
        c[1] = co.cy_beta * flow.beta
    return model.half_rho_S * flow.V**2 * c


def aero_force(R, v_a, model, coordinated=False):
    """Aerodynamic force in body axes for world air velocity v_a and attitude R."""
    return aero_force_body(np.asarray(R).T @ np.asarray(v_a, dtype=float), model, coordinated)


def aero_force_jacobian(v_aB, model):
    """d f_a / d v_aB at beta = 0 (lateral component of v_aB ignored).

    (rho S / 2)(2 c v^T + dc/da v^T [e2] + V dc/dbeta e2^T); zero for V < 1e-9.
    """
    v = np.array([v_aB[0], 0.0, v_aB[2]], dtype=float)
    V = np.linalg.norm(v)
    if V < 1e-9:
        return np.zeros((3, 3))
    alpha = np.arctan2(v[2], v[0])
    co = coeff_vector(alpha, model)
    cbeta = np.array([0.0, float(co.cy_beta), 0.0])
    return model.half_rho_S * (2.0 * np.outer(co.c, v) + np.outer(co.dc, v) @ skew(E2)
                               + V * np.outer(cbeta, E2))


def alpha_beta_gradients(v_aB):
    """d alpha/d v_aB = v^T [e2] / V^2 and d beta / d v_aB = e2^T / V at beta = 0."""
    v = np.asarray(v_aB, dtype=float)
    V = np.linalg.norm(v)
    return v @ skew(E2) / V**2, E2 / V


def aero_moment(airflow, model):
    """M_a = 1/2 rho V^2 S cbar [C_l, C_m, C_n](alpha, 0)."""
    if airflow.degenerate or airflow.V == 0.0:
        return np.zeros(3)
    cm = np.asarray(model.coeffs.moments(airflow.alpha), dtype=float)
    return model.half_rho_S * model.cbar * airflow.V**2 * cm


def default_model():
    return AeroModel()
