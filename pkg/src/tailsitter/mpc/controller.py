"""Receding-horizon tracking step: error state, condensed QP, command."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..dynamics import ControlInput
from .error import error_state_of
from .qp import build_qp, solve_qp


@dataclass
class MpcDiagnostics:
    cost: float
    kkt_residual: float
    iterations: int
    solve_time: float
    status: str
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {"cost": self.cost, "kkt_residual": self.kkt_residual,
                "iterations": self.iterations, "solve_time": self.solve_time,
                "status": self.status, "warnings": list(self.warnings)}


class MpcController:
    """Error-state MPC with within-run warm start of the shifted previous solution."""

    def __init__(self, config, model, w_bar=None):
        self.config = config
        self.model = model
        self.w_bar = None if w_bar is None else np.asarray(w_bar, dtype=float)
        self._z_prev = None

    def reset(self):
        self._z_prev = None

    def step(self, x, horizon, w_bar=None):
        w_bar = self.w_bar if w_bar is None else w_bar
        u, diag, z = _control(x, horizon, self.config, self.model, w_bar, self._z_prev)
        self._z_prev = np.concatenate([z[4:], z[-4:]])
        return u, diag


def _control(x, horizon, config, model, w_bar, z0):
    if len(horizon) == 0:
        raise ValueError("the reference horizon is empty")
    dx0 = error_state_of(horizon[0], x)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        qp = build_qp(horizon, dx0, config, model, w_bar)
        sol = solve_qp(qp, z0, config.max_iter, config.tol)
    for w in caught:
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    u = np.clip(qp.u_d[0] + sol.z[:4], config.u_min, config.u_max)
    diag = MpcDiagnostics(sol.cost, sol.kkt_residual, sol.iterations, sol.solve_time,
                          sol.status, [str(w.message) for w in caught])
    return ControlInput(float(u[0]), u[1:4].copy()), diag, sol.z


def control_step(x, horizon, config, model, w_bar=None, warm_start=None):
    """u_cmd = u_d,0 + z_0* for vehicle state x and a reference horizon.

    The horizon is a sequence of ReferenceSamples at config.dt spacing; if it
    is shorter than N its last sample is held. Returns (ControlInput, MpcDiagnostics).
    The disturbance error is taken as zero; w_bar enters through the linearization.
    """
    u, diag, _ = _control(x, horizon, config, model, w_bar, warm_start)
    return u, diag
