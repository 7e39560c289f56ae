"""Condensed box-constrained QP of the error-state MPC and its embedded solver."""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .error import linearize

# position weights per flight regime; velocity and attitude weights are shared
POSITION_WEIGHTS = {"indoor": 1800.0, "outdoor": 1200.0, "aerobatics": 900.0}
# default terminal weight P_N = Q * TERMINAL_SCALE: with a 0.12 s horizon P_N = Q
# leaves a slow, lightly damped loop; heavier terminal velocity weight damps it
TERMINAL_SCALE = np.array([2.0, 2.0, 2.0, 100.0, 100.0, 100.0, 10.0, 10.0, 10.0])


class BoxWarning(UserWarning):
    pass


def regime_weights(regime="indoor"):
    """Diagonal Q for a flight regime: (p, p, p, 5, 5, 5, 50, 50, 50)."""
    if regime not in POSITION_WEIGHTS:
        raise ValueError(f"unknown regime {regime!r}")
    q = POSITION_WEIGHTS[regime]
    return np.array([q, q, q, 5.0, 5.0, 5.0, 50.0, 50.0, 50.0])


@dataclass
class MpcConfig:
    N: int = 12
    dt: float = 0.01
    Q: np.ndarray = field(default_factory=regime_weights)
    R: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.4, 0.4, 0.4]))
    P: np.ndarray = None      # terminal weight, defaults to Q * TERMINAL_SCALE
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, -6.0, -6.0, -6.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([20.0, 6.0, 6.0, 6.0]))
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        self.N = int(self.N)
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.Q = np.asarray(self.Q, dtype=float).reshape(9)
        self.R = np.asarray(self.R, dtype=float).reshape(4)
        self.P = self.Q * TERMINAL_SCALE if self.P is None else np.asarray(self.P, dtype=float).reshape(9)
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(4)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(4)
        if np.any(self.Q <= 0) or np.any(self.R <= 0) or np.any(self.P <= 0):
            raise ValueError("MPC weights must be positive")

    def scaled(self, lam):
        return MpcConfig(self.N, self.dt, lam * self.Q, lam * self.R, lam * self.P,
                         self.u_min, self.u_max, self.max_iter, self.tol)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        regime = d.pop("regime", None)
        if regime is not None and "Q" not in d:
            d["Q"] = regime_weights(regime)
        known = {"N", "dt", "Q", "R", "P", "u_min", "u_max", "max_iter", "tol"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown MPC config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return {"N": self.N, "dt": self.dt, "Q": self.Q.tolist(), "R": self.R.tolist(),
                "P": self.P.tolist(), "u_min": self.u_min.tolist(),
                "u_max": self.u_max.tolist(), "max_iter": self.max_iter, "tol": self.tol}


@dataclass
class QP:
    """minimize 1/2 z^T H z + g^T z + c subject to lo <= z <= hi.

    z stacks the command offsets u_k - u_d,k over the horizon.
    """
    H: np.ndarray
    g: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c: float = 0.0
    u_d: np.ndarray = None    # (N, 4) reference inputs

    def cost(self, z):
        return float(0.5 * z @ self.H @ z + self.g @ z + self.c)


@dataclass
class QPSolution:
    z: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int
    status: str
    solve_time: float


def horizon_samples(horizon, N):
    """First N samples, holding the terminal one if the horizon is short."""
    if len(horizon) == 0:
        raise ValueError("empty reference horizon")
    return [horizon[min(k, len(horizon) - 1)] for k in range(N)]


def build_qp(horizon, dx0, config, model, w_bar=None, systems=None):
    """Condense dx_{k+1} = (I + dt F_x,k) dx_k + dt F_u,k du_k into a QP over z = -du.

    The horizon is a sequence of ReferenceSamples spaced by config.dt. The
    terminal sample is held if fewer than N samples are given. Precomputed
    linearizations may be passed as `systems`.
    """
    N, dt = config.N, config.dt
    samples = horizon_samples(horizon, N)
    if systems is None:
        systems = [linearize(s, model, w_bar) for s in samples]
    else:
        systems = horizon_samples(systems, N)
    nx, nu = 9, 4
    dx0 = np.asarray(dx0, dtype=float).reshape(nx)
    G = np.zeros((N * nx, N * nu))
    Phi = np.zeros((N * nx, nx))
    for k in range(N):
        A = np.eye(nx) + dt * systems[k].F_x
        B = -dt * systems[k].F_u
        rows = slice(k * nx, (k + 1) * nx)
        if k == 0:
            Phi[rows] = A
        else:
            prev = slice((k - 1) * nx, k * nx)
            Phi[rows] = A @ Phi[prev]
            G[rows, :k * nu] = A @ G[prev, :k * nu]
        G[rows, k * nu:(k + 1) * nu] = B
    qbar = np.concatenate([np.tile(config.Q, N - 1), config.P])
    rbar = np.tile(config.R, N)
    free = Phi @ dx0
    GtQ = G.T * qbar
    H = 2.0 * (GtQ @ G + np.diag(rbar))
    H = 0.5 * (H + H.T)
    g = 2.0 * GtQ @ free
    c = float(dx0 @ (config.Q * dx0) + free @ (qbar * free))
    u_d = np.array([s.u for s in samples])
    lo = (config.u_min[None, :] - u_d).reshape(-1)
    hi = (config.u_max[None, :] - u_d).reshape(-1)
    bad = lo > hi
    if np.any(bad):
        warnings.warn("empty input box; bounds collapsed to a point", BoxWarning)
        mid = 0.5 * (lo[bad] + hi[bad])
        lo[bad] = mid
        hi[bad] = mid
    return QP(H, g, lo, hi, c, u_d)


def kkt_residual(qp, z):
    """Natural residual |z - P(z - (Hz + g))|_inf: stationarity plus complementarity."""
    grad = qp.H @ z + qp.g
    return float(np.max(np.abs(z - np.clip(z - grad, qp.lo, qp.hi)), initial=0.0))


def _polish(qp, z, tol, rounds=20):
    """Primal active-set refinement started from the active set of z."""
    n = len(z)
    grad = qp.H @ z + qp.g
    span = 1e-7 * (1.0 + np.abs(qp.lo))
    at_lo = (z <= qp.lo + span) & (grad >= 0)
    at_hi = (z >= qp.hi - 1e-7 * (1.0 + np.abs(qp.hi))) & (grad <= 0) & ~at_lo
    point = qp.lo == qp.hi
    at_lo |= point
    for _ in range(rounds):
        fixed = at_lo | at_hi
        x = np.where(at_lo, qp.lo, np.where(at_hi, qp.hi, 0.0))
        free = ~fixed
        if np.any(free):
            Hff = qp.H[np.ix_(free, free)]
            rhs = -qp.g[free] - qp.H[np.ix_(free, fixed)] @ x[fixed]
            x[free] = cho_solve(cho_factor(Hff), rhs)
        low_viol = free & (x < qp.lo)
        high_viol = free & (x > qp.hi)
        if np.any(low_viol) or np.any(high_viol):
            at_lo |= low_viol
            at_hi |= high_viol
            continue
        grad = qp.H @ x + qp.g
        # release the bound with the most wrongly signed multiplier
        wrong = np.where(at_lo & ~point, np.minimum(grad, 0.0), 0.0) \
            - np.where(at_hi & ~point, np.maximum(grad, 0.0), 0.0)
        i = int(np.argmin(wrong)) if n else 0
        if n and wrong[i] < -tol:
            at_lo[i] = at_hi[i] = False
            continue
        return x
    return np.clip(z, qp.lo, qp.hi)


def solve_qp(qp, z0=None, max_iter=500, tol=1e-6):
    """Box-constrained QP: Cholesky when the box is inactive, else ADMM with active-set polish.

    ADMM alternates a linear solve on H + sigma I with a projection onto the
    box; every few iterations the active set of the projected iterate is
    polished by an exact reduced solve. Stops when the KKT residual is below
    tol or after max_iter ADMM iterations (status "max_iter").
    """
    t0 = time.perf_counter()
    n = len(qp.g)
    fac = cho_factor(qp.H)
    z = cho_solve(fac, -qp.g)
    if np.all(z >= qp.lo) and np.all(z <= qp.hi):
        return QPSolution(z, qp.cost(z), kkt_residual(qp, z), 0, "unconstrained",
                          time.perf_counter() - t0)
    ev = np.linalg.eigvalsh(qp.H)
    sigma = float(np.sqrt(max(ev[0], 1e-12) * ev[-1]))
    K = cho_factor(qp.H + sigma * np.eye(n))
    y = np.clip(z if z0 is None else np.asarray(z0, dtype=float), qp.lo, qp.hi)
    lam = np.zeros(n)
    best, best_res = y, kkt_residual(qp, y)
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        x = cho_solve(K, sigma * (y - lam) - qp.g)
        y = np.clip(x + lam, qp.lo, qp.hi)
        lam += x - y
        if it % 5 == 1:
            cand = _polish(qp, y, tol)
            res = kkt_residual(qp, cand)
            if res < best_res:
                best, best_res = cand, res
            if best_res < tol:
                status = "optimal"
                break
    z = np.clip(best, qp.lo, qp.hi)
    return QPSolution(z, qp.cost(z), kkt_residual(qp, z), it, status,
                      time.perf_counter() - t0)
