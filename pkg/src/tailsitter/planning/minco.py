"""Piecewise 7th-order polynomial trajectories through a point sequence.

Given boundary states (position through jerk) at both ends, interior points
and segment durations, the minimum-snap chain is unique: each segment is a
7th-order polynomial, interior points are interpolated and derivatives up
to order 6 are continuous. Coefficients come from one linear solve, whose
factorization is reused for the adjoint when differentiating a cost.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from ..flatness import FlatSample

ORDER = 8  # coefficients per segment
_FACT = np.array([[np.prod(np.arange(k - d + 1, k + 1)) if k >= d else 0.0
                   for k in range(ORDER)] for d in range(ORDER)])


class IllConditionedError(ValueError):
    pass


_POW = np.maximum(np.arange(ORDER)[None, :] - np.arange(ORDER)[:, None], 0)


def basis(t, d):
    """Row of d-th derivatives of [1, t, ..., t^7] at scalar or array t."""
    t = np.asarray(t, dtype=float)
    return _FACT[d] * np.power(t[..., None], _POW[d])


@dataclass
class FlatTrajectory:
    coeffs: np.ndarray      # (M, 8, 3), local time from 0
    durations: np.ndarray   # (M,)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.durations = np.asarray(self.durations, dtype=float)
        if np.any(self.durations <= 0):
            raise ValueError("segment durations must be positive")
        self._starts = np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def n_segments(self):
        return len(self.durations)

    @property
    def total_duration(self):
        return float(self._starts[-1])

    @property
    def start_times(self):
        return self._starts[:-1].copy()

    def locate(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.total_duration)
        idx = np.clip(np.searchsorted(self._starts, t, side="right") - 1, 0, self.n_segments - 1)
        return idx, t - self._starts[idx]

    def derivative(self, t, d=0):
        """d-th derivative at time(s) t; shape (..., 3)."""
        idx, tl = self.locate(t)
        B = basis(tl, d)
        return np.einsum("...k,...kj->...j", B, self.coeffs[idx])

    def eval_flat(self, t):
        total = self.total_duration
        if t < 0 or t > total:
            import warnings
            warnings.warn(f"time {t} outside [0, {total}], clamped", stacklevel=2)
        vals = [self.derivative(t, d) for d in range(5)]
        return FlatSample(*vals)

    def sample(self, times):
        """Arrays p, v, a, j, s at the given times, each (n, 3)."""
        times = np.asarray(times, dtype=float)
        return tuple(self.derivative(times, d) for d in range(5))

    def boundary(self, end=False):
        t = self.total_duration if end else 0.0
        return np.array([self.derivative(t, d) for d in range(4)])

    def concatenate(self, other):
        return FlatTrajectory(np.concatenate([self.coeffs, other.coeffs]),
                              np.concatenate([self.durations, other.durations]))

    def to_dict(self):
        return {"segments": [{"coeffs": c.reshape(-1).tolist(), "duration": float(T)}
                             for c, T in zip(self.coeffs, self.durations)]}

    @classmethod
    def from_dict(cls, d):
        segs = d["segments"]
        coeffs = np.array([np.asarray(s["coeffs"], float).reshape(ORDER, 3) for s in segs])
        return cls(coeffs, np.array([s["duration"] for s in segs], float))

    def save(self, path, extra=None):
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as f:
            json.dump(d, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


class MincoSystem:
    """Linear system mapping (start, interior points, end, durations) to coefficients."""

    def __init__(self, start, end, durations):
        self.start = np.asarray(start, dtype=float).reshape(4, 3)
        self.end = np.asarray(end, dtype=float).reshape(4, 3)
        self.T = np.asarray(durations, dtype=float)
        M = len(self.T)
        self.M = M
        n = ORDER * M
        A = np.zeros((n, n))
        B0 = _FACT * (_POW == 0)                          # derivative rows at t = 0
        BT = _FACT[None] * np.power(self.T[:, None, None], _POW[None])  # (M, 8, 8)
        A[0:4, 0:ORDER] = B0[0:4]
        for i in range(M - 1):
            base = 4 + ORDER * i
            ci, cn = slice(ORDER * i, ORDER * (i + 1)), slice(ORDER * (i + 1), ORDER * (i + 2))
            A[base, ci] = BT[i, 0]
            A[base + 1, cn] = B0[0]
            A[base + 2:base + 8, ci] = BT[i, 1:7]
            A[base + 2:base + 8, cn] = -B0[1:7]
        A[n - 4:, ORDER * (M - 1):] = BT[-1, 0:4]
        self._BT = BT
        self.A = A
        if np.any(self.T <= 1e-6):
            raise IllConditionedError("segment duration too small for a well-posed solve")
        self._lu = lu_factor(A)

    def rhs(self, points):
        points = np.asarray(points, dtype=float).reshape(self.M - 1, 3)
        b = np.zeros((ORDER * self.M, 3))
        b[0:4] = self.start
        for i in range(self.M - 1):
            base = 4 + ORDER * i
            b[base] = points[i]
            b[base + 1] = points[i]
        b[-4:] = self.end
        return b

    def solve(self, points):
        c = lu_solve(self._lu, self.rhs(points))
        return c.reshape(self.M, ORDER, 3)

    def adjoint(self, dJ_dc):
        """Given dJ/dc (M, 8, 3), return (dJ/dpoints (M-1, 3), dJ/dT explicit via coefficients)."""
        g = dJ_dc.reshape(ORDER * self.M, 3)
        lam = lu_solve(self._lu, g, trans=1)
        dpts = np.zeros((self.M - 1, 3))
        for i in range(self.M - 1):
            base = 4 + ORDER * i
            dpts[i] = lam[base] + lam[base + 1]
        return lam, dpts

    def time_gradient(self, lam, coeffs):
        """-lam^T (dA/dT_i) c for every segment."""
        M = self.M
        # higher derivatives at each segment end: D[i, d] = p_i^(d+1)(T_i)
        D = np.einsum("mdk,mkj->mdj", self._BT[:, 1:], coeffs)     # (M, 7, 3)
        dT = np.zeros(M)
        if M > 1:
            lam_i = lam[4:4 + ORDER * (M - 1)].reshape(M - 1, ORDER, 3)
            # row base -> position (d = 0); rows base+2..base+7 -> orders 1..6
            dT[:-1] = (np.einsum("mj,mj->m", lam_i[:, 0], D[:-1, 0])
                       + np.einsum("mdj,mdj->m", lam_i[:, 2:8], D[:-1, 1:7]))
        dT[-1] = np.einsum("dj,dj->", lam[-4:], D[-1, 0:4])
        return -dT


def snap_energy(coeffs, durations):
    """Integral of the squared fourth derivative per segment, with dE/dc and dE/dT."""
    T = np.asarray(durations, dtype=float)
    k = np.arange(4, ORDER)
    F = _FACT[4, 4:]
    e = k[:, None] + k[None, :] - 7
    # Q[m, a, b] = F_a F_b T^e / e over the coefficient block 4..7
    Q = (F[:, None] * F[None, :])[None] * np.power(T[:, None, None], e[None]) / e[None]
    c4 = coeffs[:, 4:, :]
    Qc = np.einsum("mab,mbj->maj", Q, c4)
    E = np.einsum("maj,maj->m", c4, Qc)
    dc = np.zeros_like(coeffs)
    dc[:, 4:, :] = 2.0 * Qc
    s4 = np.einsum("mk,mkj->mj", basis(T, 4), coeffs)
    return E, dc, np.sum(s4 * s4, axis=1)


def build_trajectory(points, durations, start, end):
    """Minimum-snap chain through interior points with given segment durations."""
    sys = MincoSystem(start, end, durations)
    return FlatTrajectory(sys.solve(points), durations)


def rest_state(p):
    s = np.zeros((4, 3))
    s[0] = p
    return s
