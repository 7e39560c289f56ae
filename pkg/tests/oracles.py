"""Independent reference computations shared by the test modules."""

import numpy as np

from tailsitter.dynamics import G_VEC, ControlInput, VehicleState, integrate_rk4
from tailsitter.flatness import FlatSample, transform_batch


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of f at x; columns follow the entries of x."""
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def cofactor_det(M):
    """Determinant by recursive Laplace expansion along the first row."""
    M = [list(map(float, row)) for row in M]
    n = len(M)
    if n == 1:
        return M[0][0]
    if n == 2:
        return M[0][0] * M[1][1] - M[0][1] * M[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        total += (-1) ** j * M[0][j] * cofactor_det(minor)
    return total


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


class Loiter:
    """Horizontal circle p = [r cos wt, r sin wt, z0] (constant altitude)."""

    def __init__(self, radius=20.0, speed=10.0, z0=-5.0):
        self.r, self.w, self.z0 = radius, speed / radius, z0

    def derivs(self, t):
        r, w = self.r, self.w
        c, s = np.cos(w * t), np.sin(w * t)
        base = [np.array([c, s, 0.0]), np.array([-s, c, 0.0]) * w,
                np.array([-c, -s, 0.0]) * w**2, np.array([s, -c, 0.0]) * w**3,
                np.array([c, s, 0.0]) * w**4]
        out = [r * b for b in base]
        out[0] = out[0] + [0.0, 0.0, self.z0]
        return out

    def sample(self, t):
        return FlatSample(*self.derivs(t))

    def arrays(self, ts):
        d = [self.derivs(t) for t in ts]
        return [np.array([x[k] for x in d]) for k in range(5)]


class Poly:
    """Flat output given as polynomial coefficients per axis (highest degree first)."""

    def __init__(self, coeffs):
        self.c = [np.poly1d(c) for c in coeffs]

    def derivs(self, t):
        return [np.array([np.polyder(c, k)(t) if k else c(t) for c in self.c]) for k in range(5)]

    def sample(self, t):
        return FlatSample(*self.derivs(t))

    def arrays(self, ts):
        d = [self.derivs(t) for t in ts]
        return [np.array([x[k] for x in d]) for k in range(5)]


def random_samples(rng, n, kind):
    """Random (v, a, j, s) rows aimed at one branch: coordinated, low or small_gamma."""
    v = rng.normal(size=(n, 3))
    v *= (rng.uniform(3, 15, n) / np.linalg.norm(v, axis=1))[:, None]
    a, j, s = (rng.uniform(-5, 5, (n, 3)) for _ in range(3))
    if kind == "low":
        v = v / np.linalg.norm(v, axis=1)[:, None] * rng.uniform(0, 0.49, n)[:, None]
    elif kind == "small_gamma":
        v = rng.uniform(0.1, 1.5, n)[:, None] * (a - G_VEC)
    return v, a, j, s


def roundtrip_error(traj, model, cache, duration=1.0, dt=1e-3):
    """Terminal position error of the reduced model driven by the transform's inputs."""
    # reference on the RK4 stage grid so the input is exact at every stage
    ts = np.arange(0.0, duration + dt / 4, dt / 2)
    p, v, a, j, s = traj.arrays(ts)
    ref = transform_batch(v, a, j, s, cache, model, p=p, t=ts)

    def u(t, x):
        i = int(round(t / (dt / 2)))
        return ControlInput(ref.a_T[i], ref.omega[i])

    xs = integrate_rk4(VehicleState(p[0], v[0], ref.R[0]), u, None, dt, int(round(duration / dt)),
                       model, continuous=True)
    return np.linalg.norm(xs[-1].p - p[-1]), ref
