"""Boundary state for flying through a narrow window at a prescribed attitude."""

from dataclasses import dataclass

import numpy as np

from ..aero import aero_force_body
from ..dynamics import G_VEC
from ..so3 import E3


@dataclass
class TraverseSpec:
    center: np.ndarray        # window center, m
    long_edge: np.ndarray     # unit direction of the window's long edge
    normal: np.ndarray        # crossing direction, orthogonal to the long edge
    speed: float              # traverse speed, m/s
    aoa: float = np.deg2rad(30.0)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.long_edge = np.asarray(self.long_edge, dtype=float).reshape(3)
        self.normal = np.asarray(self.normal, dtype=float).reshape(3)
        if self.speed <= 0:
            raise ValueError("traverse speed must be positive")
        if abs(np.linalg.norm(self.long_edge) - 1.0) > 1e-9:
            raise ValueError("long edge direction must be unit-norm")
        n = self.normal - (self.normal @ self.long_edge) * self.long_edge
        if np.linalg.norm(n) < 1e-9:
            raise ValueError("crossing direction parallel to the long edge")
        self.normal = n / np.linalg.norm(n)

    @property
    def velocity(self):
        return self.speed * self.normal

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["long_edge"], d["normal"], float(d["speed"]),
                   np.deg2rad(float(d.get("aoa_deg", 30.0))))


def traverse_attitude(spec):
    """y_b along the long edge (sign chosen so the body z axis points down), x_b at the AoA."""
    n = spec.normal
    y_b = spec.long_edge.copy()
    for _ in range(2):
        x_b = np.cos(spec.aoa) * n + np.sin(spec.aoa) * np.cross(y_b, n)
        z_b = np.cross(x_b, y_b)
        if z_b @ E3 >= 0.0:
            break
        y_b = -y_b
    return np.column_stack([x_b, y_b, z_b])


def traverse_boundary_state(spec, model, a_T_bounds=(6.0, 16.0), wind=None):
    """(4, 3) boundary (p, v, a, jerk) at the window and the attitude/thrust used.

    The thrust minimizing the total acceleration along the fixed attitude is
    the negative body-x component of gravity plus aerodynamic acceleration,
    clamped to the thrust bounds. Jerk is zero at the crossing.
    """
    lo, hi = a_T_bounds
    if lo > hi:
        raise ValueError("thrust bounds out of order")
    w = np.zeros(3) if wind is None else np.asarray(wind, dtype=float)
    R = traverse_attitude(spec)
    v = spec.velocity
    f_a = aero_force_body(R.T @ (v - w), model)
    a_T = float(np.clip(-(R.T @ G_VEC + f_a / model.mass)[0], lo, hi))
    acc = G_VEC + R @ (a_T * np.array([1.0, 0.0, 0.0]) + f_a / model.mass)
    state = np.array([spec.center, v, acc, np.zeros(3)])
    return state, R, a_T
