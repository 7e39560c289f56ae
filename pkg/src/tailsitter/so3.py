"""SO(3) helpers: skew maps, exponential/logarithm, exponential-coordinate Jacobian."""

import numpy as np

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


class InvalidRotationError(ValueError):
    pass


def skew(v):
    """Matrix such that skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def skew_batch(v):
    """Stack of skew matrices for an (..., 3) array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(theta):
    """Rodrigues formula, second-order Taylor series for tiny angles."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + (np.sin(angle) / angle) * K
            + ((1.0 - np.cos(angle)) / angle**2) * K @ K)


def is_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.linalg.norm(R.T @ R - np.eye(3))
    return ortho < tol and abs(np.linalg.det(R) - 1.0) < tol


def log_so3(R):
    """Axis-angle vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise InvalidRotationError("matrix is not a rotation within 1e-6")
    w = 0.5 * vee(R - R.T)
    s = np.linalg.norm(w)
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arctan2(s, c)
    if angle < 1e-8:
        # R ~ I + skew(theta)
        return w
    if c > -0.9:
        return (angle / s) * w
    # close to pi: axis from the symmetric part, sign from the skew part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    B /= (1.0 - c)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if s > 1e-12:
        if axis @ w < 0:
            axis = -axis
    else:
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if nz.size and axis[nz[0]] < 0:
            axis = -axis
    return angle * axis


def jacobian_A(theta):
    """Right Jacobian of the exponential coordinates.

    A(theta) = I + (1 - cos t)/t^2 [theta] + (1 - sin t / t)/t^2 [theta]^2, t = |theta|.
    The kinematic identity it satisfies is A(theta)^T d/dt theta = omega for
    R(t) = Exp(theta(t)) with dR/dt = R [omega].
    """
    theta = np.asarray(theta, dtype=float)
    t = np.linalg.norm(theta)
    K = skew(theta)
    if t < 1e-6:
        t2 = t * t
        a = 0.5 - t2 / 24.0
        b = 1.0 / 6.0 - t2 / 120.0
    else:
        # half-angle form avoids cancellation in 1 - cos t
        a = 2.0 * np.sin(0.5 * t)**2 / t**2
        if t < 1e-2:
            t2 = t * t
            b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        else:
            b = (1.0 - np.sin(t) / t) / t**2
    return np.eye(3) + a * K + b * K @ K


def project_to_so3(M):
    """Closest rotation in Frobenius norm (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rot_to_quat(R):
    """Unit quaternion [w, x, y, z] with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle(R):
    """Angle of a rotation matrix in [0, pi]."""
    return float(np.linalg.norm(log_so3(R)))
