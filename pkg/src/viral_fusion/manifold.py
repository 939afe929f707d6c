"""SO(3), unit-quaternion and SE(3) primitives.

Quaternions are stored as ``[w, x, y, z]`` (Hamilton convention) and a
quaternion ``q`` maps body coordinates to world coordinates through
``quat_to_rot(q)``.  Every function accepts stacked inputs with leading batch
dimensions, e.g. ``(..., 3)`` vectors or ``(..., 3, 3)`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
# below this value of sin(theta) the log map extracts the axis from R + R^T
NEAR_PI_SIN = 1e-3

_EYE3 = np.eye(3)


def hat(v):
    """Skew-symmetric matrix ``[v]x`` such that ``hat(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m, tol=1e-9):
    """Inverse of :func:`hat`.

    Raises:
        ValueError: if ``m`` is not antisymmetric within ``tol``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise ValueError("vee expects 3x3 matrices")
    if np.max(np.abs(m + np.swapaxes(m, -1, -2)), initial=0.0) > tol:
        raise ValueError("matrix is not skew-symmetric")
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _unskew(m):
    # vee of the antisymmetric part, no checks
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def _angle(phi):
    return np.linalg.norm(phi, axis=-1)


def exp_so3(phi):
    """Rodrigues' formula, with a Taylor branch below ``SMALL_ANGLE``."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t**2)
    k = hat(phi)
    return _EYE3 + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _canonical_axis_sign(u):
    # at exactly pi the sign is free: make the last nonzero component positive
    out = np.array(u, dtype=float)
    flat = out.reshape(-1, 3)
    for row in flat:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[-1]] < 0:
            row *= -1.0
    return flat.reshape(out.shape)


def log_so3(r):
    """Rotation vector of ``r`` with norm in ``[0, pi]``.

    The generic branch uses the antisymmetric part of ``r``; near ``pi`` the
    axis is read from the dominant column of ``(r + r^T)/2 - cos(theta) I``
    because the antisymmetric part vanishes there.
    """
    r = np.asarray(r, dtype=float)
    w = _unskew(r)  # sin(theta) * axis
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < SMALL_ANGLE
    safe_s = np.where(s > 0, s, 1.0)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe_s)
    phi = scale[..., None] * w

    near_pi = (s < NEAR_PI_SIN) & (c < 0)
    if np.any(near_pi):
        rp = r[near_pi]
        cp = c[near_pi]
        sym = 0.5 * (rp + np.swapaxes(rp, -1, -2)) - cp[:, None, None] * _EYE3
        sym /= (1.0 - cp)[:, None, None]
        idx = np.argmax(np.diagonal(sym, axis1=-2, axis2=-1), axis=-1)
        u = sym[np.arange(len(idx)), :, idx]
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        wp = w[near_pi]
        dots = np.einsum("ij,ij->i", u, wp)
        flip = dots < 0
        u[flip] *= -1.0
        exact = np.abs(dots) < 1e-15
        if np.any(exact):
            u[exact] = _canonical_axis_sign(u[exact])
        phi[near_pi] = theta[near_pi][:, None] * u
    return phi


def right_jacobian(phi):
    """Right Jacobian of SO(3): ``Exp(phi + d) ~ Exp(phi) Exp(H(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    k = hat(phi)
    return _EYE3 - b[..., None, None] * k + c[..., None, None] * (k @ k)


def right_jacobian_inv(phi):
    """Closed-form inverse of :func:`right_jacobian` (valid for ``|phi| < 2 pi``)."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    d = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    k = hat(phi)
    return _EYE3 + 0.5 * k + d[..., None, None] * (k @ k)


# --------------------------------------------------------------------------
# quaternions


def identity_quat():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Representative with ``w >= 0``; only for comparison and serialization."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0, -q, q)


def quat_inv(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(q, p):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    return np.stack(
        [
            qw * pw - qx * px - qy * py - qz * pz,
            qw * px + qx * pw + qy * pz - qz * py,
            qw * py - qx * pz + qy * pw + qz * px,
            qw * pz + qx * py - qy * px + qz * pw,
        ],
        axis=-1,
    )


def left_matrix(q):
    """``left_matrix(q) @ p == quat_mul(q, p)``."""
    q = np.asarray(q, dtype=float)
    out = np.empty(q.shape[:-1] + (4, 4))
    w, v = q[..., 0], q[..., 1:]
    out[..., 0, 0] = w
    out[..., 0, 1:] = -v
    out[..., 1:, 0] = v
    out[..., 1:, 1:] = w[..., None, None] * _EYE3 + hat(v)
    return out


def right_matrix(q):
    """``right_matrix(p) @ q == quat_mul(q, p)``."""
    q = np.asarray(q, dtype=float)
    out = np.empty(q.shape[:-1] + (4, 4))
    w, v = q[..., 0], q[..., 1:]
    out[..., 0, 0] = w
    out[..., 0, 1:] = -v
    out[..., 1:, 0] = v
    out[..., 1:, 1:] = w[..., None, None] * _EYE3 - hat(v)
    return out


def brc(a, m=3):
    """Bottom-right ``m x m`` block."""
    a = np.asarray(a)
    return a[..., -m:, -m:]


def quat_to_rot(q):
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    v = q[..., 1:]
    return (
        (2.0 * w**2 - 1.0)[..., None, None] * _EYE3
        + 2.0 * w[..., None, None] * hat(v)
        + 2.0 * v[..., :, None] * v[..., None, :]
    )


def rot_to_quat(r):
    """Rotation matrix to unit quaternion (``w >= 0``).

    Uses the trace formula when it is well conditioned and otherwise the
    branch built on the largest diagonal entry.
    """
    r = np.asarray(r, dtype=float)
    batch = r.shape[:-2]
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            w = 0.5 * np.sqrt(tr + 1.0)
            f = 0.25 / w
            q = (w, (m[2, 1] - m[1, 2]) * f, (m[0, 2] - m[2, 0]) * f, (m[1, 0] - m[0, 1]) * f)
        else:
            j = int(np.argmax(np.diag(m)))
            k, l = (j + 1) % 3, (j + 2) % 3
            s = 0.5 * np.sqrt(max(m[j, j] - m[k, k] - m[l, l] + 1.0, 0.0))
            f = 0.25 / s
            vec = np.empty(3)
            vec[j] = s
            vec[k] = (m[k, j] + m[j, k]) * f
            vec[l] = (m[l, j] + m[j, l]) * f
            q = ((m[l, k] - m[k, l]) * f, *vec)
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(batch + (4,))


def vec_to_quat(phi):
    """Quaternion of ``Exp(phi)``: ``(cos(|phi|/2), sin(|phi|/2) phi/|phi|)``."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    w = np.where(small, 1.0, np.cos(0.5 * t))
    f = np.where(small, 0.5, np.sin(0.5 * t) / t)
    q = np.concatenate([w[..., None], f[..., None] * phi], axis=-1)
    return np.where(small[..., None], quat_normalize(q), q)


def quat_to_vec(q):
    """Rotation vector of a unit quaternion (inverse of :func:`vec_to_quat`)."""
    return log_so3(quat_to_rot(q))


def retract_rotation(q, dtheta, exact=True):
    """Right retraction ``q o E(dtheta)``; ``exact=False`` uses ``q o [1, dtheta/2]``."""
    dtheta = np.asarray(dtheta, dtype=float)
    if exact:
        dq = vec_to_quat(dtheta)
    else:
        dq = np.concatenate([np.ones(dtheta.shape[:-1] + (1,)), 0.5 * dtheta], axis=-1)
    return quat_normalize(quat_mul(q, dq))


def omega_matrix(w):
    """``Omega(w)`` with ``q_dot = 0.5 * Omega(w) @ q`` for body rate ``w``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (4, 4))
    out[..., 0, 1:] = -w
    out[..., 1:, 0] = w
    out[..., 1:, 1:] = -hat(w)
    return out


def quat_slerp(q0, q1, s):
    """Geodesic interpolation ``q0 o E(s * Log(q0^-1 o q1))``."""
    rel = quat_mul(quat_inv(q0), q1)
    return quat_normalize(quat_mul(q0, vec_to_quat(s * quat_to_vec(rel))))


def yaw_quat(yaw):
    yaw = np.asarray(yaw, dtype=float)
    return np.stack(
        [np.cos(0.5 * yaw), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(0.5 * yaw)], axis=-1
    )


def quat_from_rpy(roll, pitch, yaw):
    """Z-Y-X Euler angles to quaternion (``R = Rz(yaw) Ry(pitch) Rx(roll)``)."""
    qx = vec_to_quat(np.array([roll, 0.0, 0.0]))
    qy = vec_to_quat(np.array([0.0, pitch, 0.0]))
    qz = vec_to_quat(np.array([0.0, 0.0, yaw]))
    return quat_mul(qz, quat_mul(qy, qx))


def rot_to_rpy(r):
    r = np.asarray(r, dtype=float)
    yaw = np.arctan2(r[..., 1, 0], r[..., 0, 0])
    pitch = np.arcsin(np.clip(-r[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(r[..., 2, 1], r[..., 2, 2])
    return np.stack([roll, pitch, yaw], axis=-1)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3) acting as ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q, t):
        return cls(quat_to_rot(q), np.asarray(t, dtype=float))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m
