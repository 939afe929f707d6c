"""Residuals and analytic Jacobians of the odometry, IMU and UWB factors.

Jacobians are taken with respect to the node tangent ``(dtheta, dp, dv, dbg,
dba)`` where rotations are perturbed on the right, ``q <- q o E(dtheta)``.
Blocks are returned as dictionaries keyed by ``(node, tag)`` with node ``0``
for the older state and ``1`` for the newer one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .manifold import (
    brc,
    exp_so3,
    hat,
    left_matrix,
    log_so3,
    quat_inv,
    quat_mul,
    quat_to_rot,
    right_jacobian,
    right_jacobian_inv,
    right_matrix,
    vec_to_quat,
)
from .preintegration import Preintegration, correct_for_bias
from .state import BLOCK, STATE_DIM, ImuBias, NavState, OslDisplacement, UwbObservation

UWB_DEGENERATE = 1e-6

# IMU residual layout
R_GAMMA, R_ALPHA, R_BETA, R_BG, R_BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
# preintegration covariance (alpha, beta, theta, bg, ba) -> residual order (theta, alpha, beta, bg, ba)
_IMU_PERM = np.r_[6:9, 0:3, 3:6, 9:12, 12:15]


@dataclass
class ResidualBlock:
    """Residual with Jacobian blocks addressed by (state index, tag) and its whitening."""

    family: str
    residual: np.ndarray
    jacobians: list
    weight: np.ndarray

    def whitened(self):
        return self.weight @ self.residual

    def cost(self):
        r = self.whitened()
        return float(r @ r)


def sqrt_information(cov):
    """``W`` with ``W^T W = cov^-1`` (inverse of the lower Cholesky factor)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = np.linalg.cholesky(cov)
    return solve_triangular(chol, np.eye(len(cov)), lower=True)


def stack_jacobian(blocks, rows):
    """Dense ``rows x 30`` matrix over the two nodes from a block dictionary."""
    out = np.zeros((rows, 2 * STATE_DIM))
    for (node, tag), m in blocks.items():
        sl = BLOCK[tag]
        out[:, node * STATE_DIM + sl.start : node * STATE_DIM + sl.stop] += m
    return out


def _error_quat(e):
    return -e if e[0] < 0 else e


# --------------------------------------------------------------------------
# odometry displacement


def osl_residual(xk: NavState, xk1: NavState, obs: OslDisplacement):
    m = quat_mul(quat_inv(xk.q), xk1.q)
    e = _error_quat(quat_mul(quat_inv(obs.dq), m))
    return np.concatenate([2.0 * e[1:], xk.rot.T @ (xk1.p - xk.p) - obs.dp])


def osl_jacobians(xk: NavState, xk1: NavState, obs: OslDisplacement):
    m = quat_mul(quat_inv(xk.q), xk1.q)
    dq_inv = quat_inv(obs.dq)
    e = quat_mul(dq_inv, m)
    sign = -1.0 if e[0] < 0 else 1.0
    rt = xk.rot.T
    z = np.zeros((3, 3))
    rot_q0 = -sign * brc(left_matrix(dq_inv) @ right_matrix(m))
    rot_q1 = sign * brc(left_matrix(e))
    return {
        (0, "q"): np.vstack([rot_q0, hat(rt @ (xk1.p - xk.p))]),
        (1, "q"): np.vstack([rot_q1, z]),
        (0, "p"): np.vstack([z, -rt]),
        (1, "p"): np.vstack([z, rt]),
    }


def osl_block(xk, xk1, obs, index=0):
    w = sqrt_information(obs.covariance())
    jac = osl_jacobians(xk, xk1, obs)
    return ResidualBlock(
        "osl",
        osl_residual(xk, xk1, obs),
        [(index + node, tag, m) for (node, tag), m in jac.items()],
        w,
    )


# --------------------------------------------------------------------------
# IMU preintegration


def _imu_terms(xk, xk1, pre: Preintegration, gravity):
    g = np.asarray(gravity, dtype=float)
    dt = pre.duration
    alpha, beta, _ = correct_for_bias(pre, ImuBias.of(xk))
    dbg = xk.bg - pre.bias_point.gyro_bias
    cdb = pre.jac_gamma_gyro @ dbg
    gamma_c = quat_mul(pre.gamma, vec_to_quat(cdb))
    m = quat_mul(quat_inv(xk.q), xk1.q)
    e = quat_mul(quat_inv(gamma_c), m)
    rt = xk.rot.T
    xa = rt @ (xk1.p - xk.p - xk.v * dt + 0.5 * g * dt * dt)
    xb = rt @ (xk1.v - xk.v + g * dt)
    return dict(dt=dt, alpha=alpha, beta=beta, cdb=cdb, gamma_c=gamma_c, m=m, e=e, rt=rt, xa=xa, xb=xb)


def imu_residual(xk: NavState, xk1: NavState, pre: Preintegration, gravity):
    t = _imu_terms(xk, xk1, pre, gravity)
    e = _error_quat(t["e"])
    return np.concatenate(
        [2.0 * e[1:], t["xa"] - t["alpha"], t["xb"] - t["beta"], xk1.bg - xk.bg, xk1.ba - xk.ba]
    )


def imu_jacobians(xk: NavState, xk1: NavState, pre: Preintegration, gravity):
    t = _imu_terms(xk, xk1, pre, gravity)
    e = t["e"]
    sign = -1.0 if e[0] < 0 else 1.0
    rt, dt = t["rt"], t["dt"]
    i3 = np.eye(3)

    def col(rg=None, ra=None, rb=None, rbg=None, rba=None):
        out = np.zeros((15, 3))
        for sl, m in ((R_GAMMA, rg), (R_ALPHA, ra), (R_BETA, rb), (R_BG, rbg), (R_BA, rba)):
            if m is not None:
                out[sl] = m
        return out

    g_q0 = -sign * brc(left_matrix(quat_inv(t["gamma_c"])) @ right_matrix(t["m"]))
    g_q1 = sign * brc(left_matrix(e))
    g_bg = -sign * brc(right_matrix(e)) @ right_jacobian(t["cdb"]) @ pre.jac_gamma_gyro
    return {
        (0, "q"): col(rg=g_q0, ra=hat(t["xa"]), rb=hat(t["xb"])),
        (1, "q"): col(rg=g_q1),
        (0, "p"): col(ra=-rt),
        (1, "p"): col(ra=rt),
        (0, "v"): col(ra=-rt * dt, rb=-rt),
        (1, "v"): col(rb=rt),
        (0, "bg"): col(rg=g_bg, ra=-pre.jac_alpha_gyro, rb=-pre.jac_beta_gyro, rbg=-i3),
        (1, "bg"): col(rbg=i3),
        (0, "ba"): col(ra=-pre.jac_alpha_accel, rb=-pre.jac_beta_accel, rba=-i3),
        (1, "ba"): col(rba=i3),
    }


def imu_covariance(pre: Preintegration):
    """Preintegration covariance reordered to the residual layout."""
    return pre.covariance[np.ix_(_IMU_PERM, _IMU_PERM)]


def imu_block(xk, xk1, pre, gravity, index=0, weight=None):
    if weight is None:
        weight = sqrt_information(imu_covariance(pre))
    jac = imu_jacobians(xk, xk1, pre, gravity)
    return ResidualBlock(
        "imu",
        imu_residual(xk, xk1, pre, gravity),
        [(index + node, tag, m) for (node, tag), m in jac.items()],
        weight,
    )


# --------------------------------------------------------------------------
# UWB body-offset range


def uwb_interp_coeffs(dt, step):
    """Fractional position ``s`` and velocity weights ``a`` (newer) and ``b`` (older)."""
    dt = np.asarray(dt, dtype=float)
    step = np.asarray(step, dtype=float)
    if np.any(dt > step * (1.0 + 1e-12)) or np.any(step <= 0):
        raise ValueError("UWB offset dt must not exceed the step length")
    s = dt / step
    a = -(step**2 - dt**2) / (2.0 * step)
    b = -((step - dt) ** 2) / (2.0 * step)
    return s, a, b


def uwb_batch(q0, p0, v0, q1, p1, v1, anchor, antenna, dt, step, jacobians=True):
    """Vectorized predicted vectors, ranges and Jacobian rows for many observations.

    All inputs are stacked along the first axis (one row per observation).
    Returns ``(n, norm, blocks)`` where ``blocks`` maps tags to ``(N, 3)``
    row arrays (or ``None`` when ``jacobians`` is false).
    """
    r0 = quat_to_rot(q0)
    r1 = quat_to_rot(q1)
    s, a, b = uwb_interp_coeffs(dt, step)
    phi = log_so3(np.swapaxes(r0, -1, -2) @ r1)
    rs = exp_so3(s[:, None] * phi)
    r0rs = r0 @ rs
    n = p1 + np.einsum("nij,nj->ni", r0rs, antenna) + a[:, None] * v1 + b[:, None] * v0 - anchor
    norm = np.linalg.norm(n, axis=-1)
    if not jacobians:
        return n, norm, None
    safe = np.where(norm > UWB_DEGENERATE, norm, 1.0)
    u = n / safe[:, None]
    base = np.einsum("ni,nij->nj", u, r0rs @ hat(antenna))  # u^T R0 Rs [y]x
    hinv = right_jacobian_inv(phi)
    jq1 = -s[:, None] * np.einsum("ni,nij->nj", base, right_jacobian(s[:, None] * phi) @ hinv)
    sbar = s - 1.0
    hinv_neg = right_jacobian_inv(-phi)
    jq0 = sbar[:, None] * np.einsum("ni,nij->nj", base, right_jacobian(sbar[:, None] * phi) @ hinv_neg)
    blocks = {
        (0, "q"): jq0,
        (1, "q"): jq1,
        (1, "p"): u,
        (1, "v"): a[:, None] * u,
        (0, "v"): b[:, None] * u,
    }
    return n, norm, blocks


def _stack_obs(xk, xk1, obs_list):
    k = len(obs_list)
    rep = lambda x: np.repeat(np.asarray(x, dtype=float)[None], k, axis=0)  # noqa: E731
    return (
        rep(xk.q), rep(xk.p), rep(xk.v), rep(xk1.q), rep(xk1.p), rep(xk1.v),
        np.array([o.anchor for o in obs_list], dtype=float),
        np.array([o.antenna for o in obs_list], dtype=float),
        np.array([o.dt for o in obs_list], dtype=float),
        np.array([o.step for o in obs_list], dtype=float),
    )


def uwb_predicted_vector(xk: NavState, xk1: NavState, obs: UwbObservation):
    n, _, _ = uwb_batch(*_stack_obs(xk, xk1, [obs]), jacobians=False)
    return n[0]


def uwb_residual(xk: NavState, xk1: NavState, obs: UwbObservation):
    """Range residual, or ``None`` when the predicted vector is degenerate."""
    _, norm, _ = uwb_batch(*_stack_obs(xk, xk1, [obs]), jacobians=False)
    if norm[0] < UWB_DEGENERATE:
        return None
    return float(norm[0] - obs.d)


def uwb_jacobians(xk: NavState, xk1: NavState, obs: UwbObservation):
    _, _, blocks = uwb_batch(*_stack_obs(xk, xk1, [obs]))
    return {key: rows[0][None, :] for key, rows in blocks.items()}


def uwb_blocks(xk, xk1, obs_list, index=0):
    """Residual blocks for every non-degenerate observation of one interval."""
    if not obs_list:
        return []
    _, norm, jac = uwb_batch(*_stack_obs(xk, xk1, obs_list))
    out = []
    for i, obs in enumerate(obs_list):
        if norm[i] < UWB_DEGENERATE:
            continue
        out.append(
            ResidualBlock(
                "uwb",
                np.array([norm[i] - obs.d]),
                [(index + node, tag, rows[i][None, :]) for (node, tag), rows in jac.items()],
                np.array([[1.0 / obs.sigma]]),
            )
        )
    return out


def retract_node(x: NavState, tag: str, delta):
    """Perturb one sub-block of a node; used by finite-difference checks."""
    full = np.zeros(STATE_DIM)
    full[BLOCK[tag]] = delta
    return x.retract(full)


__all__ = [
    "ResidualBlock",
    "sqrt_information",
    "stack_jacobian",
    "stack_preintegrations",
    "osl_residual",
    "osl_jacobians",
    "osl_block",
    "imu_residual",
    "imu_jacobians",
    "imu_covariance",
    "imu_block",
    "uwb_interp_coeffs",
    "uwb_batch",
    "uwb_predicted_vector",
    "uwb_residual",
    "uwb_jacobians",
    "uwb_blocks",
    "retract_node",
]


# --------------------------------------------------------------------------
# batched forms used by the solver; same algebra as the per-factor functions


def _brc_lr(l, r):
    return (l @ r)[..., 1:, 1:]


def stack_preintegrations(pres):
    """Stacked preintegration fields in the layout :func:`imu_batch` expects."""
    return {
        "dt": np.array([pre.duration for pre in pres]),
        "alpha": np.array([pre.alpha for pre in pres]),
        "beta": np.array([pre.beta for pre in pres]),
        "gamma": np.array([pre.gamma for pre in pres]),
        "aw": np.array([pre.jac_alpha_gyro for pre in pres]),
        "aa": np.array([pre.jac_alpha_accel for pre in pres]),
        "bw": np.array([pre.jac_beta_gyro for pre in pres]),
        "ba": np.array([pre.jac_beta_accel for pre in pres]),
        "cw": np.array([pre.jac_gamma_gyro for pre in pres]),
        "bg_point": np.array([pre.bias_point.gyro_bias for pre in pres]),
        "ba_point": np.array([pre.bias_point.accel_bias for pre in pres]),
    }


def imu_batch(q0, p0, v0, bg0, ba0, q1, p1, v1, bg1, ba1, pre: dict, gravity, jacobians=True):
    """Residuals ``(n, 15)`` and Jacobians ``(n, 15, 30)`` for stacked IMU factors.

    ``pre`` holds stacked preintegration fields: ``dt``, ``alpha``, ``beta``,
    ``gamma``, ``aw``, ``aa``, ``bw``, ``ba``, ``cw``, ``bg_point``, ``ba_point``.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre["dt"][:, None]
    dbg = bg0 - pre["bg_point"]
    dba = ba0 - pre["ba_point"]
    mv = lambda m, x: np.einsum("nij,nj->ni", m, x)  # noqa: E731
    alpha = pre["alpha"] + mv(pre["aw"], dbg) + mv(pre["aa"], dba)
    beta = pre["beta"] + mv(pre["bw"], dbg) + mv(pre["ba"], dba)
    cdb = mv(pre["cw"], dbg)
    gamma_c = quat_mul(pre["gamma"], vec_to_quat(cdb))
    m = quat_mul(quat_inv(q0), q1)
    gci = quat_inv(gamma_c)
    e = quat_mul(gci, m)
    sign = np.where(e[:, 0] < 0, -1.0, 1.0)
    rt = np.swapaxes(quat_to_rot(q0), -1, -2)
    xa = mv(rt, p1 - p0 - v0 * dt + 0.5 * g * dt**2)
    xb = mv(rt, v1 - v0 + g * dt)
    res = np.concatenate(
        [2.0 * sign[:, None] * e[:, 1:], xa - alpha, xb - beta, bg1 - bg0, ba1 - ba0], axis=1
    )
    if not jacobians:
        return res, None
    n = len(res)
    j = np.zeros((n, 15, 30))
    s3 = sign[:, None, None]
    eye = np.eye(3)
    # older node: theta, p, v, bg, ba at columns 0..14
    j[:, 0:3, 0:3] = -s3 * _brc_lr(left_matrix(gci), right_matrix(m))
    j[:, 3:6, 0:3] = hat(xa)
    j[:, 6:9, 0:3] = hat(xb)
    j[:, 3:6, 3:6] = -rt
    j[:, 3:6, 6:9] = -rt * dt[:, :, None]
    j[:, 6:9, 6:9] = -rt
    j[:, 0:3, 9:12] = -s3 * right_matrix(e)[:, 1:, 1:] @ right_jacobian(cdb) @ pre["cw"]
    j[:, 3:6, 9:12] = -pre["aw"]
    j[:, 6:9, 9:12] = -pre["bw"]
    j[:, 9:12, 9:12] = -eye
    j[:, 3:6, 12:15] = -pre["aa"]
    j[:, 6:9, 12:15] = -pre["ba"]
    j[:, 12:15, 12:15] = -eye
    # newer node
    j[:, 0:3, 15:18] = s3 * left_matrix(e)[:, 1:, 1:]
    j[:, 3:6, 18:21] = rt
    j[:, 6:9, 21:24] = rt
    j[:, 9:12, 24:27] = eye
    j[:, 12:15, 27:30] = eye
    return res, j


def osl_batch(q0, p0, q1, p1, dq, dp, jacobians=True):
    """Residuals ``(n, 6)`` and Jacobians ``(n, 6, 30)`` for stacked odometry factors."""
    m = quat_mul(quat_inv(q0), q1)
    dqi = quat_inv(dq)
    e = quat_mul(dqi, m)
    sign = np.where(e[:, 0] < 0, -1.0, 1.0)
    rt = np.swapaxes(quat_to_rot(q0), -1, -2)
    x = np.einsum("nij,nj->ni", rt, p1 - p0)
    res = np.concatenate([2.0 * sign[:, None] * e[:, 1:], x - dp], axis=1)
    if not jacobians:
        return res, None
    s3 = sign[:, None, None]
    j = np.zeros((len(res), 6, 30))
    j[:, 0:3, 0:3] = -s3 * _brc_lr(left_matrix(dqi), right_matrix(m))
    j[:, 3:6, 0:3] = hat(x)
    j[:, 3:6, 3:6] = -rt
    j[:, 0:3, 15:18] = s3 * left_matrix(e)[:, 1:, 1:]
    j[:, 3:6, 18:21] = rt
    return res, j
