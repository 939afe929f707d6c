"""IMU preintegration between two window nodes (zero-order hold)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    exp_so3,
    hat,
    identity_quat,
    quat_mul,
    quat_normalize,
    quat_to_rot,
    retract_rotation,
    right_jacobian,
    vec_to_quat,
)
from .state import ImuBias, ImuNoiseParams, ImuSample, ImuSegment, NavState

# covariance layout
ALPHA, BETA, THETA, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))

GYRO_REPROPAGATE = 1e-2
ACCEL_REPROPAGATE = 1e-1

_I3 = np.eye(3)


@dataclass
class Preintegration:
    """Accumulated relative motion and its sensitivities.

    Updated in place by :func:`integrate_step`; treat as immutable once the
    interval is closed.
    """

    bias_point: ImuBias = field(default_factory=ImuBias)
    noise: ImuNoiseParams | None = None
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: np.ndarray = field(default_factory=identity_quat)
    jac_alpha_gyro: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    jac_alpha_accel: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    jac_beta_gyro: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    jac_beta_accel: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    jac_gamma_gyro: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((15, 15)))
    duration: float = 0.0
    sample_count: int = 0
    segment: ImuSegment | None = None
    sqrt_info: np.ndarray | None = None  # cached whitening, filled by the solver

    @property
    def gamma_rot(self):
        return quat_to_rot(self.gamma)

    def needs_repropagation(self, bias: ImuBias) -> bool:
        dbg = np.linalg.norm(bias.gyro_bias - self.bias_point.gyro_bias)
        dba = np.linalg.norm(bias.accel_bias - self.bias_point.accel_bias)
        return bool(dbg > GYRO_REPROPAGATE or dba > ACCEL_REPROPAGATE)


def _check_dtau(sample: ImuSample, next_stamp):
    dtau = float(next_stamp) - float(sample.stamp)
    if not dtau > 0:
        raise ValueError(f"IMU stamps must increase (got {sample.stamp} -> {next_stamp})")
    return dtau


def propagate_bias_jacobians(state: Preintegration, sample: ImuSample, dtau: float):
    """Advance A, B, C by one sample; must run before alpha/beta/gamma move."""
    r = state.gamma_rot
    acc = np.asarray(sample.accel) - state.bias_point.accel_bias
    w = (np.asarray(sample.gyro) - state.bias_point.gyro_bias) * dtau
    ra = r @ hat(acc) @ state.jac_gamma_gyro
    a_w = state.jac_alpha_gyro + state.jac_beta_gyro * dtau - 0.5 * ra * dtau**2
    a_a = state.jac_alpha_accel + state.jac_beta_accel * dtau - 0.5 * r * dtau**2
    b_w = state.jac_beta_gyro - ra * dtau
    b_a = state.jac_beta_accel - r * dtau
    c_w = exp_so3(w).T @ state.jac_gamma_gyro - right_jacobian(w) * dtau
    return a_w, a_a, b_w, b_a, c_w


def transition(state: Preintegration, sample: ImuSample, dtau: float):
    """Error-state matrices ``F`` (15x15) and ``G`` (15x12) at the current sample."""
    r = state.gamma_rot
    acc = np.asarray(sample.accel) - state.bias_point.accel_bias
    w = np.asarray(sample.gyro) - state.bias_point.gyro_bias
    f = np.zeros((15, 15))
    f[ALPHA, BETA] = _I3
    f[BETA, THETA] = -r @ hat(acc)
    f[BETA, BA] = -r
    f[THETA, THETA] = -hat(w)
    f[THETA, BG] = -_I3
    g = np.zeros((15, 12))
    g[THETA, 0:3] = -_I3
    g[BETA, 3:6] = -r
    g[BG, 6:9] = _I3
    g[BA, 9:12] = _I3
    return f, g


def propagate_covariance(state: Preintegration, sample: ImuSample, dtau: float, noise: ImuNoiseParams):
    """First-order discrete propagation ``P <- Phi P Phi^T + G Q G^T dtau``."""
    f, g = transition(state, sample, dtau)
    phi = np.eye(15) + f * dtau
    p = phi @ state.covariance @ phi.T + (g * noise.diag()) @ g.T * dtau
    return 0.5 * (p + p.T)


def integrate_step(state: Preintegration, sample: ImuSample, next_stamp) -> Preintegration:
    """Integrate one zero-order-held sample up to ``next_stamp`` (in place)."""
    dtau = _check_dtau(sample, next_stamp)
    jac = propagate_bias_jacobians(state, sample, dtau)
    if state.noise is not None:
        state.covariance = propagate_covariance(state, sample, dtau, state.noise)
    r = state.gamma_rot
    acc = r @ (np.asarray(sample.accel) - state.bias_point.accel_bias)
    w = np.asarray(sample.gyro) - state.bias_point.gyro_bias
    state.alpha = state.alpha + state.beta * dtau + 0.5 * acc * dtau**2
    state.beta = state.beta + acc * dtau
    state.gamma = quat_normalize(quat_mul(state.gamma, vec_to_quat(w * dtau)))
    (
        state.jac_alpha_gyro,
        state.jac_alpha_accel,
        state.jac_beta_gyro,
        state.jac_beta_accel,
        state.jac_gamma_gyro,
    ) = jac
    state.duration += dtau
    state.sample_count += 1
    return state


def preintegrate(segment: ImuSegment, bias: ImuBias | None = None, noise: ImuNoiseParams | None = None):
    """Preintegrate a whole segment; see :func:`preintegrate_many`."""
    return preintegrate_many([segment], [bias], noise)[0]


def preintegrate_many(segments, biases, noise: ImuNoiseParams | None = None):
    """Preintegrate several segments in lock-step.

    This is the hot path of the estimator. Segments are padded with zero-length
    steps, which leave every accumulated quantity unchanged, so all of them run
    through one vectorized recursion. :func:`integrate_step` is the reference
    implementation and both agree to rounding.
    """
    biases = [b if b is not None else ImuBias() for b in biases]
    outs = [Preintegration(bias_point=b, noise=noise, segment=s) for s, b in zip(segments, biases)]
    todo = [i for i, s in enumerate(segments) if len(s) >= 2]
    if not todo:
        return outs
    steps = max(len(segments[i]) for i in todo) - 1
    n = len(todo)
    dts = np.zeros((n, steps))
    gyro = np.zeros((n, steps, 3))
    acc_all = np.zeros((n, steps, 3))
    for j, i in enumerate(todo):
        seg, b = segments[i], biases[i]
        dt = np.diff(seg.stamps)
        if np.any(dt <= 0):
            raise ValueError("IMU stamps must increase")
        m = len(dt)
        dts[j, :m] = dt
        gyro[j, :m] = seg.gyro[:-1] - b.gyro_bias
        acc_all[j, :m] = seg.accel[:-1] - b.accel_bias
    w_all = gyro * dts[..., None]
    exps_t = np.swapaxes(exp_so3(w_all), -1, -2)
    jr = right_jacobian(w_all)
    dq = vec_to_quat(w_all)
    acc_hat = hat(acc_all)
    w_hat = hat(gyro)

    alpha = np.zeros((n, 3))
    beta = np.zeros((n, 3))
    gamma = np.tile(identity_quat(), (n, 1))
    r = np.tile(np.eye(3), (n, 1, 1))
    a_w, a_a, b_w, b_a, c_w = (np.zeros((n, 3, 3)) for _ in range(5))
    cov = np.zeros((n, 15, 15))
    if noise is not None:
        qd = noise.diag()
        phi = np.tile(np.eye(15), (n, 1, 1))
        qc = np.zeros((n, 15, 15))
        qc[:, THETA, THETA] = np.diag(qd[0:3])
        qc[:, BG, BG] = np.diag(qd[6:9])
        qc[:, BA, BA] = np.diag(qd[9:12])
        qa = np.diag(qd[3:6])
    for k in range(steps):
        dt = dts[:, k, None, None]
        ra_hat = r @ acc_hat[:, k]
        if noise is not None:
            # Phi = I + F dt and G Q G^T, rebuilt in place
            phi[:, BETA, THETA] = -ra_hat * dt
            phi[:, BETA, BA] = -r * dt
            phi[:, ALPHA, BETA] = _I3 * dt
            phi[:, THETA, THETA] = _I3 - w_hat[:, k] * dt
            phi[:, THETA, BG] = -_I3 * dt
            qc[:, BETA, BETA] = r @ qa @ np.swapaxes(r, -1, -2)
            cov = phi @ cov @ np.swapaxes(phi, -1, -2) + qc * dt
        rac = ra_hat @ c_w
        a_w = a_w + b_w * dt - 0.5 * rac * dt * dt
        a_a = a_a + b_a * dt - 0.5 * r * dt * dt
        b_w = b_w - rac * dt
        b_a = b_a - r * dt
        c_w = exps_t[:, k] @ c_w - jr[:, k] * dt
        acc = np.einsum("nij,nj->ni", r, acc_all[:, k])
        dt1 = dts[:, k, None]
        alpha = alpha + beta * dt1 + 0.5 * acc * dt1 * dt1
        beta = beta + acc * dt1
        gamma = quat_normalize(quat_mul(gamma, dq[:, k]))
        r = quat_to_rot(gamma)

    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    for j, i in enumerate(todo):
        out, seg = outs[i], segments[i]
        out.alpha, out.beta, out.gamma = alpha[j], beta[j], gamma[j]
        out.jac_alpha_gyro, out.jac_alpha_accel = a_w[j], a_a[j]
        out.jac_beta_gyro, out.jac_beta_accel, out.jac_gamma_gyro = b_w[j], b_a[j], c_w[j]
        out.covariance = cov[j]
        out.duration = float(seg.stamps[-1] - seg.stamps[0])
        out.sample_count = len(seg) - 1
    return outs


def reintegrate(pre: Preintegration, bias: ImuBias) -> Preintegration:
    """Repeat the integration of the stored segment about a new bias point."""
    return reintegrate_many([pre], [bias])[0]


def reintegrate_many(pres, biases):
    """Batched :func:`reintegrate`; all entries must share one noise model."""
    if any(p.segment is None for p in pres):
        raise ValueError("preintegration has no stored segment")
    if not pres:
        return []
    return preintegrate_many([p.segment for p in pres], biases, pres[0].noise)


def correct_for_bias(pre: Preintegration, new_bias: ImuBias):
    """First-order bias correction of ``(alpha, beta, gamma)``."""
    dbg = np.asarray(new_bias.gyro_bias) - pre.bias_point.gyro_bias
    dba = np.asarray(new_bias.accel_bias) - pre.bias_point.accel_bias
    alpha = pre.alpha + pre.jac_alpha_gyro @ dbg + pre.jac_alpha_accel @ dba
    beta = pre.beta + pre.jac_beta_gyro @ dbg + pre.jac_beta_accel @ dba
    gamma = retract_rotation(pre.gamma, pre.jac_gamma_gyro @ dbg)
    return alpha, beta, gamma


def predict_from_preintegration(state: NavState, pre: Preintegration, gravity) -> NavState:
    """Dead-reckon ``state`` over the interval summarized by ``pre``."""
    g = np.asarray(gravity, dtype=float)
    dt = pre.duration
    alpha, beta, gamma = correct_for_bias(pre, ImuBias.of(state))
    r = state.rot
    return NavState(
        quat_normalize(quat_mul(state.q, gamma)),
        state.p + state.v * dt - 0.5 * g * dt * dt + r @ alpha,
        state.v - g * dt + r @ beta,
        state.bg,
        state.ba,
    )


def predict_state(state: NavState, segment: ImuSegment | None, gravity) -> NavState:
    """Propagate ``state`` through ``segment`` at the state's own bias."""
    if segment is None or len(segment) < 2:
        return state.copy()
    pre = preintegrate(segment, ImuBias.of(state))
    return predict_from_preintegration(state, pre, gravity)
