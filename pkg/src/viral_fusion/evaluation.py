"""Trajectory alignment, stamp matching and RMSE metrics."""

from __future__ import annotations

import numpy as np

from .dataio import PoseTable
from .manifold import log_so3, quat_mul, quat_normalize, quat_to_rot, yaw_quat

MATCH_TOL = 0.01
MIN_PAIRS = 10


class EvaluationError(ValueError):
    pass


def match_nearest(est_t, gt_t, tol=MATCH_TOL):
    """Index pairs ``(i_est, i_gt)`` of nearest stamps no further apart than ``tol``."""
    est_t = np.asarray(est_t, dtype=float)
    gt_t = np.asarray(gt_t, dtype=float)
    if len(est_t) == 0 or len(gt_t) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if len(gt_t) == 1:
        j = np.zeros(len(est_t), dtype=int)
    else:
        j = np.clip(np.searchsorted(gt_t, est_t), 1, len(gt_t) - 1)
        j = np.where(np.abs(est_t - gt_t[j - 1]) <= np.abs(gt_t[j] - est_t), j - 1, j)
    # relative slack so a constant shift of both stamp sets cannot flip a match
    slack = 1e-9 * max(1.0, float(np.max(np.abs(gt_t))))
    ok = np.abs(gt_t[j] - est_t) <= tol + slack
    return np.flatnonzero(ok), j[ok]


def align_osl_to_world(q_local, p_local, q0, p0):
    """Express a local odometry trajectory in the world frame of the initial pose ``(q0, p0)``."""
    q0 = np.asarray(q0, dtype=float)
    p_local = np.asarray(p_local, dtype=float)
    p = p_local @ quat_to_rot(q0).T + np.asarray(p0, dtype=float)
    q = quat_normalize(quat_mul(np.broadcast_to(q0, np.shape(q_local)), q_local))
    return q, p


def fit_yaw_translation(p_est, p_ref):
    """Yaw ``psi`` and translation ``t`` minimizing ``sum |Rz(psi) p_est + t - p_ref|^2``."""
    p_est = np.asarray(p_est, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    me, mr = p_est.mean(axis=0), p_ref.mean(axis=0)
    a, b = p_est - me, p_ref - mr
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    c = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    yaw = float(np.arctan2(s, c))
    t = mr - quat_to_rot(yaw_quat(yaw)) @ me
    return yaw, t


def apply_yaw_translation(traj: PoseTable, yaw, t) -> PoseTable:
    rz = quat_to_rot(yaw_quat(yaw))
    qz = yaw_quat(yaw)
    q = quat_mul(np.broadcast_to(qz, traj.q.shape), traj.q)
    v = None if traj.v is None else traj.v @ rz.T
    return PoseTable(traj.stamps, q, traj.p @ rz.T + t, v)


def trajectory_errors(est: PoseTable, gt: PoseTable, tol=MATCH_TOL, min_pairs=MIN_PAIRS):
    """Per matched pair: stamp, position error, rotation error vector ``Log(R_gt^T R)``, velocity error."""
    i, j = match_nearest(est.stamps, gt.stamps, tol)
    if len(i) < min_pairs:
        raise EvaluationError(f"only {len(i)} stamp pairs within {tol} s, need {min_pairs}")
    r_est = quat_to_rot(est.q[i])
    r_gt = quat_to_rot(gt.q[j])
    rot = log_so3(np.swapaxes(r_gt, -1, -2) @ r_est)
    vel = None
    if est.v is not None and gt.v is not None:
        vel = est.v[i] - gt.v[j]
    return {
        "stamp": est.stamps[i],
        "gt_stamp": gt.stamps[j],
        "pos": est.p[i] - gt.p[j],
        "rot": rot,
        "vel": vel,
        "est_p": est.p[i],
        "gt_p": gt.p[j],
    }


def _rms(err):
    return float(np.sqrt(np.mean(np.sum(np.asarray(err) ** 2, axis=-1))))


def rmse(est: PoseTable, gt: PoseTable, tol=MATCH_TOL):
    """``(position RMSE in m, rotation RMSE in degrees)`` over nearest-stamp pairs."""
    e = trajectory_errors(est, gt, tol)
    return _rms(e["pos"]), float(np.degrees(_rms(e["rot"])))


def evaluate(est: PoseTable, gt: PoseTable, align=None, tol=MATCH_TOL):
    """Metrics dictionary and per-pair error table.

    ``align="yaw-trans"`` first fits yaw and translation of the estimate to
    the ground truth over the matched pairs.
    """
    if align not in (None, "none", "yaw-trans"):
        raise EvaluationError(f"unknown alignment {align!r}")
    if align == "yaw-trans":
        i, j = match_nearest(est.stamps, gt.stamps, tol)
        if len(i) < MIN_PAIRS:
            raise EvaluationError(f"only {len(i)} stamp pairs within {tol} s, need {MIN_PAIRS}")
        yaw, t = fit_yaw_translation(est.p[i], gt.p[j])
        est = apply_yaw_translation(est, yaw, t)
    e = trajectory_errors(est, gt, tol)
    report = {
        "rmse_pos_m": _rms(e["pos"]),
        "rmse_rot_deg": float(np.degrees(_rms(e["rot"]))),
        "rmse_vel_mps": None if e["vel"] is None else _rms(e["vel"]),
        "matched_pairs": int(len(e["stamp"])),
        "duration_s": float(e["stamp"][-1] - e["stamp"][0]),
    }
    return report, e


PLOT_HEADER = [
    "stamp",
    "px", "py", "pz",
    "gt_px", "gt_py", "gt_pz",
    "err_px", "err_py", "err_pz",
    "err_rx_deg", "err_ry_deg", "err_rz_deg",
    "err_vx", "err_vy", "err_vz",
]


def plot_rows(errors):
    """Rows of ``PLOT_HEADER`` for the per-axis error time series."""
    n = len(errors["stamp"])
    vel = errors["vel"] if errors["vel"] is not None else np.full((n, 3), np.nan)
    rot = np.degrees(errors["rot"])
    return [
        [errors["stamp"][k], *errors["est_p"][k], *errors["gt_p"][k], *errors["pos"][k], *rot[k], *vel[k]]
        for k in range(n)
    ]
