"""Levenberg-Marquardt over the sliding window, window sliding and yaw initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .factors import (
    imu_batch,
    imu_covariance,
    imu_jacobians,
    imu_residual,
    osl_batch,
    osl_jacobians,
    osl_residual,
    sqrt_information,
    stack_preintegrations,
    uwb_batch,
    UWB_DEGENERATE,
    ResidualBlock,
)
from .manifold import (
    log_so3,
    quat_from_rpy,
    quat_mul,
    quat_to_rot,
    retract_rotation,
    right_jacobian_inv,
    yaw_quat,
)
from .preintegration import Preintegration, predict_from_preintegration, reintegrate_many
from .state import BA, BG, BLOCK, POS, STATE_DIM, THETA, VEL, ImuBias, NavState, OslDisplacement, UwbObservation

FAMILIES = ("imu", "osl", "uwb", "prior")


@dataclass
class SolverConfig:
    max_iterations: int = 20
    gradient_tol: float = 1e-8
    step_tol: float = 1e-7
    cost_tol: float = 1e-6
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 10.0
    lm_lambda_max: float = 1e12
    window_size: int = 30
    exact_retraction: bool = True
    prior_sigma_pos: float = 10.0
    prior_sigma_rot: float = 1.0
    analyze_gauge: bool = False
    gauge_ratio: float = 1e-12

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window size M must be at least 1")
        if min(self.gradient_tol, self.step_tol, self.cost_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    family_costs: dict = field(default_factory=dict)
    gauge_prior_active: bool = False
    gauge_min_ratio: float | None = None
    gauge_null_dims: int | None = None
    residual_count: int = 0

    @property
    def gauge_deficient(self):
        return self.gauge_null_dims is not None and self.gauge_null_dims > 0

    def as_dict(self):
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "family_costs": dict(self.family_costs),
            "gauge_prior_active": self.gauge_prior_active,
            "gauge_min_ratio": self.gauge_min_ratio,
            "gauge_null_dims": self.gauge_null_dims,
            "residual_count": self.residual_count,
        }


@dataclass
class SlidingWindow:
    """States ``t_k .. t_{k+M}`` and the factors of the ``M`` intervals between them."""

    stamps: list = field(default_factory=list)
    states: list = field(default_factory=list)
    imu: list = field(default_factory=list)
    osl: list = field(default_factory=list)
    uwb: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def intervals(self):
        return len(self.states) - 1

    @property
    def newest(self) -> NavState:
        return self.states[-1]

    def uwb_count(self):
        return sum(len(u) for u in self.uwb)

    def copy(self) -> "SlidingWindow":
        return SlidingWindow(
            list(self.stamps),
            [s.copy() for s in self.states],
            list(self.imu),
            [list(o) for o in self.osl],
            [list(u) for u in self.uwb],
        )

    def with_states(self, states) -> "SlidingWindow":
        out = self.copy()
        out.states = list(states)
        return out

    def validate(self):
        if len(self.states) < 2:
            raise ValueError("window needs at least two states")
        n = self.intervals
        if not (len(self.stamps) == len(self.states) and len(self.imu) == len(self.osl) == len(self.uwb) == n):
            raise ValueError("window factor lists do not match its intervals")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("window stamps must increase")


# --------------------------------------------------------------------------
# problem assembly


def _imu_weight(pre: Preintegration):
    if pre.sqrt_info is None:
        pre.sqrt_info = sqrt_information(imu_covariance(pre))
    return pre.sqrt_info


def _col(index, tag):
    sl = BLOCK[tag]
    return index * STATE_DIM + sl.start


@dataclass
class PairJacobian:
    """Whitened Jacobian whose rows each touch nodes ``start`` and ``start + 1``.

    ``local`` holds the 30 columns of that node pair for every row.
    """

    local: np.ndarray
    start: np.ndarray
    nodes: int

    @property
    def dim(self):
        return STATE_DIM * self.nodes

    def dense(self):
        out = np.zeros((len(self.local), self.dim))
        cols = self.start[:, None] * STATE_DIM + np.arange(2 * STATE_DIM)
        # the pair block of the last node would spill past the end; it is zero there
        keep = cols < self.dim
        rows = np.broadcast_to(np.arange(len(self.local))[:, None], cols.shape)
        out[rows[keep], cols[keep]] = self.local[keep]
        return out

    def normal_equations(self, r):
        """``(J^T J, J^T r)`` assembled from 30x30 node-pair blocks."""
        order = np.argsort(self.start, kind="stable")
        jl, rr, st = self.local[order], r[order], self.start[order]
        size = STATE_DIM * (self.nodes + 1)
        h = np.zeros((size, size))
        g = np.zeros(size)
        edges = np.flatnonzero(np.diff(st)) + 1
        for a, b in zip(np.r_[0, edges], np.r_[edges, len(st)]):
            c = STATE_DIM * st[a]
            blk = jl[a:b]
            h[c : c + 2 * STATE_DIM, c : c + 2 * STATE_DIM] += blk.T @ blk
            g[c : c + 2 * STATE_DIM] += blk.T @ rr[a:b]
        return h[: self.dim, : self.dim], g[: self.dim]


def _stack(states):
    return tuple(np.array([getattr(s, k) for s in states]) for k in ("q", "p", "v", "bg", "ba"))


class _Problem:
    """Whitened residual vector and dense Jacobian of one window."""

    def __init__(self, window: SlidingWindow, gravity, config: SolverConfig, prior=None):
        window.validate()
        self.window = window
        self.gravity = np.asarray(gravity, dtype=float)
        self.config = config
        self.prior = prior
        self.dim = STATE_DIM * len(window.states)
        uwb = [(i, o) for i, obs in enumerate(window.uwb) for o in obs]
        self.uwb_index = np.array([i for i, _ in uwb], dtype=int)
        self.uwb_obs = [o for _, o in uwb]
        if uwb:
            self.uwb_anchor = np.array([o.anchor for o in self.uwb_obs], dtype=float)
            self.uwb_antenna = np.array([o.antenna for o in self.uwb_obs], dtype=float)
            self.uwb_dt = np.array([o.dt for o in self.uwb_obs], dtype=float)
            self.uwb_step = np.array([o.step for o in self.uwb_obs], dtype=float)
            self.uwb_d = np.array([o.d for o in self.uwb_obs], dtype=float)
            self.uwb_w = 1.0 / np.array([o.sigma for o in self.uwb_obs], dtype=float)
        imu = [(i, pre) for i, pre in enumerate(window.imu) if pre is not None and pre.duration > 0]
        self.imu_count = len(imu)
        self.imu_index = np.array([i for i, _ in imu], dtype=int)
        if imu:
            pres = [pre for _, pre in imu]
            self.imu_pre = stack_preintegrations(pres)
            self.imu_weight = np.array([_imu_weight(pre) for pre in pres])
        osl = [(i, o) for i, obs in enumerate(window.osl) for o in obs]
        self.osl_count = len(osl)
        self.osl_index = np.array([i for i, _ in osl], dtype=int)
        if osl:
            self.osl_dq = np.array([o.dq for _, o in osl], dtype=float)
            self.osl_dp = np.array([o.dp for _, o in osl], dtype=float)
            self.osl_weight = np.array([sqrt_information(o.covariance()) for _, o in osl])
        if self.imu_count + self.osl_count + len(uwb) == 0:
            raise ValueError("window has no factors")

    def rows(self):
        return 15 * self.imu_count + 6 * self.osl_count + len(self.uwb_obs) + (6 if self.prior else 0)

    def _uwb(self, states, jacobians):
        idx = self.uwb_index
        q, p, v, _, _ = _stack(states)
        return uwb_batch(
            q[idx], p[idx], v[idx], q[idx + 1], p[idx + 1], v[idx + 1],
            self.uwb_anchor, self.uwb_antenna, self.uwb_dt, self.uwb_step, jacobians=jacobians,
        )

    def evaluate(self, states, jacobians=True):
        """Return ``(r, J, family_costs)``.

        ``J`` is a :class:`PairJacobian` (``None`` when not requested): every
        factor touches at most two consecutive nodes.
        """
        rs, js, starts, fam = [], [], [], dict.fromkeys(FAMILIES, 0.0)

        def add(family, r, jl, index):
            fam[family] += float(np.sum(r * r))
            rs.append(r.reshape(-1))
            if jl is not None:
                js.append(jl.reshape(-1, 2 * STATE_DIM))
                starts.append(np.repeat(index, r.shape[-1] if r.ndim > 1 else 1))

        q, p, v, bg, ba = _stack(states)
        if self.imu_count:
            i = self.imu_index
            res, jac = imu_batch(
                q[i], p[i], v[i], bg[i], ba[i], q[i + 1], p[i + 1], v[i + 1], bg[i + 1], ba[i + 1],
                self.imu_pre, self.gravity, jacobians,
            )
            w = self.imu_weight
            add("imu", np.einsum("nij,nj->ni", w, res), None if jac is None else w @ jac, i)
        if self.osl_count:
            i = self.osl_index
            res, jac = osl_batch(q[i], p[i], q[i + 1], p[i + 1], self.osl_dq, self.osl_dp, jacobians)
            w = self.osl_weight
            add("osl", np.einsum("nij,nj->ni", w, res), None if jac is None else w @ jac, i)
        if self.uwb_obs:
            _, norm, blocks = self._uwb(states, jacobians)
            valid = norm >= UWB_DEGENERATE
            r = np.where(valid, (norm - self.uwb_d) * self.uwb_w, 0.0)
            jl = None
            if jacobians:
                jl = np.zeros((len(r), 2 * STATE_DIM))
                scale = (self.uwb_w * valid)[:, None]
                for (node, tag), m in blocks.items():
                    c = node * STATE_DIM + BLOCK[tag].start
                    jl[:, c : c + 3] += scale * m
            add("uwb", r, jl, self.uwb_index)
        if self.prior is not None:
            ref, sig_rot, sig_pos = self.prior
            x = states[0]
            rot_err = log_so3(ref.rot.T @ x.rot)
            weight = np.array([1.0 / sig_rot] * 3 + [1.0 / sig_pos] * 3)
            r = weight * np.concatenate([rot_err, x.p - ref.p])
            jl = None
            if jacobians:
                jl = np.zeros((6, 2 * STATE_DIM))
                jl[0:3, THETA] = right_jacobian_inv(rot_err)
                jl[3:6, POS] = np.eye(3)
                jl = weight[:, None] * jl
            add("prior", r[None, :], None if jl is None else jl[None], np.zeros(1, dtype=int))
        r = np.concatenate(rs) if rs else np.zeros(0)
        jac = None
        if jacobians:
            jac = PairJacobian(np.vstack(js), np.concatenate(starts), len(states))
        return r, jac, fam


def build_problem(window: SlidingWindow, gravity, config: SolverConfig | None = None, prior=None):
    """One :class:`ResidualBlock` per observation (IMU, OSL, UWB and optional prior).

    The solver itself works on the batched form; this view is for inspection
    and tests.
    """
    config = config or SolverConfig()
    prob = _Problem(window, gravity, config, prior)
    states = window.states
    out = []
    for i, pre in enumerate(window.imu):
        if pre is None or pre.duration <= 0:
            continue
        jac = imu_jacobians(states[i], states[i + 1], pre, gravity)
        out.append(
            ResidualBlock(
                "imu",
                imu_residual(states[i], states[i + 1], pre, gravity),
                [(i + n, t, m) for (n, t), m in jac.items()],
                _imu_weight(pre),
            )
        )
    for i, obs_list in enumerate(window.osl):
        for obs in obs_list:
            jac = osl_jacobians(states[i], states[i + 1], obs)
            out.append(
                ResidualBlock(
                    "osl",
                    osl_residual(states[i], states[i + 1], obs),
                    [(i + n, t, m) for (n, t), m in jac.items()],
                    sqrt_information(obs.covariance()),
                )
            )
    if prob.uwb_obs:
        _, norm, blocks = prob._uwb(states, True)
        for k, obs in enumerate(prob.uwb_obs):
            if norm[k] < UWB_DEGENERATE:
                continue
            i = prob.uwb_index[k]
            out.append(
                ResidualBlock(
                    "uwb",
                    np.array([norm[k] - obs.d]),
                    [(i + n, t, m[k][None, :]) for (n, t), m in blocks.items()],
                    np.array([[1.0 / obs.sigma]]),
                )
            )
    return out


def total_cost(window: SlidingWindow, gravity, config: SolverConfig | None = None):
    r, _, fam = _Problem(window, gravity, config or SolverConfig()).evaluate(window.states, jacobians=False)
    return float(r @ r), fam


# --------------------------------------------------------------------------
# solve


def refresh_preintegrations(window: SlidingWindow):
    """Re-integrate intervals whose bias estimate moved past the threshold."""
    stale = []
    for i, pre in enumerate(window.imu):
        if pre is None or pre.segment is None:
            continue
        bias = ImuBias.of(window.states[i])
        if pre.needs_repropagation(bias):
            stale.append((i, bias))
    if not stale:
        return False
    fresh = reintegrate_many([window.imu[i] for i, _ in stale], [b for _, b in stale])
    for (i, _), pre in zip(stale, fresh):
        window.imu[i] = pre
    return True


def gauge_analysis(h, ratio):
    """Smallest Jacobi-scaled eigenvalue ratio of ``H = J^T J`` and the count below ``ratio``."""
    d = np.sqrt(np.maximum(np.diag(h), 1e-300))
    hs = h / d[:, None] / d[None, :]
    ev = np.linalg.eigvalsh(hs)
    top = max(ev[-1], 1e-300)
    rel = ev / top
    return float(max(rel[0], 0.0)), int(np.sum(rel < ratio))


def _retract_all(states, delta, exact):
    d = delta.reshape(len(states), STATE_DIM)
    q, p, v, bg, ba = _stack(states)
    q = retract_rotation(q, d[:, THETA], exact=exact)
    p, v, bg, ba = p + d[:, POS], v + d[:, VEL], bg + d[:, BG], ba + d[:, BA]
    return [NavState(q[i], p[i], v[i], bg[i], ba[i]) for i in range(len(states))]


def solve(window: SlidingWindow, config: SolverConfig | None = None, gravity=(0.0, 0.0, 9.81), max_iterations=None):
    """Minimize the window cost; returns ``(new window, SolveReport)``."""
    config = config or SolverConfig()
    window = window.copy()
    refresh_preintegrations(window)
    prior = None
    if window.uwb_count() == 0:
        prior = (window.states[0].copy(), config.prior_sigma_rot, config.prior_sigma_pos)
    prob = _Problem(window, gravity, config, prior)
    states = window.states
    r, jac, fam = prob.evaluate(states)
    cost = initial = float(r @ r)
    lam = config.lm_lambda_init
    converged = False
    iters = 0
    limit = config.max_iterations if max_iterations is None else max_iterations
    while iters < limit:
        h, g = jac.normal_equations(r)
        if np.max(np.abs(g)) < config.gradient_tol:
            converged = True
            break
        diag = np.maximum(np.diag(h), 1e-12)
        iters += 1
        accepted = False
        while lam <= config.lm_lambda_max:
            try:
                factor = cho_factor(h + lam * np.diag(diag))
                delta = cho_solve(factor, -g)
            except (LinAlgError, ValueError):
                lam *= config.lm_lambda_up
                continue
            trial = _retract_all(states, delta, config.exact_retraction)
            r_new, _, _ = prob.evaluate(trial, jacobians=False)
            new_cost = float(r_new @ r_new)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            lam *= config.lm_lambda_up
        if not accepted:
            converged = True  # no descent direction left at any damping
            break
        lam = max(lam / config.lm_lambda_down, 1e-12)
        states = trial
        small_step = np.linalg.norm(delta) < config.step_tol * (1.0 + np.linalg.norm(np.concatenate([s.p for s in states])))
        small_drop = (cost - new_cost) <= config.cost_tol * max(cost, 1e-30)
        cost = new_cost
        r, jac, fam = prob.evaluate(states)
        if small_step or small_drop:
            converged = True
            break

    window.states = states
    report = SolveReport(
        initial_cost=initial,
        final_cost=cost,
        iterations=iters,
        converged=converged,
        family_costs=fam,
        gauge_prior_active=prior is not None,
        residual_count=len(r),
    )
    if config.analyze_gauge:
        data = _Problem(window, gravity, config, None)
        rd, jd, _ = data.evaluate(states)
        report.gauge_min_ratio, report.gauge_null_dims = gauge_analysis(
            jd.normal_equations(rd)[0], config.gauge_ratio
        )
    refresh_preintegrations(window)
    return window, report


# --------------------------------------------------------------------------
# sliding


def append(window: SlidingWindow, stamp, pre: Preintegration, osl=(), uwb=(), state: NavState | None = None, gravity=(0.0, 0.0, 9.81)):
    """Append a node predicted from the newest state through ``pre``."""
    out = window.copy()
    if state is None:
        state = predict_from_preintegration(out.newest, pre, gravity) if out.states else NavState()
    if out.states and stamp <= out.stamps[-1]:
        raise ValueError("new node must be later than the newest one")
    out.stamps.append(float(stamp))
    out.states.append(state)
    if len(out.states) > 1:
        out.imu.append(pre)
        out.osl.append(list(osl))
        out.uwb.append(list(uwb))
    return out


def drop_oldest(window: SlidingWindow) -> SlidingWindow:
    out = window.copy()
    del out.stamps[0], out.states[0]
    if out.imu:
        del out.imu[0], out.osl[0], out.uwb[0]
    return out


def slide(window: SlidingWindow, stamp, pre, osl=(), uwb=(), window_size=30, gravity=(0.0, 0.0, 9.81)):
    """Append the next node and abandon the oldest one once more than ``M+1`` are held."""
    out = append(window, stamp, pre, osl, uwb, gravity=gravity)
    while len(out.states) > window_size + 1:
        out = drop_oldest(out)
    return out


# --------------------------------------------------------------------------
# initialization helpers


def gravity_roll_pitch(accel_mean):
    """Roll and pitch that align the body z axis with the measured specific force."""
    ax, ay, az = np.asarray(accel_mean, dtype=float)
    return float(np.arctan2(ay, az)), float(np.arctan2(-ax, np.hypot(ay, az)))


def rotate_window_yaw(window: SlidingWindow, yaw, center=None) -> SlidingWindow:
    """Rotate every node about the world z axis through ``center``."""
    center = np.mean([s.p for s in window.states], axis=0) if center is None else np.asarray(center)
    qz = yaw_quat(yaw)
    rz = quat_to_rot(qz)
    states = [
        NavState(quat_mul(qz, s.q), center + rz @ (s.p - center), rz @ s.v, s.bg, s.ba) for s in window.states
    ]
    return window.with_states(states)


def seed_states(window: SlidingWindow, yaw, roll, pitch, positions, velocities, gravity=(0.0, 0.0, 9.81)):
    """Node states for one yaw hypothesis: attitude chained through the gyro."""
    q = quat_from_rpy(roll, pitch, yaw)
    states = [NavState(q, positions[0], velocities[0])]
    for i, pre in enumerate(window.imu):
        q = quat_mul(q, pre.gamma)
        states.append(NavState(q, positions[i + 1], velocities[i + 1]))
    return window.with_states(states)


def yaw_grid_initialize(
    window: SlidingWindow,
    n_grid: int,
    accel_mean,
    positions,
    velocities,
    config: SolverConfig | None = None,
    gravity=(0.0, 0.0, 9.81),
    coarse_iterations=8,
    yaws=None,
):
    """Solve from ``n_grid`` yaw seeds in ``[0, 2 pi)`` and keep the cheapest.

    Each seed gets a capped number of LM iterations; the best one is then
    solved to convergence. Ties (relative cost difference below 1e-9) go to the
    smaller seed yaw. Returns ``(window, report, costs)`` where ``costs`` lists
    ``(seed_yaw, coarse_cost)``.
    """
    config = config or SolverConfig()
    roll, pitch = gravity_roll_pitch(accel_mean)
    if yaws is None:
        yaws = 2.0 * np.pi * np.arange(n_grid) / n_grid
    results = []
    for yaw in yaws:
        seeded = seed_states(window, yaw, roll, pitch, positions, velocities, gravity)
        try:
            w, rep = solve(seeded, config, gravity, max_iterations=coarse_iterations)
        except (LinAlgError, ValueError, FloatingPointError):
            continue
        if np.isfinite(rep.final_cost):
            results.append((rep.final_cost, float(yaw), w))
    if not results:
        raise RuntimeError("every yaw seed diverged")
    best_cost = min(c for c, _, _ in results)
    tied = [x for x in results if x[0] <= best_cost * (1.0 + 1e-9)]
    _, _, best = min(tied, key=lambda x: x[1])
    final, rep = solve(best, config, gravity)
    return final, rep, [(y, c) for c, y, _ in results]


def yaw_nudge_explore(window: SlidingWindow, config: SolverConfig | None = None, gravity=(0.0, 0.0, 9.81), offsets=(np.pi / 6, -np.pi / 6)):
    """Re-solve from yaw-rotated copies of ``window``; keep the smallest cost."""
    config = config or SolverConfig()
    best_cost, _ = total_cost(window, gravity, config)
    best = window
    for off in offsets:
        cand, rep = solve(rotate_window_yaw(window, off), config, gravity)
        if rep.final_cost < best_cost:
            best, best_cost = cand, rep.final_cost
    return best, best_cost
