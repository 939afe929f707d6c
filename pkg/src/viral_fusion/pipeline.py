"""Streaming front end: buffering, step creation, gating, initialization and scheduling."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .factors import osl_residual, sqrt_information, uwb_predicted_vector
from .manifold import quat_inv, quat_mul, quat_slerp, quat_to_rot
from .preintegration import predict_from_preintegration, preintegrate
from .solver import (
    SlidingWindow,
    SolverConfig,
    append,
    drop_oldest,
    gravity_roll_pitch,
    seed_states,
    slide,
    solve,
    yaw_grid_initialize,
    yaw_nudge_explore,
)
from .state import ImuBias, ImuNoiseParams, ImuSample, ImuSegment, NavState, OslDisplacement, UwbObservation

BOUNDARY_TOL = 1e-9


@dataclass
class StepConfig:
    step_length: float = 0.1
    outlier_gate_sigma: float = 5.0
    rate_of_change_max: float = 20.0
    skip_backlog_threshold: int = 3
    reorder_tolerance: float = 0.05
    osl_staleness_factor: float = 2.0
    osl_gate_sigma: float = 5.0

    def __post_init__(self):
        if self.step_length <= 0:
            raise ValueError("step_length must be positive")


@dataclass
class PipelineConfig:
    step: StepConfig = field(default_factory=StepConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    uwb_sigma: float = 0.05
    osl_sigma: dict = field(default_factory=lambda: {"vio": (0.01, 0.01, 0.01, 0.05, 0.05, 0.05)})
    osl_rate: dict = field(default_factory=lambda: {"vio": 10.0})
    init_min_ranges: int = 100
    init_min_imu: float = 1.0
    init_yaw_grid: int = 12
    init_cost_threshold: float = 5.0
    init_coarse_iterations: int = 8
    init_max_steps: int = 30
    nudge_after_init: bool = True
    nudge_every: int = 0
    nudge_offset: float = np.pi / 6
    use_uwb: bool = True

    @property
    def gravity(self):
        return self.imu_noise.gravity


@dataclass
class UwbRecord:
    stamp: float
    node_id: str
    antenna_id: str
    anchor_id: str
    range: float
    snr_ok: bool = True
    edge_ok: bool = True
    seq: int = -1

    @property
    def antenna_key(self):
        return f"{self.node_id}.{self.antenna_id}"


@dataclass
class OslRecord:
    stream: str
    stamp: float
    q: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class Admission:
    accepted: bool
    reason: str | None = None


ACCEPTED = Admission(True)


class MeasurementBuffers:
    """Time-ordered IMU, per-stream odometry and range buffers."""

    def __init__(self):
        self.imu_t: list = []
        self.imu_g: list = []
        self.imu_a: list = []
        self.osl: dict = {}
        self.uwb: list = []
        self._uwb_t: list = []
        self.last_range: dict = {}
        self.latest: dict = {}

    # -- insertion, keeping order within the reorder tolerance
    def add_imu(self, s: ImuSample):
        i = bisect.bisect_right(self.imu_t, s.stamp)
        self.imu_t.insert(i, float(s.stamp))
        self.imu_g.insert(i, np.asarray(s.gyro, dtype=float))
        self.imu_a.insert(i, np.asarray(s.accel, dtype=float))

    def add_osl(self, r: OslRecord):
        t, q, p = self.osl.setdefault(r.stream, ([], [], []))
        i = bisect.bisect_right(t, r.stamp)
        t.insert(i, float(r.stamp))
        q.insert(i, np.asarray(r.q, dtype=float))
        p.insert(i, np.asarray(r.p, dtype=float))

    def add_uwb(self, r: UwbRecord):
        i = bisect.bisect_right(self._uwb_t, r.stamp)
        self._uwb_t.insert(i, float(r.stamp))
        self.uwb.insert(i, r)

    @property
    def imu_latest(self):
        return self.imu_t[-1] if self.imu_t else -np.inf

    def imu_segment(self, t0, t1) -> ImuSegment:
        """Samples in ``[t0, t1]`` with linearly interpolated end points."""
        ts = self.imu_t
        if not ts or ts[0] > t0 + BOUNDARY_TOL or ts[-1] < t1 - BOUNDARY_TOL:
            raise ValueError(f"IMU buffer does not cover [{t0}, {t1}]")
        lo = bisect.bisect_right(ts, t0 + BOUNDARY_TOL)
        hi = bisect.bisect_left(ts, t1 - BOUNDARY_TOL)
        stamps = [t0] + ts[lo:hi] + [t1]
        g0, a0 = self._interp(t0)
        g1, a1 = self._interp(t1)
        gyro = [g0] + self.imu_g[lo:hi] + [g1]
        accel = [a0] + self.imu_a[lo:hi] + [a1]
        return ImuSegment(np.array(stamps), np.array(gyro), np.array(accel))

    def _interp(self, t):
        ts = self.imu_t
        i = bisect.bisect_left(ts, t - BOUNDARY_TOL)
        if i < len(ts) and abs(ts[i] - t) <= BOUNDARY_TOL:
            return self.imu_g[i], self.imu_a[i]
        if i == 0 or i >= len(ts):
            raise ValueError(f"cannot interpolate IMU at {t}")
        w = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
        return (
            (1 - w) * self.imu_g[i - 1] + w * self.imu_g[i],
            (1 - w) * self.imu_a[i - 1] + w * self.imu_a[i],
        )

    def osl_pose(self, stream, t, staleness):
        """Interpolated odometry pose at ``t`` or ``None`` if the stream is stale there."""
        if stream not in self.osl:
            return None
        ts, qs, ps = self.osl[stream]
        i = bisect.bisect_left(ts, t - BOUNDARY_TOL)
        if i < len(ts) and abs(ts[i] - t) <= BOUNDARY_TOL:
            return qs[i], ps[i]
        if i == 0 or i >= len(ts):
            return None
        if t - ts[i - 1] > staleness or ts[i] - t > staleness:
            return None
        s = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
        return quat_slerp(qs[i - 1], qs[i], s), (1 - s) * ps[i - 1] + s * ps[i]

    def uwb_between(self, t0, t1):
        """Records with ``t0 < stamp <= t1`` (boundary records go to the earlier interval)."""
        lo = bisect.bisect_right(self._uwb_t, t0 + BOUNDARY_TOL)
        hi = bisect.bisect_right(self._uwb_t, t1 + BOUNDARY_TOL)
        return self.uwb[lo:hi]

    def trim(self, t):
        """Drop everything older than ``t`` except one IMU/OSL sample before it."""
        i = max(bisect.bisect_left(self.imu_t, t - BOUNDARY_TOL) - 1, 0)
        del self.imu_t[:i], self.imu_g[:i], self.imu_a[:i]
        for ts, qs, ps in self.osl.values():
            j = max(bisect.bisect_left(ts, t - BOUNDARY_TOL) - 1, 0)
            del ts[:j], qs[:j], ps[:j]
        k = bisect.bisect_right(self._uwb_t, t + BOUNDARY_TOL)
        del self._uwb_t[:k], self.uwb[:k]


def admit(buffers: MeasurementBuffers, record, config: StepConfig, horizon=-np.inf) -> Admission:
    """Validate and buffer one record.

    ``horizon`` is the stamp of the newest processed step; anything at or before
    it can no longer be used and is rejected as stale, as is anything more than
    the reorder tolerance behind the newest record of its stream.
    """
    if isinstance(record, ImuSample):
        key = "imu"
    elif isinstance(record, OslRecord):
        key = f"osl:{record.stream}"
    elif isinstance(record, UwbRecord):
        key = "uwb"
    else:
        raise TypeError(f"unsupported record {type(record).__name__}")
    stamp = float(record.stamp)
    latest = buffers.latest.get(key, -np.inf)
    if stamp < latest - config.reorder_tolerance or (key == "uwb" and stamp <= horizon + BOUNDARY_TOL):
        return Admission(False, "stale")
    if key == "uwb":
        if not record.snr_ok:
            return Admission(False, "snr")
        if not record.edge_ok:
            return Admission(False, "edge")
        pair = (record.antenna_key, record.anchor_id)
        last = buffers.last_range.get(pair)
        if last is not None:
            dt = abs(stamp - last[0])
            if dt > 0 and abs(record.range - last[1]) / dt > config.rate_of_change_max:
                return Admission(False, "rate")
        buffers.last_range[pair] = (stamp, float(record.range))
        buffers.add_uwb(record)
    elif key == "imu":
        buffers.add_imu(record)
    else:
        buffers.add_osl(record)
    buffers.latest[key] = max(latest, stamp)
    return ACCEPTED


@dataclass
class Step:
    t0: float
    t1: float
    segment: ImuSegment
    osl: list
    uwb: list
    records: list


def create_step(buffers: MeasurementBuffers, t0, t1, config: PipelineConfig, anchors, antennas) -> Step:
    """Cut the measurements of ``(t0, t1]`` into one interval's observations."""
    step = t1 - t0
    segment = buffers.imu_segment(t0, t1)
    osl = []
    for name in sorted(buffers.osl):
        rate = config.osl_rate.get(name, 1.0 / config.step.step_length)
        staleness = config.step.osl_staleness_factor / rate
        a = buffers.osl_pose(name, t0, staleness)
        b = buffers.osl_pose(name, t1, staleness)
        if a is None or b is None:
            continue
        dq = quat_mul(quat_inv(a[0]), b[0])
        dp = quat_to_rot(a[0]).T @ (b[1] - a[1])
        sigma = np.asarray(config.osl_sigma.get(name, next(iter(config.osl_sigma.values()))), dtype=float)
        osl.append(OslDisplacement(dq, dp, step, sigma, name))
    uwb, recs = [], []
    for r in buffers.uwb_between(t0, t1):
        if r.anchor_id not in anchors or r.antenna_key not in antennas:
            continue
        dt = min(max(r.stamp - t0, BOUNDARY_TOL), step)
        uwb.append(
            UwbObservation(
                float(r.range),
                np.asarray(anchors[r.anchor_id], dtype=float),
                np.asarray(antennas[r.antenna_key], dtype=float),
                dt,
                step,
                config.uwb_sigma,
                r.stamp,
                r.anchor_id,
                r.antenna_key,
                r.seq,
            )
        )
        recs.append(r)
    return Step(t0, t1, segment, osl, uwb, recs)


def outlier_gate(obs: UwbObservation, predicted, gate_sigma=5.0) -> bool:
    """``True`` to keep: predicted range from the IMU-propagated pair within the gate."""
    xk, xk1 = predicted
    n = uwb_predicted_vector(xk, xk1, obs)
    return bool(abs(obs.d - np.linalg.norm(n)) <= gate_sigma * obs.sigma)


def osl_gate(disp: OslDisplacement, predicted, gate_sigma=5.0) -> bool:
    """``True`` to keep: whitened disagreement with the IMU-predicted displacement within the gate."""
    r = osl_residual(predicted[0], predicted[1], disp)
    w = sqrt_information(disp.covariance())
    return bool(np.linalg.norm(w @ r) <= gate_sigma)


def range_seed(obs, t_ref, t_end, anchors_center):
    """Constant-velocity point-mass fit to ranges; returns ``(p_ref, v)``."""
    t = np.array([o.stamp for o in obs]) - t_ref
    x = np.array([o.anchor for o in obs])
    d = np.array([o.d for o in obs])

    def fun(z):
        return np.linalg.norm(z[:3] + np.outer(t, z[3:]) - x, axis=1) - d

    z0 = np.concatenate([anchors_center, np.zeros(3)])
    sol = least_squares(fun, z0, method="lm")
    return sol.x[:3], sol.x[3:]


@dataclass
class Estimate:
    stamp: float
    state: NavState
    solved: bool


class Estimator:
    """Owns the buffers and the window; feed records with :meth:`push`."""

    def __init__(self, config: PipelineConfig, anchors: dict, antennas: dict):
        self.config = config
        self.anchors = {str(k): np.asarray(v, dtype=float) for k, v in anchors.items()}
        self.antennas = {str(k): np.asarray(v, dtype=float) for k, v in antennas.items()}
        self.buffers = MeasurementBuffers()
        self.window: SlidingWindow | None = None
        self.init_window: SlidingWindow | None = None
        self.t0: float | None = None
        self.k_next = 1
        self.horizon = -np.inf
        self.estimates: list = []
        self.reports: list = []
        self.uwb_status: dict = {}
        self.skipped_steps = 0
        self.steps_since_nudge = 0
        self.init_report = None
        self.init_attempts = 0
        self._seq = 0

    @property
    def initialized(self):
        return self.window is not None

    @property
    def gravity(self):
        return self.config.gravity

    def _boundary(self, k):
        return self.t0 + k * self.config.step.step_length

    # -- ingestion
    def push(self, record) -> Admission:
        if isinstance(record, UwbRecord) and record.seq < 0:
            record.seq = self._seq
        if isinstance(record, UwbRecord):
            self._seq = max(self._seq, record.seq) + 1
        if self.t0 is None and isinstance(record, ImuSample):
            self.t0 = float(record.stamp)
        res = admit(self.buffers, record, self.config.step, self.horizon)
        if isinstance(record, UwbRecord):
            self.uwb_status[record.seq] = "accepted" if res.accepted else f"rejected:{res.reason}"
        return res

    def ready_steps(self, flush=False):
        if self.t0 is None:
            return 0
        margin = 0.0 if flush else self.config.step.reorder_tolerance
        n = 0
        while self._boundary(self.k_next + n) <= self.buffers.imu_latest - margin + BOUNDARY_TOL:
            n += 1
        return n

    def spin(self, flush=False):
        """Process every step whose data is complete; returns the number processed."""
        n = self.ready_steps(flush)
        skip = n > self.config.step.skip_backlog_threshold
        for i in range(n):
            self._process_step(solve_now=not skip or i == n - 1)
        return n

    # -- core
    def _next_step(self):
        t0, t1 = self._boundary(self.k_next - 1), self._boundary(self.k_next)
        step = create_step(self.buffers, t0, t1, self.config, self.anchors, self.antennas)
        self.k_next += 1
        self.horizon = t1
        return step

    def _process_step(self, solve_now=True):
        step = self._next_step()
        if not self.initialized:
            self._collect_init(step)
        else:
            self._advance(step, solve_now)
        self.buffers.trim(step.t1)

    def _advance(self, step: Step, solve_now):
        cfg = self.config
        newest = self.window.newest
        pre = preintegrate(step.segment, ImuBias.of(newest), cfg.imu_noise)
        predicted = predict_from_preintegration(newest, pre, self.gravity)
        keep_uwb = []
        for obs in step.uwb:
            if outlier_gate(obs, (newest, predicted), cfg.step.outlier_gate_sigma):
                keep_uwb.append(obs)
                self.uwb_status[obs.seq] = "used"
            else:
                self.uwb_status[obs.seq] = "gated"
        keep_osl = [d for d in step.osl if osl_gate(d, (newest, predicted), cfg.step.osl_gate_sigma)]
        self.window = slide(
            self.window, step.t1, pre, keep_osl, keep_uwb, cfg.solver.window_size, self.gravity
        )
        solved = False
        if solve_now:
            self.window, rep = solve(self.window, cfg.solver, self.gravity)
            self.reports.append((step.t1, rep))
            solved = True
            self.steps_since_nudge += 1
            if cfg.nudge_every and self.steps_since_nudge >= cfg.nudge_every and self.window.uwb_count():
                self.window, _ = yaw_nudge_explore(
                    self.window, cfg.solver, self.gravity, (cfg.nudge_offset, -cfg.nudge_offset)
                )
                self.steps_since_nudge = 0
        else:
            self.skipped_steps += 1
        self.estimates.append(Estimate(step.t1, self.window.newest.copy(), solved))

    # -- initialization
    def _collect_init(self, step: Step):
        cfg = self.config
        pre = preintegrate(step.segment, ImuBias(), cfg.imu_noise)
        if self.init_window is None:
            self.init_window = SlidingWindow([step.t0], [NavState()], [], [], [])
        self.init_window = append(self.init_window, step.t1, pre, step.osl, step.uwb, state=NavState())
        while self.init_window.intervals > cfg.init_max_steps:
            self.init_window = drop_oldest(self.init_window)
        w = self.init_window
        imu_span = w.stamps[-1] - w.stamps[0]
        if imu_span + BOUNDARY_TOL < cfg.init_min_imu:
            return
        if not cfg.use_uwb:
            self._init_without_uwb()
            return
        if w.uwb_count() < cfg.init_min_ranges:
            return
        self._init_with_uwb()

    def _accel_mean(self, window):
        segs = [p.segment for p in window.imu if p.segment is not None]
        return np.mean(np.concatenate([s.accel[:-1] for s in segs]), axis=0)

    def _init_with_uwb(self):
        cfg = self.config
        w = self.init_window
        obs = [o for u in w.uwb for o in u]
        center = np.mean(list(self.anchors.values()), axis=0)
        p_ref, vel = range_seed(obs, w.stamps[0], w.stamps[-1], center)
        positions = [p_ref + vel * (t - w.stamps[0]) for t in w.stamps]
        velocities = [vel] * len(w.stamps)
        self.init_attempts += 1
        try:
            best, rep, costs = yaw_grid_initialize(
                w,
                cfg.init_yaw_grid,
                self._accel_mean(w),
                positions,
                velocities,
                cfg.solver,
                self.gravity,
                coarse_iterations=cfg.init_coarse_iterations,
            )
        except RuntimeError:
            self.init_window = drop_oldest(w)
            return
        per_residual = rep.final_cost / max(rep.residual_count, 1)
        self.init_report = dict(report=rep, costs=costs, per_residual=per_residual)
        if not per_residual < cfg.init_cost_threshold:
            self.init_window = drop_oldest(w)
            return
        if cfg.nudge_after_init:
            best, _ = yaw_nudge_explore(best, cfg.solver, self.gravity, (cfg.nudge_offset, -cfg.nudge_offset))
        self._finish_init(best)

    def _init_without_uwb(self):
        w = self.init_window
        roll, pitch = gravity_roll_pitch(self._accel_mean(w))
        zeros = [np.zeros(3)] * len(w.stamps)
        seeded = seed_states(w, 0.0, roll, pitch, zeros, zeros, self.gravity)
        states = [seeded.states[0]]
        for pre in w.imu:
            states.append(predict_from_preintegration(states[-1], pre, self.gravity))
        seeded = seeded.with_states(states)
        best, rep = solve(seeded, self.config.solver, self.gravity)
        self.init_report = dict(report=rep, costs=[], per_residual=rep.final_cost / max(rep.residual_count, 1))
        self._finish_init(best)

    def _finish_init(self, window: SlidingWindow):
        m = self.config.solver.window_size
        for t, s in zip(window.stamps, window.states):
            self.estimates.append(Estimate(t, s.copy(), True))
        while len(window.states) > m + 1:
            window = drop_oldest(window)
        self.window = window
        for u in window.uwb:
            for o in u:
                self.uwb_status[o.seq] = "used"
        self.init_window = None

    # -- output
    def high_rate_output(self):
        """Newest window state followed by IMU dead reckoning over buffered samples."""
        if not self.initialized:
            return []
        t_n = self.window.stamps[-1]
        state = self.window.newest
        out = [(t_n, state.copy())]
        ts = [t for t in self.buffers.imu_t if t > t_n + BOUNDARY_TOL]
        for t in ts:
            seg = self.buffers.imu_segment(t_n, t)
            pre = preintegrate(seg, ImuBias.of(state))
            out.append((t, predict_from_preintegration(state, pre, self.gravity)))
        return out


@dataclass
class RunResult:
    estimates: list
    reports: list
    uwb_status: dict
    estimator: Estimator


def dataset_records(dataset, include_uwb=True):
    """Stamp-ordered pipeline records from a simulated :class:`~viral_fusion.sim.Dataset`."""
    out = []
    imu = dataset.imu
    for i, t in enumerate(imu.stamps):
        out.append((float(t), 0, ImuSample(float(t), imu.gyro[i], imu.accel[i])))
    for name, o in dataset.osl.items():
        for i, t in enumerate(o.stamps):
            out.append((float(t), 1, OslRecord(name, float(t), o.q[i], o.p[i])))
    if include_uwb and dataset.uwb is not None:
        u = dataset.uwb
        for i, t in enumerate(u.stamp):
            out.append(
                (
                    float(t),
                    2,
                    UwbRecord(float(t), str(u.node_id[i]), str(u.antenna_id[i]), str(u.anchor_id[i]),
                              float(u.range[i]), bool(u.snr_ok[i]), bool(u.edge_ok[i]), i),
                )
            )
    out.sort(key=lambda x: (x[0], x[1]))
    return [r for _, _, r in out]


def run(records, config: PipelineConfig, anchors, antennas, progress=None) -> RunResult:
    """Replay a stamp-ordered record stream through a fresh estimator."""
    est = Estimator(config, anchors, antennas)
    for rec in records:
        est.push(rec)
        if isinstance(rec, ImuSample):
            est.spin()
            if progress is not None:
                progress(est)
    est.spin(flush=True)
    return RunResult(est.estimates, est.reports, est.uwb_status, est)


def run_dataset(dataset, config: PipelineConfig | None = None, include_uwb=True) -> RunResult:
    config = config or PipelineConfig()
    if not include_uwb:
        config.use_uwb = False
    return run(dataset_records(dataset, include_uwb), config, dataset.anchors, dataset.antennas)


__all__ = [
    "StepConfig",
    "PipelineConfig",
    "UwbRecord",
    "OslRecord",
    "Admission",
    "MeasurementBuffers",
    "admit",
    "create_step",
    "outlier_gate",
    "osl_gate",
    "range_seed",
    "Estimator",
    "Estimate",
    "run",
    "run_dataset",
    "dataset_records",
]
