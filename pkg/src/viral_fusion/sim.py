"""Ground-truth trajectories and synthetic IMU, odometry and UWB streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import quat_mul, quat_normalize, quat_to_rot, vec_to_quat
from .state import GRAVITY, ImuNoiseParams

# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectorySpec:
    """Analytic flight profile.

    ``kind`` is one of ``lissajous``, ``waypoint-lattice``, ``vertical-plane-scan``,
    ``static`` or ``polynomial`` (constant acceleration and yaw rate, used for
    exactness checks). ``yaw_mode`` is ``fixed`` or ``follow-velocity``.
    """

    kind: str = "lissajous"
    duration: float = 60.0
    center: tuple = (0.0, 0.0, 1.5)
    amplitude: tuple = (2.0, 1.5, 0.4)
    frequency: tuple = (0.25, 0.5, 0.35)
    phase: tuple = (0.0, 0.0, 0.0)
    yaw_mode: str = "follow-velocity"
    yaw0: float = 0.0
    yaw_rate: float = 0.0
    tilt_amplitude: float = 0.0
    tilt_frequency: float = 0.7
    velocity0: tuple = (0.0, 0.0, 0.0)
    acceleration: tuple = (0.0, 0.0, 0.0)
    waypoints: tuple = ()
    segment_time: float = 4.0

    def __post_init__(self):
        if self.kind not in ("lissajous", "waypoint-lattice", "vertical-plane-scan", "static", "polynomial"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.yaw_mode not in ("fixed", "follow-velocity"):
            raise ValueError(f"unknown yaw mode {self.yaw_mode!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.kind in ("waypoint-lattice", "vertical-plane-scan") and len(self.waypoints) < 2:
            raise ValueError(f"{self.kind} needs at least two waypoints")


def lattice_waypoints(nx=3, ny=3, nz=2, spacing=(2.0, 2.0, 1.0), origin=(-2.0, -2.0, 1.0)):
    """Boustrophedon walk through every point of a 3D lattice."""
    pts = []
    for iz in range(nz):
        rows = range(ny) if iz % 2 == 0 else reversed(range(ny))
        for j, iy in enumerate(rows):
            cols = range(nx) if (j + iz) % 2 == 0 else reversed(range(nx))
            for ix in cols:
                pts.append((origin[0] + ix * spacing[0], origin[1] + iy * spacing[1], origin[2] + iz * spacing[2]))
    return tuple(pts)


def plane_scan_setpoints(width=4.0, height=2.0, rows=3, y=0.0, z0=0.8):
    """Raster of setpoints in the xz plane at fixed ``y``."""
    pts = []
    for i in range(rows):
        z = z0 + height * i / max(rows - 1, 1)
        xs = (-width / 2, width / 2) if i % 2 == 0 else (width / 2, -width / 2)
        pts.extend([(xs[0], y, z), (xs[1], y, z)])
    return tuple(pts)


@dataclass
class GroundTruth:
    """Stacked ground truth; every field has the time axis first."""

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    accel: np.ndarray
    a_world: np.ndarray


def _min_jerk(tau):
    s = tau**3 * (10 - 15 * tau + 6 * tau**2)
    ds = 30 * tau**2 * (1 - tau) ** 2
    dds = 60 * tau - 180 * tau**2 + 120 * tau**3
    return s, ds, dds


def _segments(spec):
    pts = np.asarray(spec.waypoints, dtype=float)
    # closed loop so any duration is covered
    starts = pts
    ends = np.roll(pts, -1, axis=0)
    raw = []
    for a, b in zip(starts, ends):
        d = b - a
        raw.append(np.arctan2(d[1], d[0]) if np.hypot(d[0], d[1]) > 1e-6 else None)
    known = [h for h in raw if h is not None]
    if spec.yaw_mode == "fixed" or not known:
        n = len(pts)
        return starts, ends, np.full(n, spec.yaw0), np.full(n, spec.yaw0), 0.0
    # start facing along the closing segment so every lap turns by a multiple of 2 pi
    prev = next(h for h in reversed(raw) if h is not None)
    start = prev
    heading = np.empty(len(pts))
    unwrapped = np.empty(len(pts))
    for i, h in enumerate(raw):
        h = prev if h is None else h
        heading[i] = prev
        unwrapped[i] = prev + (h - prev + np.pi) % (2 * np.pi) - np.pi
        prev = unwrapped[i]
    return starts, ends, heading, unwrapped, unwrapped[-1] - start


def _position(spec, t):
    n = len(t)
    if spec.kind == "static":
        p = np.tile(np.asarray(spec.center, dtype=float), (n, 1))
        return p, np.zeros((n, 3)), np.zeros((n, 3)), None
    if spec.kind == "polynomial":
        p0 = np.asarray(spec.center, dtype=float)
        v0 = np.asarray(spec.velocity0, dtype=float)
        a = np.asarray(spec.acceleration, dtype=float)
        tt = t[:, None]
        return p0 + v0 * tt + 0.5 * a * tt**2, v0 + a * tt, np.tile(a, (n, 1)), None
    if spec.kind == "lissajous":
        c = np.asarray(spec.center, dtype=float)
        amp = np.asarray(spec.amplitude, dtype=float)
        w = np.asarray(spec.frequency, dtype=float)
        ph = np.asarray(spec.phase, dtype=float)
        arg = t[:, None] * w + ph
        return c + amp * np.sin(arg), amp * w * np.cos(arg), -amp * w**2 * np.sin(arg), None
    starts, ends, heading, unwrapped, lap_turn = _segments(spec)
    T = spec.segment_time
    seg = np.floor(t / T).astype(int)
    idx = seg % len(starts)
    lap = seg // len(starts)
    tau = (t - np.floor(t / T) * T) / T
    s, ds, dds = _min_jerk(tau)
    d = ends[idx] - starts[idx]
    p = starts[idx] + s[:, None] * d
    v = ds[:, None] * d / T
    a = dds[:, None] * d / T**2
    yaw_info = (heading[idx] + lap * lap_turn, unwrapped[idx] - heading[idx], s, ds / T)
    return p, v, a, yaw_info


def ground_truth(spec: TrajectorySpec, t) -> GroundTruth:
    """Pose, velocity, body rate and specific force at times ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < -1e-12) or np.any(t > spec.duration + 1e-9):
        raise ValueError(f"time outside [0, {spec.duration}]")
    p, v, a, yaw_info = _position(spec, t)
    if spec.kind == "vertical-plane-scan":
        yaw = np.full(len(t), spec.yaw0 if spec.yaw_mode == "fixed" else -np.pi / 2)
        dyaw = np.zeros(len(t))
    elif spec.yaw_mode == "fixed" or spec.kind == "static":
        yaw = spec.yaw0 + spec.yaw_rate * t
        dyaw = np.full(len(t), spec.yaw_rate)
    elif yaw_info is not None:
        base, delta, s, ds = yaw_info
        yaw = base + delta * s
        dyaw = delta * ds
    else:
        vx, vy, ax, ay = v[:, 0], v[:, 1], a[:, 0], a[:, 1]
        sp2 = vx**2 + vy**2
        if np.any(sp2 < 1e-12):
            raise ValueError("follow-velocity yaw needs nonzero horizontal speed")
        yaw = np.arctan2(vy, vx)
        dyaw = (vx * ay - vy * ax) / sp2

    f = spec.tilt_frequency
    roll = spec.tilt_amplitude * np.sin(f * t)
    droll = spec.tilt_amplitude * f * np.cos(f * t)
    pitch = spec.tilt_amplitude * np.sin(0.77 * f * t)
    dpitch = spec.tilt_amplitude * 0.77 * f * np.cos(0.77 * f * t)

    zeros = np.zeros(len(t))
    q = quat_mul(
        vec_to_quat(np.stack([zeros, zeros, yaw], -1)),
        quat_mul(vec_to_quat(np.stack([zeros, pitch, zeros], -1)), vec_to_quat(np.stack([roll, zeros, zeros], -1))),
    )
    q = quat_normalize(q)
    # Z-Y-X Euler rates to body rates
    omega = np.stack(
        [
            droll - np.sin(pitch) * dyaw,
            np.cos(roll) * dpitch + np.sin(roll) * np.cos(pitch) * dyaw,
            -np.sin(roll) * dpitch + np.cos(roll) * np.cos(pitch) * dyaw,
        ],
        axis=-1,
    )
    r = quat_to_rot(q)
    g = np.array([0.0, 0.0, GRAVITY])
    accel = np.einsum("nji,nj->ni", r, a + g)
    return GroundTruth(t, q, p, v, omega, accel, a)


# --------------------------------------------------------------------------
# sensor rig


EUROC_ANCHORS = {
    "100": (3.0, 3.0, 3.0),
    "101": (3.0, -3.0, 0.5),
    "102": (-3.0, -3.0, 3.0),
    "103": (-3.0, 3.0, 0.5),
}
EUROC_ANTENNAS = {
    "200.A": (0.25, -0.25, 0.0),
    "200.B": (0.25, 0.25, 0.0),
    "201.A": (-0.25, 0.25, 0.0),
    "201.B": (-0.25, -0.25, 0.0),
}


def node_cycle(node, anchors, shift=0):
    """Ranging cycle of one node: antennas A and B take turns on each anchor."""
    ids = list(anchors)
    ids = ids[shift:] + ids[:shift]
    return [(f"{node}.{ant}", a) for a in ids for ant in ("A", "B")]


def default_schedule(anchors=EUROC_ANCHORS):
    """Per-node cycles; node 201 is shifted by two anchors."""
    return {"200": node_cycle("200", anchors, 0), "201": node_cycle("201", anchors, 2)}


@dataclass
class OslStreamParams:
    name: str = "vio"
    rate: float = 10.0
    sigma_rot: float = 0.01
    sigma_trans: float = 0.05
    dropouts: tuple = ()

    def sigma(self):
        return np.array([self.sigma_rot] * 3 + [self.sigma_trans] * 3)


@dataclass
class OutlierSpec:
    probability: float = 0.0
    bias: float = 1.5
    anchors: tuple = ()
    t_start: float = 0.0
    t_end: float = float("inf")


@dataclass
class SensorRig:
    antennas: dict = field(default_factory=lambda: dict(EUROC_ANTENNAS))
    anchors: dict = field(default_factory=lambda: dict(EUROC_ANCHORS))
    schedule: dict = field(default_factory=default_schedule)
    slot_period: float = 0.025
    slot_offset: float = 0.0
    uwb_sigma: float = 0.05
    imu_rate: float = 400.0
    osl: list = field(default_factory=lambda: [OslStreamParams()])

    def __post_init__(self):
        if not self.schedule or any(len(c) == 0 for c in self.schedule.values()):
            raise ValueError("ranging schedule must be nonempty")
        if self.imu_rate <= 0 or self.slot_period <= 0:
            raise ValueError("rates must be positive")


# --------------------------------------------------------------------------
# synthesis


@dataclass
class ImuData:
    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray


@dataclass
class UwbData:
    stamp: np.ndarray
    node_id: np.ndarray
    antenna_id: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    snr_ok: np.ndarray
    edge_ok: np.ndarray
    is_outlier: np.ndarray

    def __len__(self):
        return len(self.stamp)

    def select(self, mask) -> "UwbData":
        return UwbData(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


@dataclass
class OslData:
    name: str
    stamps: np.ndarray
    q: np.ndarray
    p: np.ndarray
    sigma: np.ndarray
    rate: float


def quantize_stamps(t):
    """Round stamps to the nearest nanosecond, the resolution of the CSV files."""
    return np.array([float(f"{x:.9f}") for x in np.asarray(t, dtype=float)])


def _grid(duration, rate, offset=0.0):
    n = int(np.floor((duration - offset) * rate + 1e-9)) + 1
    return quantize_stamps(offset + np.arange(n) / rate)


def synth_imu(spec: TrajectorySpec, rig: SensorRig, noise: ImuNoiseParams | None, seed, bias0=(np.zeros(3), np.zeros(3))):
    """IMU samples at ``rig.imu_rate``; ``noise=None`` gives exact ground truth."""
    t = _grid(spec.duration, rig.imu_rate)
    gt = ground_truth(spec, t)
    n = len(t)
    bg = np.tile(np.asarray(bias0[0], dtype=float), (n, 1))
    ba = np.tile(np.asarray(bias0[1], dtype=float), (n, 1))
    if noise is None:
        return ImuData(t, gt.omega.copy(), gt.accel.copy(), bg, ba)
    rng = np.random.default_rng(seed)
    dt = 1.0 / rig.imu_rate
    walk_g = rng.normal(size=(n, 3)) * noise.sigma_gyro_walk * np.sqrt(dt)
    walk_a = rng.normal(size=(n, 3)) * noise.sigma_accel_walk * np.sqrt(dt)
    walk_g[0] = 0.0
    walk_a[0] = 0.0
    bg = bg + np.cumsum(walk_g, axis=0)
    ba = ba + np.cumsum(walk_a, axis=0)
    gyro = gt.omega + bg + rng.normal(size=(n, 3)) * noise.sigma_gyro * np.sqrt(rig.imu_rate)
    accel = gt.accel + ba + rng.normal(size=(n, 3)) * noise.sigma_accel * np.sqrt(rig.imu_rate)
    return ImuData(t, gyro, accel, bg, ba)


def schedule_entries(rig: SensorRig, duration):
    """``(stamp, node, antenna key, anchor id)`` for every slot up to ``duration``."""
    slots = _grid(duration, 1.0 / rig.slot_period, rig.slot_offset)
    out = []
    for j, ts in enumerate(slots):
        for node, cycle in rig.schedule.items():
            key, anchor = cycle[j % len(cycle)]
            out.append((float(ts), node, key, anchor))
    return out


def synth_uwb(
    spec: TrajectorySpec,
    rig: SensorRig,
    seed,
    noise_free=False,
    outliers: OutlierSpec | None = None,
    dropouts=(),
    outlier_seed=None,
    flag_failure=0.0,
):
    """TDMA range records ``|p + R y - x| + noise`` with optional outliers.

    ``dropouts`` is a sequence of ``(anchor_id, t0, t1)`` windows during which
    that anchor produces no records. Outliers draw from their own generator so
    enabling them leaves the clean noise sequence unchanged.
    """
    entries = schedule_entries(rig, spec.duration)
    t = np.array([e[0] for e in entries])
    gt = ground_truth(spec, t)
    r = quat_to_rot(gt.q)
    y = np.array([rig.antennas[e[2]] for e in entries], dtype=float)
    x = np.array([rig.anchors[e[3]] for e in entries], dtype=float)
    d = np.linalg.norm(gt.p + np.einsum("nij,nj->ni", r, y) - x, axis=-1)
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=len(t)) * rig.uwb_sigma
    flags = rng.random(size=(len(t), 2)) >= flag_failure
    if not noise_free:
        d = d + noise
    is_out = np.zeros(len(t), dtype=bool)
    if outliers is not None and outliers.probability > 0:
        orng = np.random.default_rng(outlier_seed if outlier_seed is not None else seed)
        draw = orng.random(len(t)) < outliers.probability
        anchor_ok = np.array([not outliers.anchors or e[3] in outliers.anchors for e in entries])
        in_time = (t >= outliers.t_start) & (t <= outliers.t_end)
        is_out = draw & anchor_ok & in_time
        d = np.where(is_out, d + outliers.bias, d)
    keep = np.ones(len(t), dtype=bool)
    for anchor, t0, t1 in dropouts:
        keep &= ~((np.array([e[3] for e in entries]) == anchor) & (t >= t0) & (t <= t1))
    data = UwbData(
        t,
        np.array([e[1] for e in entries]),
        np.array([e[2].split(".")[1] for e in entries]),
        np.array([e[3] for e in entries]),
        d,
        flags[:, 0],
        flags[:, 1],
        is_out,
    )
    return data.select(keep)


def synth_osl(spec: TrajectorySpec, params: OslStreamParams, seed, noise_free=False):
    """Chained odometry in the frame of the initial pose.

    Each step's true relative motion is corrupted by ``E(phi)`` and ``d`` with
    variance ``dt * sigma^2`` and accumulated, so errors drift.
    """
    t = _grid(spec.duration, params.rate)
    gt = ground_truth(spec, t)
    rng = np.random.default_rng(seed)
    n = len(t)
    q = np.empty((n, 4))
    p = np.empty((n, 3))
    q[0] = np.array([1.0, 0.0, 0.0, 0.0])
    p[0] = 0.0
    r_true = quat_to_rot(gt.q)
    for k in range(n - 1):
        dt = t[k + 1] - t[k]
        dq = quat_mul(gt.q[k] * np.array([1, -1, -1, -1]), gt.q[k + 1])
        dp = r_true[k].T @ (gt.p[k + 1] - gt.p[k])
        if noise_free:
            phi = np.zeros(3)
            dd = np.zeros(3)
        else:
            phi = rng.normal(size=3) * params.sigma_rot * np.sqrt(dt)
            dd = rng.normal(size=3) * params.sigma_trans * np.sqrt(dt)
        p[k + 1] = p[k] + quat_to_rot(q[k]) @ (dp + dd)
        q[k + 1] = quat_normalize(quat_mul(q[k], quat_mul(dq, vec_to_quat(phi))))
    keep = np.ones(n, dtype=bool)
    for t0, t1 in params.dropouts:
        keep &= ~((t > t0) & (t < t1))
    return OslData(params.name, t[keep], q[keep], p[keep], params.sigma(), params.rate)


@dataclass
class Scenario:
    """Everything needed to synthesize one dataset."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    rig: SensorRig = field(default_factory=SensorRig)
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    gyro_bias0: tuple = (0.002, -0.001, 0.0015)
    accel_bias0: tuple = (0.03, -0.02, 0.04)
    noise_free: bool = False
    outliers: OutlierSpec | None = None
    uwb_dropouts: tuple = ()
    flag_failure: float = 0.0
    gt_rate: float = 100.0


@dataclass
class Dataset:
    imu: ImuData
    uwb: UwbData
    osl: dict
    anchors: dict
    antennas: dict
    groundtruth: GroundTruth
    scenario: Scenario | None = None


def simulate(scenario: Scenario, seed=0) -> Dataset:
    """Synthesize all streams from independent child generators of ``seed``."""
    ss = np.random.SeedSequence(seed)
    s_imu, s_uwb, s_out, *s_osl = ss.spawn(3 + len(scenario.rig.osl))
    spec, rig = scenario.trajectory, scenario.rig
    imu = synth_imu(
        spec,
        rig,
        None if scenario.noise_free else scenario.imu_noise,
        s_imu,
        bias0=(np.asarray(scenario.gyro_bias0, dtype=float), np.asarray(scenario.accel_bias0, dtype=float)),
    )
    uwb = synth_uwb(
        spec,
        rig,
        s_uwb,
        noise_free=scenario.noise_free,
        outliers=scenario.outliers,
        dropouts=scenario.uwb_dropouts,
        outlier_seed=s_out,
        flag_failure=scenario.flag_failure,
    )
    osl = {
        p.name: synth_osl(spec, p, s, noise_free=scenario.noise_free) for p, s in zip(rig.osl, s_osl)
    }
    gt = ground_truth(spec, _grid(spec.duration, scenario.gt_rate))
    return Dataset(imu, uwb, osl, dict(rig.anchors), dict(rig.antennas), gt, scenario)


@dataclass(frozen=True)
class SimRecord:
    kind: str  # imu | osl | uwb | gt
    stamp: float
    payload: tuple


def records(dataset: Dataset):
    """All measurements as one stamp-ordered stream (stable across kinds)."""
    out = []
    imu = dataset.imu
    out += [SimRecord("imu", float(t), (imu.gyro[i], imu.accel[i])) for i, t in enumerate(imu.stamps)]
    for name, o in dataset.osl.items():
        out += [SimRecord("osl", float(t), (name, o.q[i], o.p[i])) for i, t in enumerate(o.stamps)]
    u = dataset.uwb
    out += [
        SimRecord(
            "uwb",
            float(t),
            (i, str(u.node_id[i]), str(u.antenna_id[i]), str(u.anchor_id[i]), float(u.range[i]), bool(u.snr_ok[i]), bool(u.edge_ok[i])),
        )
        for i, t in enumerate(u.stamp)
    ]
    order = {"imu": 0, "osl": 1, "uwb": 2}
    out.sort(key=lambda r: (r.stamp, order[r.kind]))
    return out
