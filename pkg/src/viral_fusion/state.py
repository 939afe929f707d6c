"""Navigation state of one sliding-window node and the measurement value types."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .manifold import identity_quat, quat_canonical, quat_normalize, quat_to_rot, retract_rotation

GRAVITY = 9.81

# tangent layout of a single node
THETA, POS, VEL, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
STATE_DIM = 15
BLOCK = {"q": THETA, "p": POS, "v": VEL, "bg": BG, "ba": BA}


def _vec(x):
    return np.array(x, dtype=float).reshape(3)


@dataclass
class NavState:
    """Attitude (body to world), position, velocity and IMU biases."""

    q: np.ndarray = field(default_factory=identity_quat)
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.array(self.q, dtype=float).reshape(4))
        self.p, self.v, self.bg, self.ba = map(_vec, (self.p, self.v, self.bg, self.ba))

    @property
    def rot(self):
        return quat_to_rot(self.q)

    def retract(self, delta, exact=True) -> "NavState":
        delta = np.asarray(delta, dtype=float)
        return NavState(
            retract_rotation(self.q, delta[THETA], exact=exact),
            self.p + delta[POS],
            self.v + delta[VEL],
            self.bg + delta[BG],
            self.ba + delta[BA],
        )

    def copy(self) -> "NavState":
        return replace(self)

    def as_vector(self):
        """``[q (canonical), p, v, bg, ba]`` as a flat 16-vector."""
        return np.concatenate([quat_canonical(self.q), self.p, self.v, self.bg, self.ba])


@dataclass(frozen=True)
class ImuBias:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def of(cls, state: NavState) -> "ImuBias":
        return cls(state.bg.copy(), state.ba.copy())


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities of the IMU model and the gravity vector."""

    sigma_gyro: float = 1.7e-4
    sigma_accel: float = 2.0e-3
    sigma_gyro_walk: float = 1.9e-5
    sigma_accel_walk: float = 3.0e-3
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, GRAVITY]))

    def __post_init__(self):
        sig = (self.sigma_gyro, self.sigma_accel, self.sigma_gyro_walk, self.sigma_accel_walk)
        if min(sig) <= 0:
            raise ValueError("IMU noise sigmas must be positive")

    def diag(self):
        """Diagonal of the 12x12 continuous noise covariance (gyro, accel, gyro walk, accel walk)."""
        return np.repeat(
            np.array([self.sigma_gyro, self.sigma_accel, self.sigma_gyro_walk, self.sigma_accel_walk])
            ** 2,
            3,
        )


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuSegment:
    """IMU samples covering ``[stamps[0], stamps[-1]]``.

    Sample ``n`` is held constant over ``[stamps[n], stamps[n+1])``; the last
    sample only closes the interval.
    """

    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.stamps) == len(self.gyro) == len(self.accel)):
            raise ValueError("IMU segment arrays have mismatched lengths")

    def __len__(self):
        return len(self.stamps)

    @property
    def duration(self):
        return float(self.stamps[-1] - self.stamps[0]) if len(self.stamps) else 0.0

    def sample(self, n) -> ImuSample:
        return ImuSample(float(self.stamps[n]), self.gyro[n], self.accel[n])


@dataclass(frozen=True)
class OslDisplacement:
    """Relative rotation and body-frame translation between two consecutive nodes."""

    dq: np.ndarray
    dp: np.ndarray
    dt: float
    sigma: np.ndarray
    stream: str = "0"

    def covariance(self):
        return self.dt * np.diag(np.asarray(self.sigma, dtype=float) ** 2)


@dataclass(frozen=True)
class UwbObservation:
    """A range from a body-mounted antenna to a fixed anchor inside one interval."""

    d: float
    anchor: np.ndarray
    antenna: np.ndarray
    dt: float
    step: float
    sigma: float
    stamp: float = 0.0
    anchor_id: str = ""
    antenna_id: str = ""
    seq: int = -1
