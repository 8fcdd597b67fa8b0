"""Strapdown IMU mechanization, error-state dynamics and covariance propagation.

Measurement convention (all in the body frame, ENU navigation frame):

    accel reading  = a_body + b_a + R^T g + n_a      (g = (0, 0, -9.80665))
    gyro reading   = omega_body + b_w + n_w

so a static, level unit reads (0, 0, -9.80665) on the accelerometer. The
nominal state integrates

    p_dot = v,   v_dot = R (a_tilde - b_a) - g,   R_dot = R skew(w_tilde - b_w)

with 4th-order Runge-Kutta over each sample interval, linearly interpolating
IMU samples at the stage times, and quaternion renormalization afterwards.

The 15-state error vector is ordered [dp, dv, dtheta, db_a, db_w] with a
right-multiplicative attitude error (R_true = R_nom Exp(dtheta)); biases are
random walks. The error dynamics blocks are

    F[dp, dv] = I
    F[dv, dtheta] = -R skew(a_tilde - b_a),  F[dv, db_a] = -R
    F[dtheta, dtheta] = -skew(w_tilde - b_w), F[dtheta, db_w] = -I
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ImuGapError, NumericalError
from .geodesy import (GRAVITY_ENU, Attitude, quat_multiply, quat_normalize,
                      quat_to_matrix, skew)

INS_DIM = 15
SLC_P = slice(0, 3)
SLC_V = slice(3, 6)
SLC_TH = slice(6, 9)
SLC_BA = slice(9, 12)
SLC_BW = slice(12, 15)

MAX_STEP = 0.02    # seconds; longer intervals are subdivided
MAX_GAP = 0.1      # seconds; longer intervals raise ImuGapError

# sanity gates on raw IMU samples
MAX_GYRO = 20.0    # rad/s
MAX_ACCEL = 200.0  # m/s^2


@dataclass(frozen=True)
class ImuSample:
    """One IMU sample: gyro (rad/s) and accelerometer (m/s^2) readings."""

    time: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        gyro = np.asarray(self.gyro, dtype=float)
        accel = np.asarray(self.accel, dtype=float)
        if np.linalg.norm(gyro) >= MAX_GYRO:
            raise ValueError(f"gyro magnitude {np.linalg.norm(gyro):.2f} rad/s fails sanity gate")
        if np.linalg.norm(accel) >= MAX_ACCEL:
            raise ValueError(f"accel magnitude {np.linalg.norm(accel):.2f} m/s^2 fails sanity gate")
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "accel", accel)


@dataclass(frozen=True)
class InsState:
    """Mechanized nominal state: position/velocity (ENU), attitude, biases."""

    position: np.ndarray
    velocity: np.ndarray
    attitude: Attitude
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.linalg.norm(self.accel_bias) >= 1.0:
            raise ValueError("accelerometer bias fails sanity gate (>= 1 m/s^2)")
        if np.linalg.norm(self.gyro_bias) >= 0.1:
            raise ValueError("gyro bias fails sanity gate (>= 0.1 rad/s)")

    def correct(self, dx: np.ndarray) -> "InsState":
        """Fold an error-state correction into the nominal state."""
        return InsState(
            position=self.position + dx[SLC_P],
            velocity=self.velocity + dx[SLC_V],
            attitude=self.attitude.compose_body(dx[SLC_TH]),
            accel_bias=self.accel_bias + dx[SLC_BA],
            gyro_bias=self.gyro_bias + dx[SLC_BW],
        )


# Defaults follow a consumer MEMS unit (100 Hz class):
#   angular random walk 0.34 deg/sqrt(h) -> (0.34*pi/180/60)^2 rad^2/s
#   velocity random walk 0.18 m/s/sqrt(h) -> (0.18/60)^2 m^2/s^3
#   accel bias 1300 mGal = 1.3e-2 m/s^2, gyro bias 8 deg/h = 3.879e-5 rad/s,
#   both read as the random-walk sigma accumulated over one hour:
#   density = sigma^2 / 3600 s.
_ARW = (0.34 * math.pi / 180.0 / 60.0) ** 2
_VRW = (0.18 / 60.0) ** 2
_BA_RW = (1300e-5) ** 2 / 3600.0
_BW_RW = (8.0 * math.pi / 180.0 / 3600.0) ** 2 / 3600.0


@dataclass(frozen=True)
class ProcessNoiseConfig:
    """Continuous-time spectral densities of the IMU noise inputs."""

    accel_noise: float = _VRW       # (m/s^2)^2 / Hz
    gyro_noise: float = _ARW        # (rad/s)^2 / Hz
    accel_bias_walk: float = _BA_RW  # (m/s^2)^2 * Hz
    gyro_bias_walk: float = _BW_RW   # (rad/s)^2 * Hz

    def __post_init__(self):
        if min(self.accel_noise, self.gyro_noise, self.accel_bias_walk, self.gyro_bias_walk) <= 0:
            raise ValueError("all spectral densities must be strictly positive")

    def diagonal(self) -> np.ndarray:
        """12-vector ordered [n_a, n_w, n_ba, n_bw] (3 entries each)."""
        return np.repeat([self.accel_noise, self.gyro_noise,
                          self.accel_bias_walk, self.gyro_bias_walk], 3)


def _derivative(pos, vel, q, ba, bw, gyro, accel):
    a_nav = quat_to_matrix(q) @ (accel - ba) - GRAVITY_ENU
    w = gyro - bw
    q_dot = 0.5 * quat_multiply(q, np.array([0.0, w[0], w[1], w[2]]))
    return vel, a_nav, q_dot


def _rk4_substep(pos, vel, q, ba, bw, s0_gyro, s0_acc, s1_gyro, s1_acc, dt):
    mid_gyro = 0.5 * (s0_gyro + s1_gyro)
    mid_acc = 0.5 * (s0_acc + s1_acc)
    k1p, k1v, k1q = _derivative(pos, vel, q, ba, bw, s0_gyro, s0_acc)
    k2p, k2v, k2q = _derivative(pos + 0.5 * dt * k1p, vel + 0.5 * dt * k1v,
                                q + 0.5 * dt * k1q, ba, bw, mid_gyro, mid_acc)
    k3p, k3v, k3q = _derivative(pos + 0.5 * dt * k2p, vel + 0.5 * dt * k2v,
                                q + 0.5 * dt * k2q, ba, bw, mid_gyro, mid_acc)
    k4p, k4v, k4q = _derivative(pos + dt * k3p, vel + dt * k3v,
                                q + dt * k3q, ba, bw, s1_gyro, s1_acc)
    pos = pos + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    vel = vel + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    q = quat_normalize(q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q))
    return pos, vel, q


def mechanize_step(state: InsState, s0: ImuSample, s1: ImuSample) -> InsState:
    """Advance the nominal state from s0.time to s1.time (RK4).

    Intervals longer than MAX_STEP are subdivided with linearly interpolated
    samples; intervals longer than MAX_GAP raise ImuGapError so the caller
    can decide how to reset.
    """
    dt = s1.time - s0.time
    if dt <= 0.0:
        raise ValueError(f"non-monotone IMU timestamps: {s0.time} -> {s1.time}")
    if dt > MAX_GAP:
        raise ImuGapError(f"IMU gap of {dt:.3f} s exceeds {MAX_GAP} s")
    n_sub = max(1, int(math.ceil(dt / MAX_STEP - 1e-12)))
    pos, vel = state.position, state.velocity
    q = state.attitude.q
    ba, bw = state.accel_bias, state.gyro_bias
    for i in range(n_sub):
        f0 = i / n_sub
        f1 = (i + 1) / n_sub
        g0 = s0.gyro + f0 * (s1.gyro - s0.gyro)
        a0 = s0.accel + f0 * (s1.accel - s0.accel)
        g1 = s0.gyro + f1 * (s1.gyro - s0.gyro)
        a1 = s0.accel + f1 * (s1.accel - s0.accel)
        pos, vel, q = _rk4_substep(pos, vel, q, ba, bw, g0, a0, g1, a1, dt / n_sub)
    return InsState(pos, vel, Attitude(q), ba, bw)


def build_error_dynamics(state: InsState, sample: ImuSample) -> np.ndarray:
    """Continuous-time 15x15 error-state dynamics matrix."""
    f = np.zeros((INS_DIM, INS_DIM))
    r = state.attitude.matrix()
    f[SLC_P, SLC_V] = np.eye(3)
    f[SLC_V, SLC_TH] = -r @ skew(sample.accel - state.accel_bias)
    f[SLC_V, SLC_BA] = -r
    f[SLC_TH, SLC_TH] = -skew(sample.gyro - state.gyro_bias)
    f[SLC_TH, SLC_BW] = -np.eye(3)
    return f


def noise_input_matrix(state: InsState) -> np.ndarray:
    """15x12 map from noise inputs [n_a, n_w, n_ba, n_bw] to error rates."""
    g = np.zeros((INS_DIM, 12))
    g[SLC_V, 0:3] = -state.attitude.matrix()
    g[SLC_TH, 3:6] = -np.eye(3)
    g[SLC_BA, 6:9] = np.eye(3)
    g[SLC_BW, 9:12] = np.eye(3)
    return g


def discrete_transition(f: np.ndarray, g: np.ndarray, qc_diag: np.ndarray,
                        dt: float) -> tuple[np.ndarray, np.ndarray]:
    """4th-order series transition matrix and trapezoidal discrete noise.

    Phi = sum_{k<=4} (F dt)^k / k!;  Qd = (Phi G Qc G' Phi' + G Qc G') dt / 2.
    """
    fdt = f * dt
    fdt2 = fdt @ fdt
    phi = np.eye(f.shape[0]) + fdt + fdt2 / 2.0 + fdt2 @ fdt / 6.0 + fdt2 @ fdt2 / 24.0
    gqg = (g * qc_diag) @ g.T
    qd = 0.5 * dt * (phi @ gqg @ phi.T + gqg)
    return phi, qd


def assert_psd(p: np.ndarray, context: str = "covariance") -> None:
    """Hard error when min eigenvalue < -1e-9 * trace (Cholesky probe)."""
    tr = float(np.trace(p))
    shift = 1e-9 * max(tr, 1e-30)
    try:
        np.linalg.cholesky(p + shift * np.eye(p.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{context} is not positive semidefinite") from exc


def propagate_covariance(p: np.ndarray, phi_ins: np.ndarray, qd_ins: np.ndarray,
                         check: bool = True) -> np.ndarray:
    """Propagate a full covariance whose leading 15x15 block is the INS state.

    GNSS and camera-clone sub-states carry identity transition and zero
    process noise: only the INS block and its cross terms evolve. The result
    is explicitly symmetrized.
    """
    if not np.allclose(p, p.T, atol=1e-9):
        raise NumericalError("covariance lost symmetry")
    if check:
        assert_psd(p, "propagation input")
    out = p.copy()
    out[:INS_DIM, :INS_DIM] = phi_ins @ p[:INS_DIM, :INS_DIM] @ phi_ins.T + qd_ins
    if p.shape[0] > INS_DIM:
        cross = phi_ins @ p[:INS_DIM, INS_DIM:]
        out[:INS_DIM, INS_DIM:] = cross
        out[INS_DIM:, :INS_DIM] = cross.T
    return 0.5 * (out + out.T)
