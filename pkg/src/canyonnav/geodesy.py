"""Coordinate frames, rotations and gravity shared by the estimation modules.

Conventions used throughout the package:

* Navigation frame is a local East-North-Up (ENU) tangent frame anchored at a
  configured geodetic position (normally the first ground-truth fix).
* Attitude quaternions are scalar-first, Hamilton convention, and are
  renormalized after every integration step.
* Attitude error is right-multiplicative (body side): R_true = R_nom @ Exp(dtheta).

All positions are float64 ndarrays of shape (3,); ECEF positions are metres in
the Earth-centred Earth-fixed frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS-84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

# Gravity in the ENU navigation frame (m/s^2), fixed by convention.
GRAVITY_ENU = np.array([0.0, 0.0, -9.80665])

# Sanity range for valid receiver/satellite ECEF radii (metres).
ECEF_RADIUS_MIN = 6.2e6
ECEF_RADIUS_MAX = 4.5e7


@dataclass(frozen=True)
class GeodeticPosition:
    """Latitude/longitude (rad) and ellipsoidal height (m) on WGS-84."""

    latitude: float
    longitude: float
    height: float = 0.0

    def __post_init__(self):
        if not (-math.pi / 2 <= self.latitude <= math.pi / 2):
            raise ValueError(f"latitude {self.latitude} outside [-pi/2, pi/2]")
        if not (-math.pi < self.longitude <= math.pi):
            raise ValueError(f"longitude {self.longitude} outside (-pi, pi]")


def validate_ecef(p: np.ndarray) -> np.ndarray:
    """Check an ECEF position is finite and at a plausible radius."""
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("ECEF position must be a finite 3-vector")
    r = np.linalg.norm(p)
    if not (ECEF_RADIUS_MIN <= r <= ECEF_RADIUS_MAX):
        raise ValueError(f"ECEF radius {r:.3e} m outside [{ECEF_RADIUS_MIN:.1e}, {ECEF_RADIUS_MAX:.1e}]")
    return p


def geodetic_to_ecef(p: GeodeticPosition) -> np.ndarray:
    """Closed-form WGS-84 geodetic to ECEF conversion."""
    sin_lat = math.sin(p.latitude)
    cos_lat = math.cos(p.latitude)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + p.height) * cos_lat * math.cos(p.longitude)
    y = (n + p.height) * cos_lat * math.sin(p.longitude)
    z = (n * (1.0 - WGS84_E2) + p.height) * sin_lat
    return np.array([x, y, z])


def ecef_to_geodetic(ecef: np.ndarray, tol: float = 1e-12, max_iter: int = 20) -> GeodeticPosition:
    """Bowring-style iterative ECEF to geodetic conversion, converged to `tol` rad."""
    x, y, z = np.asarray(ecef, dtype=float)
    rho = math.hypot(x, y)
    ep2 = WGS84_E2 / (1.0 - WGS84_E2)
    u = math.atan2(z * WGS84_A, rho * WGS84_B)  # parametric latitude seed
    lat = 0.0
    for _ in range(max_iter):
        su, cu = math.sin(u), math.cos(u)
        lat_new = math.atan2(z + ep2 * WGS84_B * su ** 3, rho - WGS84_E2 * WGS84_A * cu ** 3)
        u = math.atan2(WGS84_B * math.sin(lat_new), WGS84_A * math.cos(lat_new))
        done = abs(lat_new - lat) < tol
        lat = lat_new
        if done:
            break
    sin_lat = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    if abs(lat) < 1.3:  # use the better-conditioned expression per regime
        h = rho / math.cos(lat) - n
    else:
        h = z / sin_lat - n * (1.0 - WGS84_E2)
    lon = math.atan2(y, x)
    if lon <= -math.pi:
        lon += 2 * math.pi
    return GeodeticPosition(max(-math.pi / 2, min(math.pi / 2, lat)), lon, h)


def enu_matrix(anchor: GeodeticPosition) -> np.ndarray:
    """Rotation matrix with rows (East, North, Up) expressed in ECEF axes."""
    sl, cl = math.sin(anchor.latitude), math.cos(anchor.latitude)
    so, co = math.sin(anchor.longitude), math.cos(anchor.longitude)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def ecef_to_enu(p: np.ndarray, anchor: GeodeticPosition) -> np.ndarray:
    """Express `p` (ECEF) in the local ENU tangent frame at `anchor`."""
    return enu_matrix(anchor) @ (np.asarray(p, dtype=float) - geodetic_to_ecef(anchor))


def enu_to_ecef(enu: np.ndarray, anchor: GeodeticPosition) -> np.ndarray:
    """Inverse of :func:`ecef_to_enu`."""
    return geodetic_to_ecef(anchor) + enu_matrix(anchor).T @ np.asarray(enu, dtype=float)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


# --- quaternion helpers (scalar-first, Hamilton) -------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    out = q / n
    return out if out[0] >= 0.0 else -out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (rad) to quaternion."""
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        half = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0 - angle * angle / 8.0, half * phi[0], half * phi[1], half * phi[2]]))
    s = math.sin(angle / 2.0) / angle
    return np.array([math.cos(angle / 2.0), s * phi[0], s * phi[1], s * phi[2]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to scalar-first quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def rotvec_from_matrix(m: np.ndarray) -> np.ndarray:
    """Logarithmic map: rotation matrix to rotation vector (rad)."""
    q = matrix_to_quat(m)
    w = min(1.0, max(-1.0, q[0]))
    vec = q[1:]
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return 2.0 * vec
    angle = 2.0 * math.atan2(n, w)
    return vec * (angle / n)


class Attitude:
    """Immutable unit quaternion (scalar-first) with rotation-matrix access.

    Represents R^n_b, the rotation taking body-frame vectors to the
    navigation frame. Safe to share across threads.
    """

    __slots__ = ("q",)

    def __init__(self, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError("quaternion must have 4 components, scalar first")
        object.__setattr__(self, "q", quat_normalize(q))

    def __setattr__(self, *_):
        raise AttributeError("Attitude is immutable")

    def __reduce__(self):
        # lets copy/pickle rebuild through the constructor despite the guard
        return (Attitude, (self.q,))

    @classmethod
    def identity(cls) -> "Attitude":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Attitude":
        return cls(matrix_to_quat(m))

    @classmethod
    def from_rotvec(cls, phi: np.ndarray) -> "Attitude":
        return cls(quat_from_rotvec(np.asarray(phi, dtype=float)))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def compose_body(self, phi: np.ndarray) -> "Attitude":
        """Right-multiplicative update: R <- R @ Exp(phi)."""
        return Attitude(quat_multiply(self.q, quat_from_rotvec(np.asarray(phi, dtype=float))))

    def __repr__(self):
        return f"Attitude(q={self.q.tolist()})"
