"""Synthetic urban-canyon scenario generation and trajectory evaluation.

A scenario bundles, all derived deterministically from one integer seed:

* a smooth figure-eight (or rounded city-block) ground-truth trajectory,
* IMU samples consistent with it (plus configured biases and noise),
* GNSS epochs for the rover and an open-sky base station, with satellite
  states inlined, per-observation atmospheric delays, and NLOS injection
  driven by a piecewise skyline profile,
* stereo feature tracks on synthetic building facades,
* sky masks rendered from the same skyline through the fisheye model, so
  mask-based classification can recover the generator's visibility labels.

A satellite's truth label is decided with the same pixel quantization the
classifier sees (project, round to the nearest pixel, evaluate the skyline
at that pixel centre): a pure real-valued skyline comparison would disagree
with any rasterized mask for satellites within half a pixel of the skyline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dataio, skyview
from .errors import DataError, GenerationError
from .geodesy import GRAVITY_ENU, Attitude, GeodeticPosition, enu_matrix, enu_to_ecef, geodetic_to_ecef
from .gnss import (SPEED_OF_LIGHT, ElevationAzimuth, ObsKind, SkyLabel,
                   StochasticConfig, observation_variance)
from .ins import ProcessNoiseConfig
from .skyview import FisheyeModel

GPS_L1_WAVELENGTH = 0.19029367279836487
ORBIT_RADIUS = 2.65597e7       # metres
ORBIT_RATE = 2.0 * math.pi / 43082.0
DEFAULT_ANCHOR = GeodeticPosition(0.5340, 1.9897, 50.0)


@dataclass(frozen=True)
class TrajectorySpec:
    duration: float = 300.0
    imu_rate: float = 100.0
    gnss_rate: float = 1.0
    cam_rate: float = 10.0
    mask_rate: float = 1.0
    path: str = "figure8"      # figure8 | grid
    east_extent: float = 140.0
    north_extent: float = 70.0
    period: float = 100.0      # seconds per figure-eight lap

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if min(self.imu_rate, self.gnss_rate, self.cam_rate, self.mask_rate) <= 0:
            raise ValueError("rates must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Scene content: skyline depth, NLOS injection and noise levels."""

    segment_duration: float = 40.0
    azimuth_bins: int = 8
    cutoff_low: float = 0.30       # rad; shallow skyline draw range
    cutoff_high: float = 1.05      # rad; deep canyon walls
    open_bins: int = 2             # bins per segment forced near-open
    nlos_code_bias: float = 15.0   # metres, peak excess path on NLOS pseudoranges
    nlos_carrier_bias: float = 0.05  # metres, ~lambda/4 multipath envelope
    nlos_code_period: float = 45.0   # seconds; reflected-path geometry wander
    nlos_carrier_period: float = 17.0
    nlos_noise_factor: float = 3.0   # truth variance inflation on NLOS obs
    noise: bool = True
    snr_base: float = 40.0
    snr_span: float = 12.0
    nlos_snr_drop: float = 6.0   # strong reflections lose only a few dB
    receiver_clock_sigma: float = 30.0   # metres, epoch-white
    atmosphere: bool = True
    pixel_sigma_px: float = 0.5
    focal_px: float = 500.0
    max_tracked: int = 14
    feature_count: int = 500
    min_elevation: float = 0.09    # rad, ~5 deg generation mask
    mask_size: int = 512
    stochastic: StochasticConfig = StochasticConfig()
    process_noise: ProcessNoiseConfig = ProcessNoiseConfig()
    imu_bias_sigma_accel: float = 0.02   # m/s^2
    imu_bias_sigma_gyro: float = 0.002   # rad/s

    def __post_init__(self):
        if not (0.0 <= self.cutoff_low <= self.cutoff_high <= math.pi / 2):
            raise ValueError("cutoffs must satisfy 0 <= low <= high <= pi/2")
        if self.nlos_code_bias < 0 or self.nlos_carrier_bias < 0:
            raise ValueError("NLOS biases must be non-negative")


def zero_noise_scene(**overrides) -> SceneSpec:
    """Perfect-sensor variant used by consistency checks."""
    base = dict(noise=False, nlos_code_bias=0.0, nlos_carrier_bias=0.0,
                receiver_clock_sigma=0.0, atmosphere=False, pixel_sigma_px=0.0,
                cutoff_low=0.0, cutoff_high=0.0, open_bins=0,
                imu_bias_sigma_accel=0.0, imu_bias_sigma_gyro=0.0)
    base.update(overrides)
    return SceneSpec(**base)


# --- analytic trajectories ------------------------------------------------------------

def _figure8_kinematics(t: float, spec: TrajectorySpec):
    """Position/velocity/acceleration (ENU) of the figure-eight path."""
    w = 2.0 * math.pi / spec.period
    a, b = spec.east_extent, spec.north_extent
    pos = np.array([a * math.sin(w * t), b * math.sin(2 * w * t), 0.0])
    vel = np.array([a * w * math.cos(w * t), 2 * b * w * math.cos(2 * w * t), 0.0])
    acc = np.array([-a * w * w * math.sin(w * t), -4 * b * w * w * math.sin(2 * w * t), 0.0])
    return pos, vel, acc


def _grid_kinematics(t: float, spec: TrajectorySpec):
    """Rounded-rectangle city-block loop at constant speed."""
    a, b = spec.east_extent, spec.north_extent
    r = min(a, b) / 4.0
    le, ln = a - 2 * r, b - 2 * r
    perimeter = 2 * le + 2 * ln + 2 * math.pi * r
    speed = perimeter / spec.period
    s = (speed * t) % perimeter
    segs = [("straight", le), ("arc", math.pi * r / 2), ("straight", ln), ("arc", math.pi * r / 2),
            ("straight", le), ("arc", math.pi * r / 2), ("straight", ln), ("arc", math.pi * r / 2)]
    x0, y0 = r, 0.0
    heading = 0.0  # travelling east initially; arcs turn left
    for kind, length in segs:
        if s <= length + 1e-12:
            if kind == "arc":
                cx = x0 - r * math.sin(heading)
                cy = y0 + r * math.cos(heading)
                ang = math.atan2(y0 - cy, x0 - cx) + s / r
                pos = np.array([cx + r * math.cos(ang), cy + r * math.sin(ang), 0.0])
                vel = speed * np.array([-math.sin(ang), math.cos(ang), 0.0])
                acc = (speed ** 2 / r) * np.array([-math.cos(ang), -math.sin(ang), 0.0])
                return pos, vel, acc
            pos = np.array([x0 + s * math.cos(heading), y0 + s * math.sin(heading), 0.0])
            vel = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
            return pos, vel, np.zeros(3)
        s -= length
        if kind == "arc":
            cx = x0 - r * math.sin(heading)
            cy = y0 + r * math.cos(heading)
            ang = math.atan2(y0 - cy, x0 - cx) + length / r
            x0 = cx + r * math.cos(ang)
            y0 = cy + r * math.sin(ang)
            heading += length / r
        else:
            x0 += length * math.cos(heading)
            y0 += length * math.sin(heading)
    raise GenerationError("grid path parameterization failed")  # pragma: no cover


def truth_kinematics(t: float, spec: TrajectorySpec):
    """Truth position/velocity/acceleration/yaw/yaw-rate at time t."""
    if spec.path == "figure8":
        pos, vel, acc = _figure8_kinematics(t, spec)
    elif spec.path == "grid":
        pos, vel, acc = _grid_kinematics(t, spec)
    else:
        raise DataError(f"unknown path {spec.path!r}")
    speed_sq = vel[0] ** 2 + vel[1] ** 2
    theta = math.atan2(vel[1], vel[0])  # angle of travel from East, CCW
    theta_dot = (vel[0] * acc[1] - vel[1] * acc[0]) / speed_sq if speed_sq > 1e-12 else 0.0
    return pos, vel, acc, theta, theta_dot


def attitude_from_heading(theta: float) -> np.ndarray:
    """Body axes (x forward, y left, z up) for a travel angle from East."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def vehicle_yaw_from_heading(theta: float) -> float:
    """Azimuth of the forward axis, clockwise from North."""
    return (math.pi / 2 - theta) % (2.0 * math.pi)


# --- constellation ---------------------------------------------------------------------

def constellation_positions(t: float) -> list[tuple[str, np.ndarray]]:
    """24-slot nominal constellation on circular ECEF-fixed orbits."""
    out = []
    incl = math.radians(55.0)
    ci, si = math.cos(incl), math.sin(incl)
    for plane in range(6):
        raan = plane * math.pi / 3.0
        cr, sr = math.cos(raan), math.sin(raan)
        for slot in range(4):
            u = 2.0 * math.pi * slot / 4.0 + plane * 0.25 + ORBIT_RATE * t
            cu, su = math.cos(u), math.sin(u)
            in_plane = np.array([cu, su * ci, su * si]) * ORBIT_RADIUS
            pos = np.array([
                cr * in_plane[0] - sr * in_plane[1],
                sr * in_plane[0] + cr * in_plane[1],
                in_plane[2],
            ])
            out.append((f"G{plane * 4 + slot + 1:02d}", pos))
    return out


# --- skyline ----------------------------------------------------------------------------

@dataclass
class Skyline:
    """Piecewise-constant elevation cutoff over azimuth bins, per segment."""

    segment_duration: float
    bins: np.ndarray   # (n_segments, azimuth_bins) of cutoff elevations

    def segment_of(self, t: float) -> int:
        return min(self.bins.shape[0] - 1, int(t / self.segment_duration))

    def cutoff_fn(self, t: float):
        heights = self.bins[self.segment_of(t)]
        n = len(heights)

        def fn(az: np.ndarray) -> np.ndarray:
            idx = (np.asarray(az) * n / (2.0 * math.pi)).astype(int) % n
            return heights[idx]
        return fn


def make_skyline(traj: TrajectorySpec, scene: SceneSpec, rng: np.random.Generator) -> Skyline:
    """Street-like wall profiles: one or two opposite azimuth sectors built up.

    Blocking whole sides (rather than scattering obstructions uniformly in
    azimuth) keeps the NLOS push directionally coherent within a segment,
    matching how street canyons bias horizontal positioning.
    """
    n_seg = max(1, int(math.ceil(traj.duration / scene.segment_duration)))
    n_bins = scene.azimuth_bins
    if scene.cutoff_high <= 0.0:
        return Skyline(scene.segment_duration, np.zeros((n_seg, n_bins)))
    bins = np.zeros((n_seg, n_bins))
    wall_width = max(1, (3 * n_bins) // 8)
    for seg in range(n_seg):
        low = rng.uniform(0.4, 1.0) * scene.cutoff_low * np.ones(n_bins)
        start = int(rng.integers(0, n_bins))
        height = rng.uniform(max(scene.cutoff_low, 0.55 * scene.cutoff_high),
                             scene.cutoff_high)
        for j in range(wall_width):
            low[(start + j) % n_bins] = height * rng.uniform(0.85, 1.0)
        if rng.uniform() < 0.35:  # occasionally a second, lower facing wall
            height2 = rng.uniform(scene.cutoff_low, 0.7 * scene.cutoff_high)
            for j in range(wall_width):
                low[(start + n_bins // 2 + j) % n_bins] = height2 * rng.uniform(0.85, 1.0)
        bins[seg] = low
    return Skyline(scene.segment_duration, bins)


# --- metrics -----------------------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-axis RMSE against ground truth, with the matched error series."""

    rmse_east: float
    rmse_north: float
    rmse_up: float
    n_matched: int
    times: np.ndarray = field(repr=False, default=None)
    errors: np.ndarray = field(repr=False, default=None)  # (n, 3) ENU

    @property
    def rmse_horizontal(self) -> float:
        return math.hypot(self.rmse_east, self.rmse_north)

    def to_dict(self) -> dict:
        return {"rmse_east": self.rmse_east, "rmse_north": self.rmse_north,
                "rmse_up": self.rmse_up, "rmse_horizontal": self.rmse_horizontal,
                "n_matched": self.n_matched}


def compute_rmse(estimate: np.ndarray, truth: np.ndarray, tol: float = 1e-3) -> ErrorReport:
    """Per-axis ENU RMSE over epochs matched within `tol` seconds.

    Both inputs are (n, 4) arrays of [time, east, north, up] in the truth
    anchor frame. Fewer than 10 matched epochs is a hard error.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.ndim != 2 or estimate.shape[1] < 4 or truth.ndim != 2 or truth.shape[1] < 4:
        raise DataError("trajectories must be (n, 4) arrays of time,east,north,up")
    tt = truth[:, 0]
    idx = np.searchsorted(tt, estimate[:, 0])
    idx = np.clip(idx, 0, len(tt) - 1)
    idx_lo = np.clip(idx - 1, 0, len(tt) - 1)
    pick = np.where(np.abs(tt[idx] - estimate[:, 0]) <= np.abs(tt[idx_lo] - estimate[:, 0]),
                    idx, idx_lo)
    ok = np.abs(tt[pick] - estimate[:, 0]) <= tol
    if ok.sum() < 10:
        raise DataError(f"only {int(ok.sum())} matched epochs (< 10)")
    err = estimate[ok, 1:4] - truth[pick[ok], 1:4]
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    return ErrorReport(float(rmse[0]), float(rmse[1]), float(rmse[2]),
                       int(ok.sum()), estimate[ok, 0], err)


def ab_compare(baseline: ErrorReport, test: ErrorReport) -> tuple[float, float, float]:
    """Percentage improvement per axis: (baseline - test) / baseline * 100."""
    out = []
    for b, t in ((baseline.rmse_east, test.rmse_east),
                 (baseline.rmse_north, test.rmse_north),
                 (baseline.rmse_up, test.rmse_up)):
        if b == 0.0:
            raise DataError("baseline RMSE is zero; improvement undefined")
        out.append((b - t) / b * 100.0)
    return tuple(out)


# --- scenario generation --------------------------------------------------------------------

def default_extrinsics() -> dict:
    """Forward-looking stereo rig: camera z forward, x right, y down."""
    r_bc = np.array([[0.0, 0.0, 1.0],    # body x (forward) = camera z
                     [-1.0, 0.0, 0.0],   # body y (left) = -camera x
                     [0.0, -1.0, 0.0]])  # body z (up) = -camera y
    return {
        "r_bc": r_bc.tolist(),
        "p_bc": [0.6, 0.0, 0.4],
        "r_c1c0": np.eye(3).tolist(),
        "p_c0c1": [0.12, 0.0, 0.0],
    }


DEFAULT_LEVER_ARM = [-0.2, 0.0, 1.1]


def _snr_for(ele: float, nlos: bool, scene: SceneSpec, offset: float) -> float:
    snr = scene.snr_base + scene.snr_span * math.sin(ele) + offset
    if nlos:
        snr -= scene.nlos_snr_drop
    return float(min(70.0, max(0.0, snr)))


def generate_scenario(traj: TrajectorySpec, scene: SceneSpec, seed: int, out_dir,
                      yaw_offset: float = 0.0,
                      anchor: GeodeticPosition = DEFAULT_ANCHOR) -> dict:
    """Write a complete dataset bundle under `out_dir`; returns the metadata dict.

    Deterministic for a given (specs, seed).
    """
    out = dataio.ensure_dir(out_dir)
    size = scene.mask_size
    fisheye = FisheyeModel(size / 2.0, size / 2.0, size * 240.0 / 512.0, yaw_offset)
    seq = np.random.SeedSequence(seed)
    rng_scene, rng_imu, rng_gnss, rng_feat = [np.random.default_rng(s) for s in seq.spawn(4)]

    skyline = make_skyline(traj, scene, rng_scene)
    anchor_ecef = geodetic_to_ecef(anchor)
    enu = enu_matrix(anchor)

    # truth at the camera grid (superset of GNSS/mask epochs)
    cam_dt = 1.0 / traj.cam_rate
    n_cam = int(round(traj.duration * traj.cam_rate))
    truth_rows = []
    for k in range(n_cam + 1):
        t = k * cam_dt
        pos, vel, acc, theta, _ = truth_kinematics(t, traj)
        truth_rows.append([t, pos[0], pos[1], pos[2]])
    dataio.write_trajectory(out / "truth.csv", truth_rows)

    # IMU stream
    imu_dt = 1.0 / traj.imu_rate
    n_imu = int(round(traj.duration * traj.imu_rate))
    bias_a = rng_imu.normal(scale=scene.imu_bias_sigma_accel, size=3) if scene.noise else np.zeros(3)
    bias_w = rng_imu.normal(scale=scene.imu_bias_sigma_gyro, size=3) if scene.noise else np.zeros(3)
    pn = scene.process_noise
    sig_a = math.sqrt(pn.accel_noise * traj.imu_rate) if scene.noise else 0.0
    sig_w = math.sqrt(pn.gyro_noise * traj.imu_rate) if scene.noise else 0.0
    walk_a = math.sqrt(pn.accel_bias_walk * imu_dt) if scene.noise else 0.0
    walk_w = math.sqrt(pn.gyro_bias_walk * imu_dt) if scene.noise else 0.0
    imu_rows = []
    ba, bw = bias_a.copy(), bias_w.copy()
    for k in range(n_imu + 1):
        t = k * imu_dt
        _, _, acc, theta, theta_dot = truth_kinematics(t, traj)
        rot = attitude_from_heading(theta)
        accel = rot.T @ (acc + GRAVITY_ENU) + ba
        gyro = np.array([0.0, 0.0, theta_dot]) + bw
        if scene.noise:
            accel = accel + rng_imu.normal(scale=sig_a, size=3)
            gyro = gyro + rng_imu.normal(scale=sig_w, size=3)
            ba = ba + rng_imu.normal(scale=walk_a, size=3)
            bw = bw + rng_imu.normal(scale=walk_w, size=3)
        imu_rows.append([t, gyro[0], gyro[1], gyro[2], accel[0], accel[1], accel[2]])
    dataio.write_imu(out / "imu.csv", imu_rows)

    # GNSS + masks
    base_enu = np.array([260.0, -180.0, 8.0])
    base_ecef = enu_to_ecef(base_enu, anchor)
    gnss_dt = 1.0 / traj.gnss_rate
    n_gnss = int(round(traj.duration * traj.gnss_rate))
    rover_rows, base_rows, manifest = [], [], {}
    amb_rover: dict[str, int] = {}
    amb_base: dict[str, int] = {}
    seen_prev: set[str] = set()
    prev_label: dict[str, bool] = {}
    snr_offsets = {f"G{i + 1:02d}": rng_gnss.uniform(-2.0, 2.0) for i in range(24)}
    # per-satellite phases of the slowly wandering NLOS excess-path errors
    code_phase = {f"G{i + 1:02d}": rng_gnss.uniform(0.0, 2.0 * math.pi) for i in range(24)}
    carr_phase = {f"G{i + 1:02d}": rng_gnss.uniform(0.0, 2.0 * math.pi) for i in range(24)}
    dataio.ensure_dir(out / "masks")
    mask_shape = (scene.mask_size, scene.mask_size)

    for k in range(n_gnss + 1):
        t = k * gnss_dt
        pos, vel, acc, theta, _ = truth_kinematics(t, traj)
        rot = attitude_from_heading(theta)
        yaw = vehicle_yaw_from_heading(theta)
        antenna = pos + rot @ np.asarray(DEFAULT_LEVER_ARM)
        rover_ecef = enu_to_ecef(antenna, anchor)
        cutoff = skyline.cutoff_fn(t)

        clock_r = rng_gnss.normal(scale=scene.receiver_clock_sigma) if scene.noise else 0.0
        clock_b = rng_gnss.normal(scale=scene.receiver_clock_sigma) if scene.noise else 0.0

        visible = []
        for sat_id, sat_pos in constellation_positions(t):
            los = enu @ (sat_pos - rover_ecef)
            rng_sat = np.linalg.norm(los)
            ele = math.asin(los[2] / rng_sat)
            if ele < scene.min_elevation:
                continue
            az = math.atan2(los[0], los[1]) % (2.0 * math.pi)
            visible.append((sat_id, sat_pos, ele, az))
        if not visible:
            raise GenerationError(f"no visible satellites at t={t}; scene too aggressive")

        seen_now = set()
        for sat_id, sat_pos, ele, az in visible:
            seen_now.add(sat_id)
            u, v = skyview.project_satellite(ElevationAzimuth(ele, az), yaw, fisheye)
            sky = skyview.sky_pixel_at(u, v, cutoff, yaw, fisheye, mask_shape)
            nlos = not bool(sky)  # out-of-dome counts as obstructed
            label = SkyLabel.NLOS if nlos else SkyLabel.LOS

            sat_clk = 0.0
            snr = _snr_for(ele, nlos, scene, snr_offsets[sat_id])
            iono = 4.5 / math.sin(ele) if scene.atmosphere else 0.0
            tropo = 2.3 / math.sin(ele) if scene.atmosphere else 0.0
            lli = 0
            # carrier lock breaks on signal re-entry and when the direct path
            # (dis)appears: obstruction transitions slip the rover carrier
            transition = prev_label.get(sat_id) is not None and prev_label[sat_id] != nlos
            if sat_id not in amb_rover or sat_id not in seen_prev or transition:
                if sat_id in seen_prev or sat_id in amb_rover:
                    lli = 1
                amb_rover[sat_id] = int(rng_gnss.integers(-100000, 100000))
                if sat_id not in amb_base:
                    amb_base[sat_id] = int(rng_gnss.integers(-100000, 100000))
            prev_label[sat_id] = nlos

            rho_r = float(np.linalg.norm(sat_pos - rover_ecef))
            # truth noise: LOS-level stochastic model, moderately inflated for
            # NLOS; the engine's nlos_factor is a (larger) mitigation weight
            var_p = observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, ele, snr,
                                         scene.stochastic)
            var_l = observation_variance(SkyLabel.LOS, ObsKind.CARRIER, ele, snr,
                                         scene.stochastic)
            if nlos:
                var_p *= scene.nlos_noise_factor
                var_l *= scene.nlos_noise_factor
            noise_p = rng_gnss.normal(scale=math.sqrt(var_p)) if scene.noise else 0.0
            noise_l = rng_gnss.normal(scale=math.sqrt(var_l)) if scene.noise else 0.0
            p_r = rho_r + clock_r - SPEED_OF_LIGHT * sat_clk + iono + tropo + noise_p
            l_r = rho_r + clock_r - SPEED_OF_LIGHT * sat_clk - iono + tropo \
                + GPS_L1_WAVELENGTH * amb_rover[sat_id] + noise_l
            if nlos:
                # the direct path is blocked: both observables track the
                # reflection, so both carry the slowly wandering excess path;
                # the carrier adds a bounded multipath ripple on top
                w_code = 0.55 + 0.45 * math.sin(
                    2.0 * math.pi * t / scene.nlos_code_period + code_phase[sat_id])
                excess = scene.nlos_code_bias * w_code
                p_r += excess
                l_r += excess + scene.nlos_carrier_bias * math.sin(
                    2.0 * math.pi * t / scene.nlos_carrier_period + carr_phase[sat_id])
            rover_rows.append([t, sat_id, p_r, l_r, snr,
                               sat_pos[0], sat_pos[1], sat_pos[2], sat_clk,
                               GPS_L1_WAVELENGTH, iono, tropo, lli])

            # base station: open sky, always LOS
            los_b = enu @ (sat_pos - base_ecef)
            ele_b = math.asin(los_b[2] / np.linalg.norm(los_b))
            if ele_b < scene.min_elevation:
                continue
            snr_b = _snr_for(ele_b, False, scene, snr_offsets[sat_id])
            var_pb = observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, ele_b, snr_b,
                                          scene.stochastic)
            var_lb = observation_variance(SkyLabel.LOS, ObsKind.CARRIER, ele_b, snr_b,
                                          scene.stochastic)
            rho_b = float(np.linalg.norm(sat_pos - base_ecef))
            noise_pb = rng_gnss.normal(scale=math.sqrt(var_pb)) if scene.noise else 0.0
            noise_lb = rng_gnss.normal(scale=math.sqrt(var_lb)) if scene.noise else 0.0
            p_b = rho_b + clock_b - SPEED_OF_LIGHT * sat_clk + iono + tropo + noise_pb
            l_b = rho_b + clock_b - SPEED_OF_LIGHT * sat_clk - iono + tropo \
                + GPS_L1_WAVELENGTH * amb_base[sat_id] + noise_lb
            base_rows.append([t, sat_id, p_b, l_b, snr_b,
                              sat_pos[0], sat_pos[1], sat_pos[2], sat_clk,
                              GPS_L1_WAVELENGTH, iono, tropo, lli])
        seen_prev = seen_now

        if k % max(1, int(round(traj.gnss_rate / traj.mask_rate))) == 0:
            raster = skyview.render_mask(cutoff, yaw, fisheye, mask_shape)
            name = f"masks/epoch_{k:06d}.png"
            dataio.write_mask_png(out / name, raster)
            manifest[repr(float(t))] = name

    dataio.write_gnss(out / "gnss_rover.csv", rover_rows)
    dataio.write_gnss(out / "gnss_base.csv", base_rows)
    dataio.write_json(out / "masks_manifest.json", manifest)

    # stereo feature tracks on facade points along the path
    extr = default_extrinsics()
    r_bc = np.array(extr["r_bc"])
    p_bc = np.array(extr["p_bc"])
    r_c1c0 = np.array(extr["r_c1c0"])
    p_c0c1 = np.array(extr["p_c0c1"])
    points = []
    for i in range(scene.feature_count):
        t_along = rng_feat.uniform(0.0, traj.duration)
        pos, vel, _, theta, _ = truth_kinematics(t_along, traj)
        side = 1.0 if rng_feat.uniform() < 0.5 else -1.0
        lateral = rng_feat.uniform(8.0, 28.0) * side
        ahead = rng_feat.uniform(-10.0, 10.0)
        d = np.array([math.cos(theta), math.sin(theta), 0.0])
        n = np.array([-math.sin(theta), math.cos(theta), 0.0])
        p = pos + d * ahead + n * lateral
        p[2] = rng_feat.uniform(1.0, 18.0)
        points.append(p)
    points = np.array(points)

    sigma_n = scene.pixel_sigma_px / scene.focal_px if scene.noise else 0.0
    track_rows = []
    active: set[int] = set()
    for k in range(n_cam + 1):
        t = k * cam_dt
        pos, vel, _, theta, _ = truth_kinematics(t, traj)
        rot_nb = attitude_from_heading(theta)
        rot_nc = rot_nb @ r_bc
        cam_pos = pos + rot_nb @ p_bc
        rel = (points - cam_pos) @ rot_nc  # nav->camera for each point
        depth = rel[:, 2]
        rng_m = np.linalg.norm(points - cam_pos, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            uu = rel[:, 0] / depth
            vv = rel[:, 1] / depth
        vis = (depth > 5.0) & (rng_m < 50.0) & (np.abs(uu) < 0.85) & (np.abs(vv) < 0.7)
        vis_ids = [int(i) for i in np.flatnonzero(vis)]
        keep = [i for i in vis_ids if i in active]  # existing tracks stay alive
        for i in sorted(vis_ids, key=lambda i: rng_m[i]):
            if len(keep) >= scene.max_tracked:
                break
            if i not in keep:
                keep.append(i)
        active = set(keep)
        for i in sorted(keep):
            p_left = rot_nc.T @ (points[i] - cam_pos)
            p_right = r_c1c0 @ (p_left - p_c0c1)
            if p_right[2] <= 1.0:
                continue
            z = np.array([p_left[0] / p_left[2], p_left[1] / p_left[2],
                          p_right[0] / p_right[2], p_right[1] / p_right[2]])
            if sigma_n:
                z = z + rng_feat.normal(scale=sigma_n, size=4)
            track_rows.append([t, k, int(i), z[0], z[1], z[2], z[3]])
    dataio.write_tracks(out / "tracks.csv", track_rows)

    pos0, vel0, _, theta0, _ = truth_kinematics(0.0, traj)
    att0 = Attitude.from_matrix(attitude_from_heading(theta0))
    meta = {
        "schema_version": 1,
        "seed": seed,
        "anchor": {"latitude": anchor.latitude, "longitude": anchor.longitude,
                   "height": anchor.height},
        "base_position_ecef": base_ecef.tolist(),
        "initial_state": {
            "time": 0.0,
            "position": pos0.tolist(),
            "velocity": vel0.tolist(),
            "quaternion": att0.q.tolist(),
        },
        "rates": {"imu": traj.imu_rate, "gnss": traj.gnss_rate,
                  "camera": traj.cam_rate, "mask": traj.mask_rate},
        "duration": traj.duration,
        "path": traj.path,
        "fisheye": {"cx": fisheye.cx, "cy": fisheye.cy, "radius": fisheye.radius,
                    "yaw_offset": fisheye.yaw_offset},
        "scene": {k: v for k, v in asdict(scene).items()
                  if not isinstance(v, (StochasticConfig, ProcessNoiseConfig, dict))},
    }
    dataio.write_json(out / "dataset_meta.json", meta)

    config = {
        "schema_version": 1,
        "mode": "spp",
        "sndm": True,
        "paths": {
            "imu": "imu.csv", "gnss": "gnss_rover.csv", "gnss_base": "gnss_base.csv",
            "tracks": "tracks.csv", "masks_manifest": "masks_manifest.json",
            "truth": "truth.csv", "meta": "dataset_meta.json",
        },
        "fisheye": meta["fisheye"],
        "extrinsics": extr,
        "lever_arm": DEFAULT_LEVER_ARM,
        "window_size": 20,
        "pixel_sigma": scene.pixel_sigma_px / scene.focal_px if scene.noise else 2e-4,
        "stochastic": asdict(scene.stochastic),
        "process_noise": {
            "accel_noise": scene.process_noise.accel_noise,
            "gyro_noise": scene.process_noise.gyro_noise,
            "accel_bias_walk": scene.process_noise.accel_bias_walk,
            "gyro_bias_walk": scene.process_noise.gyro_bias_walk,
        },
        "seed": seed,
    }
    dataio.write_json(out / "config.json", config)
    return meta


# --- segmentation benchmark corpus --------------------------------------------------------

def make_segmentation_corpus(n_images: int, kind: str, seed: int, out_dir,
                             size: int = 256) -> list[tuple[str, str]]:
    """Render a skyline corpus with truth masks; returns (image, mask) pairs.

    `bimodal`: two well-separated intensity populations (sky ~205, building
    ~45, each clipped to +/-10), guaranteeing any threshold in the gap is
    exact. `connected`: same construction; the sky region always contains
    the principal point and is star-shaped around it, so seeded region
    growth recovers it exactly.
    """
    if kind not in ("bimodal", "connected"):
        raise DataError(f"unknown corpus kind {kind!r}")
    out = dataio.ensure_dir(out_dir)
    images_dir = dataio.ensure_dir(out / "images")
    truth_dir = dataio.ensure_dir(out / "truth")
    rng = np.random.default_rng(seed)
    model = FisheyeModel(size / 2.0, size / 2.0, size * 0.47)
    pairs = []
    for i in range(n_images):
        heights = rng.uniform(0.15, 1.1, size=8)

        def cutoff(az, heights=heights):
            idx = (np.asarray(az) * 8 / (2 * math.pi)).astype(int) % 8
            return heights[idx]

        raster = skyview.render_mask(cutoff, 0.0, model, (size, size))
        sky_noise = np.clip(rng.normal(0.0, 5.0, size=(size, size)), -10, 10)
        bld_noise = np.clip(rng.normal(0.0, 5.0, size=(size, size)), -10, 10)
        img = np.where(raster, 205.0 + sky_noise, 45.0 + bld_noise)
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
        img_name = f"images/img_{i:04d}.png"
        mask_name = f"truth/img_{i:04d}.png"
        dataio.write_gray_png(out / img_name, img)
        dataio.write_mask_png(out / mask_name, raster)
        pairs.append((img_name, mask_name))
    dataio.write_json(out / "corpus_manifest.json",
                      {"kind": kind, "seed": seed, "pairs": pairs})
    return pairs
