"""GNSS observation geometry, double differencing and the LOS/NLOS stochastic model.

Pseudorange model (metres):  P = rho + c*(t_r - t^s) + I + T + e_P
Carrier model (metres):      L = rho + c*(t_r - t^s) - I + T + lambda*N + e_L

Double differences (between receivers, then between satellites) cancel both
receiver and satellite clock terms; with a short baseline the atmospheric
terms cancel as well.

The measurement variance model combines an elevation factor 1/sin^2(ele) with
an SNR-dependent multiplier (goGPS form) and a label-dependent inflation:
non-line-of-sight observations get `nlos_factor` (default 10) times the
line-of-sight variance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import geodesy
from .errors import BelowHorizonError, EmptyEpochError, InvalidGeometryError

SPEED_OF_LIGHT = 299_792_458.0

# Valid pseudorange window (metres) for sanity checks.
PSEUDORANGE_MIN = 1.8e7
PSEUDORANGE_MAX = 4.5e7


class SkyLabel(enum.Enum):
    """Visibility label assigned by the sky-mask classifier."""

    LOS = "los"
    NLOS = "nlos"
    OUT_OF_IMAGE = "out-of-image"


class ObsKind(enum.Enum):
    PSEUDORANGE = "pseudorange"
    CARRIER = "carrier"


@dataclass(frozen=True)
class SatelliteState:
    """Per-satellite broadcast state at one epoch (positions are ECEF metres)."""

    sat_id: str
    position: np.ndarray
    clock_offset: float  # t^s, seconds
    snr: float           # dB-Hz
    wavelength: float    # metres

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not (0.0 <= self.snr <= 70.0):
            raise ValueError(f"{self.sat_id}: SNR {self.snr} outside [0, 70] dB-Hz")
        if self.wavelength <= 0.0:
            raise ValueError(f"{self.sat_id}: non-positive wavelength")


@dataclass(frozen=True)
class GnssObservation:
    """One receiver's observation of one satellite."""

    sat_id: str
    pseudorange: float           # P, metres
    carrier: float = math.nan    # L, metres; NaN when invalid
    code_valid: bool = True
    carrier_valid: bool = False
    loss_of_lock: bool = False

    def __post_init__(self):
        if self.code_valid and not (PSEUDORANGE_MIN <= self.pseudorange <= PSEUDORANGE_MAX):
            raise ValueError(
                f"{self.sat_id}: pseudorange {self.pseudorange:.3e} outside "
                f"[{PSEUDORANGE_MIN:.1e}, {PSEUDORANGE_MAX:.1e}] m")


@dataclass
class GnssEpoch:
    """All observations of one epoch, optionally paired with base-station data.

    `atmosphere[sat_id] = (iono, tropo)` carries per-observation delays in
    metres (zero when absent); simulated datasets write them explicitly.
    """

    time: float
    observations: list[tuple[GnssObservation, SatelliteState]]
    atmosphere: dict[str, tuple[float, float]] = field(default_factory=dict)
    base_observations: list[GnssObservation] | None = None
    base_position: np.ndarray | None = None

    def __post_init__(self):
        ids = [obs.sat_id for obs, _ in self.observations]
        if len(ids) != len(set(ids)):
            raise ValueError(f"epoch {self.time}: duplicate satellite ids")
        if self.base_position is not None:
            self.base_position = np.asarray(self.base_position, dtype=float)

    def sat_state(self, sat_id: str) -> SatelliteState:
        for obs, st in self.observations:
            if obs.sat_id == sat_id:
                return st
        raise KeyError(sat_id)


@dataclass(frozen=True)
class ElevationAzimuth:
    """Elevation in [0, pi/2]; azimuth in [0, 2*pi), clockwise from North."""

    elevation: float
    azimuth: float


@dataclass(frozen=True)
class DdObservation:
    """A double-differenced pair (reference satellite minus `other`).

    Carries the per-satellite inputs the stochastic model needs (elevations,
    SNRs and visibility labels of both satellites).
    """

    ref_id: str
    sat_id: str
    dd_pseudorange: float
    dd_carrier: float            # NaN when either carrier is invalid
    wavelength: float
    ref_elevation: float
    ref_snr: float
    ref_label: SkyLabel
    elevation: float
    snr: float
    label: SkyLabel
    slip: bool = False           # loss-of-lock on either receiver's phase

    def __post_init__(self):
        if self.ref_id == self.sat_id:
            raise ValueError("reference and other satellite must differ")


def elevation_azimuth(sat_pos: np.ndarray, rcv_pos: np.ndarray,
                      rcv_geodetic: geodesy.GeodeticPosition | None = None) -> ElevationAzimuth:
    """Line-of-sight direction to a satellite in the receiver's local frame.

    Raises BelowHorizonError for geometry below the local tangent plane.
    """
    sat_pos = np.asarray(sat_pos, dtype=float)
    rcv_pos = np.asarray(rcv_pos, dtype=float)
    los = sat_pos - rcv_pos
    rng = np.linalg.norm(los)
    if rng <= 1e6:
        raise InvalidGeometryError(f"satellite range {rng:.3e} m implausibly small")
    if rcv_geodetic is None:
        rcv_geodetic = geodesy.ecef_to_geodetic(rcv_pos)
    enu = geodesy.enu_matrix(rcv_geodetic) @ los
    horizontal = math.hypot(enu[0], enu[1])
    ele = math.atan2(enu[2], horizontal)
    if ele < -1e-12:
        raise BelowHorizonError(f"elevation {ele:.4f} rad below horizon")
    ele = max(ele, 0.0)  # geometry exactly on the horizon is valid
    az = math.atan2(enu[0], enu[1]) % (2.0 * math.pi)
    if az >= 2.0 * math.pi:  # % can round up to the excluded endpoint
        az = 0.0
    return ElevationAzimuth(ele, az)


def predict_pseudorange(rcv_pos: np.ndarray, clock_m: float, sat: SatelliteState,
                        iono: float = 0.0, tropo: float = 0.0) -> float:
    """Modelled pseudorange at a known receiver position (all terms in metres)."""
    rho = float(np.linalg.norm(sat.position - np.asarray(rcv_pos, dtype=float)))
    return rho + clock_m - SPEED_OF_LIGHT * sat.clock_offset + iono + tropo


def predict_carrier(rcv_pos: np.ndarray, clock_m: float, sat: SatelliteState,
                    ambiguity_cycles: float, iono: float = 0.0, tropo: float = 0.0) -> float:
    """Modelled carrier phase in metres (ionosphere enters with opposite sign)."""
    rho = float(np.linalg.norm(sat.position - np.asarray(rcv_pos, dtype=float)))
    return rho + clock_m - SPEED_OF_LIGHT * sat.clock_offset - iono + tropo \
        + sat.wavelength * ambiguity_cycles


@dataclass(frozen=True)
class StochasticConfig:
    """Parameters of the SNR/elevation variance model."""

    sigma_pseudorange: float = 0.3   # metres
    sigma_carrier: float = 0.03     # metres
    snr_s1: float = 50.0            # dB-Hz; multiplier is 1 at and above s1
    snr_s0: float = 10.0            # dB-Hz
    snr_a: float = 20.0
    snr_big_a: float = 30.0
    nlos_factor: float = 10.0


def snr_multiplier(snr: float, cfg: StochasticConfig = StochasticConfig()) -> float:
    """SNR weighting multiplier (goGPS form), clamped to >= 1.

    Equals 1 at snr >= s1 and big_a at snr == s0.
    """
    if snr >= cfg.snr_s1:
        return 1.0
    ratio = (snr - cfg.snr_s1) / (cfg.snr_s0 - cfg.snr_s1)
    lead = 10.0 ** (-(snr - cfg.snr_s1) / cfg.snr_a)
    bracket = (cfg.snr_big_a / 10.0 ** (-(cfg.snr_s0 - cfg.snr_s1) / cfg.snr_a) - 1.0) * ratio + 1.0
    return max(1.0, lead * bracket)


def observation_variance(label: SkyLabel, kind: ObsKind, elevation: float, snr: float,
                         cfg: StochasticConfig = StochasticConfig()) -> float:
    """Measurement variance (m^2) for one observation.

    R = f * m(snr) * sigma^2 with f = 1/sin^2(ele); NLOS (and out-of-image,
    treated conservatively as NLOS) multiplies the LOS result by nlos_factor.
    """
    if not (0.0 < elevation <= math.pi / 2):
        raise InvalidGeometryError(f"elevation {elevation} outside (0, pi/2]")
    if not math.isfinite(snr):
        raise InvalidGeometryError("non-finite SNR")
    f = 1.0 / math.sin(elevation) ** 2
    sigma = cfg.sigma_pseudorange if kind == ObsKind.PSEUDORANGE else cfg.sigma_carrier
    var = f * snr_multiplier(snr, cfg) * sigma ** 2
    if label != SkyLabel.LOS:
        var *= cfg.nlos_factor
    return var


def form_double_differences(rover: GnssEpoch, rcv_pos: np.ndarray,
                            labels: Mapping[str, SkyLabel] | None = None) -> list[DdObservation]:
    """Build double differences between rover and its base-station epoch.

    The reference satellite is the highest-elevation LOS-labelled common
    satellite, falling back to the highest elevation overall. DD value
    convention: (rover_other - base_other) - (rover_ref - base_ref).

    Raises EmptyEpochError with fewer than 2 usable common satellites.
    """
    if rover.base_observations is None:
        raise EmptyEpochError("epoch carries no base-station observations")
    rcv_geo = geodesy.ecef_to_geodetic(np.asarray(rcv_pos, dtype=float))
    base_by_id = {obs.sat_id: obs for obs in rover.base_observations if obs.code_valid}

    common: dict[str, tuple[GnssObservation, SatelliteState, GnssObservation, ElevationAzimuth]] = {}
    for obs, st in rover.observations:
        if not obs.code_valid or obs.sat_id not in base_by_id:
            continue
        try:
            ea = elevation_azimuth(st.position, rcv_pos, rcv_geo)
        except BelowHorizonError:
            continue
        common[obs.sat_id] = (obs, st, base_by_id[obs.sat_id], ea)
    if len(common) < 2:
        raise EmptyEpochError(f"epoch {rover.time}: {len(common)} common satellites (< 2)")

    labels = labels or {}

    def label_of(sid: str) -> SkyLabel:
        return labels.get(sid, SkyLabel.LOS)

    los_ids = [sid for sid in common if label_of(sid) == SkyLabel.LOS]
    pool = los_ids if los_ids else list(common)
    ref_id = max(pool, key=lambda sid: common[sid][3].elevation)
    ref_obs, ref_st, ref_base, ref_ea = common[ref_id]
    ref_sd_code = ref_obs.pseudorange - ref_base.pseudorange
    ref_carrier_ok = ref_obs.carrier_valid and ref_base.carrier_valid
    ref_sd_carrier = ref_obs.carrier - ref_base.carrier if ref_carrier_ok else math.nan
    ref_slip = ref_obs.loss_of_lock or ref_base.loss_of_lock

    out = []
    for sid in sorted(common):
        if sid == ref_id:
            continue
        obs, st, bobs, ea = common[sid]
        dd_code = (obs.pseudorange - bobs.pseudorange) - ref_sd_code
        carrier_ok = ref_carrier_ok and obs.carrier_valid and bobs.carrier_valid
        dd_carrier = (obs.carrier - bobs.carrier) - ref_sd_carrier if carrier_ok else math.nan
        out.append(DdObservation(
            ref_id=ref_id, sat_id=sid,
            dd_pseudorange=dd_code, dd_carrier=dd_carrier,
            wavelength=st.wavelength,
            ref_elevation=ref_ea.elevation, ref_snr=ref_st.snr, ref_label=label_of(ref_id),
            elevation=ea.elevation, snr=st.snr, label=label_of(sid),
            slip=ref_slip or obs.loss_of_lock or bobs.loss_of_lock,
        ))
    return out


def dd_covariance(dds: Sequence[DdObservation], kind: ObsKind,
                  cfg: StochasticConfig = StochasticConfig()) -> np.ndarray:
    """Dense DD measurement covariance for observations sharing one reference.

    Each satellite's single-difference variance is its rover variance (with
    its sky label) plus a base contribution modelled as LOS at the same
    geometry: the shared reference correlates all rows.
    """
    if not dds:
        return np.zeros((0, 0))
    ref = dds[0]
    if any(d.ref_id != ref.ref_id for d in dds):
        raise ValueError("dd_covariance expects a single shared reference satellite")

    def sd_var(label: SkyLabel, ele: float, snr: float) -> float:
        rover = observation_variance(label, kind, ele, snr, cfg)
        base = observation_variance(SkyLabel.LOS, kind, ele, snr, cfg)
        return rover + base

    ref_var = sd_var(ref.ref_label, ref.ref_elevation, ref.ref_snr)
    n = len(dds)
    cov = np.full((n, n), ref_var)
    for i, d in enumerate(dds):
        cov[i, i] += sd_var(d.label, d.elevation, d.snr)
    return cov
