import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canyonnav import geodesy, gnss
from canyonnav.errors import BelowHorizonError, EmptyEpochError, InvalidGeometryError
from canyonnav.geodesy import GeodeticPosition
from canyonnav.gnss import (DdObservation, GnssEpoch, GnssObservation, ObsKind,
                            SatelliteState, SkyLabel, StochasticConfig)

ANCHOR = GeodeticPosition(0.534, 1.9897, 50.0)
RCV = geodesy.geodetic_to_ecef(ANCHOR)
L1 = 0.19029367279836487


def sat_at(enu_los, snr=45.0, sat_id="G01", clock=0.0):
    pos = geodesy.enu_to_ecef(np.asarray(enu_los, dtype=float), ANCHOR)
    return SatelliteState(sat_id, pos, clock, snr, L1)


# --- elevation / azimuth -------------------------------------------------------

def test_zenith():
    ea = gnss.elevation_azimuth(sat_at([0, 0, 2.2e7]).position, RCV)
    assert abs(ea.elevation - math.pi / 2) < 1e-9


def test_due_north_horizon():
    ea = gnss.elevation_azimuth(sat_at([0, 2.2e7, 0]).position, RCV, ANCHOR)
    assert abs(ea.elevation) < 1e-9
    assert abs(ea.azimuth) < 1e-9


def test_northeast_45deg():
    # direct trigonometric evaluation: LOS (1, 1, sqrt(2))*r/2
    r = 2.2e7
    ea = gnss.elevation_azimuth(sat_at([r / 2, r / 2, r * math.sqrt(2) / 2]).position, RCV)
    assert abs(ea.elevation - math.pi / 4) < 1e-9
    assert abs(ea.azimuth - math.pi / 4) < 1e-9


def test_below_horizon_rejected():
    with pytest.raises(BelowHorizonError):
        gnss.elevation_azimuth(sat_at([0, 2.2e7, -1e6]).position, RCV)


# --- pseudorange prediction ----------------------------------------------------

def test_predict_zero_clocks_is_distance():
    st_ = sat_at([0, 0, 2.2e7])
    assert gnss.predict_pseudorange(RCV, 0.0, st_) == pytest.approx(
        np.linalg.norm(st_.position - RCV), abs=1e-9)


def test_predict_receiver_clock_linear():
    st_ = sat_at([0, 0, 2.2e7])
    base = gnss.predict_pseudorange(RCV, 0.0, st_)
    assert gnss.predict_pseudorange(RCV, 100.0, st_) == pytest.approx(base + 100.0, abs=1e-9)


def test_predict_satellite_clock():
    # c * 1e-6 s = 299.792458 m, subtracted
    st_ = sat_at([0, 0, 2.2e7], clock=1e-6)
    clean = sat_at([0, 0, 2.2e7], clock=0.0)
    delta = gnss.predict_pseudorange(RCV, 0.0, st_) - gnss.predict_pseudorange(RCV, 0.0, clean)
    # tolerance at the ulp scale of a 2.2e7 m pseudorange
    assert delta == pytest.approx(-299.792458, abs=1e-8)


# --- stochastic model ----------------------------------------------------------

def snr_multiplier_oracle(snr, s1=50.0, s0=10.0, big_a=30.0, a=20.0):
    """Independent hand evaluation of the goGPS weighting term."""
    if snr >= s1:
        return 1.0
    term = 10.0 ** (-(snr - s1) / a)
    slope = big_a / 10.0 ** (-(s0 - s1) / a) - 1.0
    val = term * (slope * (snr - s1) / (s0 - s1) + 1.0)
    return max(1.0, val)


def test_point_values():
    v = gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, math.pi / 2, 50.0)
    assert v == 0.09
    v_nlos = gnss.observation_variance(SkyLabel.NLOS, ObsKind.PSEUDORANGE, math.pi / 2, 50.0)
    assert abs(v_nlos - 0.9) < 1e-12
    v_low = gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, math.pi / 6, 30.0)
    # hand oracle: f = 4, multiplier = 10*((30/100 - 1)*0.5 + 1) = 6.5, 4*6.5*0.09
    f = 1.0 / math.sin(math.pi / 6) ** 2
    assert abs(v_low - f * snr_multiplier_oracle(30.0) * 0.09) < 1e-12
    assert abs(v_low - 2.34) < 1e-12


def test_out_of_image_treated_as_nlos():
    los = gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, 0.7, 40.0)
    out = gnss.observation_variance(SkyLabel.OUT_OF_IMAGE, ObsKind.PSEUDORANGE, 0.7, 40.0)
    assert out == pytest.approx(10.0 * los, rel=1e-15)


@given(ele=st.floats(0.01, math.pi / 2), snr=st.floats(0.0, 70.0))
@settings(max_examples=300, deadline=None)
def test_variance_properties(ele, snr):
    cfg = StochasticConfig()
    v = gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, ele, snr, cfg)
    assert v > 0.0
    assert gnss.observation_variance(SkyLabel.NLOS, ObsKind.PSEUDORANGE, ele, snr, cfg) \
        == pytest.approx(10.0 * v, rel=1e-14)
    vc = gnss.observation_variance(SkyLabel.LOS, ObsKind.CARRIER, ele, snr, cfg)
    assert vc / v == pytest.approx(0.01, rel=1e-12)
    # multiplier agrees with the independent oracle
    assert gnss.snr_multiplier(snr, cfg) == pytest.approx(snr_multiplier_oracle(snr), rel=1e-14)


def test_variance_monotone_in_elevation_and_snr():
    eles = np.linspace(0.05, math.pi / 2, 60)
    vals = [gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, e, 40.0) for e in eles]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    snrs = np.linspace(10.0, 70.0, 60)
    vals = [gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, 0.8, s) for s in snrs]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_variance_invalid_elevation():
    with pytest.raises(InvalidGeometryError):
        gnss.observation_variance(SkyLabel.LOS, ObsKind.PSEUDORANGE, 0.0, 40.0)


# --- double differences --------------------------------------------------------

BASE = geodesy.enu_to_ecef([350.0, -120.0, 2.0], ANCHOR)

# Clock offsets are snapped to multiples of 2^-27 m and pseudoranges kept inside
# one binade [2^24, 2^25) m, so the float additions below are exact and the test
# isolates the algebraic cancellation (see the quantize helper).
QUANTUM = 2.0 ** -27


def quantize(x):
    return round(x / QUANTUM) * QUANTUM


def make_epoch(sat_enus, rcv_clock_m=0.0, sat_clocks_m=None, rng=None, t=0.0):
    """Synthetic rover+base epoch with exactly representable clock terms."""
    sat_clocks_m = sat_clocks_m or [0.0] * len(sat_enus)
    obs, base_obs = [], []
    for i, (enu, sclk) in enumerate(zip(sat_enus, sat_clocks_m)):
        sid = f"G{i + 1:02d}"
        pos = geodesy.enu_to_ecef(np.asarray(enu, dtype=float), ANCHOR)
        st_ = SatelliteState(sid, pos, 0.0, 45.0, L1)
        pr_r = quantize(float(np.linalg.norm(pos - RCV))) + rcv_clock_m - sclk
        pr_b = quantize(float(np.linalg.norm(pos - BASE))) - sclk
        cr_r = pr_r + quantize(L1 * 1000 * (i + 1))
        cr_b = pr_b + quantize(L1 * 500 * (i + 1))
        obs.append((GnssObservation(sid, pr_r, cr_r, carrier_valid=True), st_))
        base_obs.append(GnssObservation(sid, pr_b, cr_b, carrier_valid=True))
    return GnssEpoch(t, obs, base_observations=base_obs, base_position=BASE)


SAT_ENUS = [
    [0.0, 1e6, 2.2e7],
    [1.5e7, 2e6, 1.4e7],
    [-9e6, 8e6, 1.6e7],
    [3e6, -1.2e7, 1.5e7],
]


def test_identical_observations_zero_dd():
    ep = make_epoch(SAT_ENUS)
    ep_same = GnssEpoch(0.0, ep.observations,
                        base_observations=[o for o, _ in ep.observations],
                        base_position=RCV)
    dds = gnss.form_double_differences(ep_same, RCV)
    for d in dds:
        assert d.dd_pseudorange == 0.0
        assert d.dd_carrier == 0.0


def test_count():
    ep = make_epoch(SAT_ENUS[:3])
    assert len(gnss.form_double_differences(ep, RCV)) == 2


def test_reference_is_highest_elevation_los():
    ep = make_epoch(SAT_ENUS)
    dds = gnss.form_double_differences(ep, RCV)
    assert all(d.ref_id == "G01" for d in dds)  # zenith satellite
    labels = {"G01": SkyLabel.NLOS, "G02": SkyLabel.LOS,
              "G03": SkyLabel.LOS, "G04": SkyLabel.LOS}
    dds = gnss.form_double_differences(ep, RCV, labels)
    assert all(d.ref_id != "G01" for d in dds)
    # all-NLOS epoch falls back to highest elevation overall
    all_nlos = {k: SkyLabel.NLOS for k in labels}
    dds = gnss.form_double_differences(ep, RCV, all_nlos)
    assert all(d.ref_id == "G01" for d in dds)


def test_clock_cancellation():
    rng = np.random.default_rng(42)
    clean = gnss.form_double_differences(make_epoch(SAT_ENUS), RCV)
    for _ in range(200):
        rcv_clk = quantize(rng.uniform(-1, 1) * gnss.SPEED_OF_LIGHT * 1e-3)
        sat_clks = [quantize(rng.uniform(-1, 1) * gnss.SPEED_OF_LIGHT * 1e-4)
                    for _ in SAT_ENUS]
        shifted = gnss.form_double_differences(
            make_epoch(SAT_ENUS, rcv_clock_m=rcv_clk, sat_clocks_m=sat_clks), RCV)
        for a, b in zip(clean, shifted):
            assert abs(a.dd_pseudorange - b.dd_pseudorange) < 1e-12
            assert abs(a.dd_carrier - b.dd_carrier) < 1e-12


def test_too_few_common_satellites():
    ep = make_epoch(SAT_ENUS[:1])
    with pytest.raises(EmptyEpochError):
        gnss.form_double_differences(ep, RCV)
    with pytest.raises(EmptyEpochError):
        gnss.form_double_differences(GnssEpoch(0.0, ep.observations), RCV)


def test_duplicate_sat_ids_rejected():
    ep = make_epoch(SAT_ENUS[:2])
    with pytest.raises(ValueError):
        GnssEpoch(0.0, ep.observations + [ep.observations[0]])


# --- dense DD covariance -------------------------------------------------------

def dd_cov_oracle(dds, kind):
    """Brute-force covariance propagation through the differencing matrix.

    Stacks independent noise for (rover, base) x (ref + others) and applies
    DD_i = (r_i - b_i) - (r_ref - b_ref) as a linear map.
    """
    ref = dds[0]
    sats = [(ref.ref_label, ref.ref_elevation, ref.ref_snr)] + \
        [(d.label, d.elevation, d.snr) for d in dds]
    vars_ = []
    for lab, ele, snr in sats:            # rover then base per satellite
        vars_.append(gnss.observation_variance(lab, kind, ele, snr))
        vars_.append(gnss.observation_variance(SkyLabel.LOS, kind, ele, snr))
    n = len(dds)
    d_mat = np.zeros((n, 2 * len(sats)))
    for i in range(n):
        d_mat[i, 2 * (i + 1)] = 1.0     # rover other
        d_mat[i, 2 * (i + 1) + 1] = -1.0  # base other
        d_mat[i, 0] = -1.0              # rover ref
        d_mat[i, 1] = 1.0               # base ref
    return d_mat @ np.diag(vars_) @ d_mat.T


def make_dds(labels):
    ref = dict(ref_id="G01", ref_elevation=1.2, ref_snr=48.0, ref_label=labels[0])
    geom = [(0.5, 38.0), (0.9, 44.0), (0.35, 33.0)]
    return [DdObservation(sat_id=f"G{i + 2:02d}", dd_pseudorange=0.0, dd_carrier=0.0,
                          wavelength=L1, elevation=e, snr=s, label=lab, **ref)
            for i, ((e, s), lab) in enumerate(zip(geom, labels[1:]))]


def test_dd_covariance_matches_oracle():
    for labels in [
        [SkyLabel.LOS] * 4,
        [SkyLabel.LOS, SkyLabel.NLOS, SkyLabel.LOS, SkyLabel.LOS],
        [SkyLabel.NLOS, SkyLabel.LOS, SkyLabel.LOS, SkyLabel.LOS],
    ]:
        dds = make_dds(labels)
        got = gnss.dd_covariance(dds, ObsKind.PSEUDORANGE)
        np.testing.assert_allclose(got, dd_cov_oracle(dds, ObsKind.PSEUDORANGE), rtol=1e-12)


def test_nlos_label_inflates_only_its_contributions():
    base_r = gnss.dd_covariance(make_dds([SkyLabel.LOS] * 4), ObsKind.PSEUDORANGE)
    one_nlos = gnss.dd_covariance(
        make_dds([SkyLabel.LOS, SkyLabel.NLOS, SkyLabel.LOS, SkyLabel.LOS]),
        ObsKind.PSEUDORANGE)
    delta = one_nlos - base_r
    assert delta[0, 0] > 0.0
    mask = np.ones_like(delta, dtype=bool)
    mask[0, 0] = False
    np.testing.assert_allclose(delta[mask], 0.0, atol=1e-15)
    # NLOS reference inflates every entry (shared single-difference term)
    ref_nlos = gnss.dd_covariance(
        make_dds([SkyLabel.NLOS, SkyLabel.LOS, SkyLabel.LOS, SkyLabel.LOS]),
        ObsKind.PSEUDORANGE)
    assert np.all(ref_nlos - base_r > 0.0)
