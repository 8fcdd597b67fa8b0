import copy
import math

import numpy as np
import pytest

from canyonnav import fusion, gnss, vision
from canyonnav.geodesy import Attitude, GeodeticPosition, enu_to_ecef, geodetic_to_ecef
from canyonnav.gnss import (GnssEpoch, GnssObservation, SatelliteState,
                            SkyLabel, StochasticConfig)
from canyonnav.fusion import FilterConfig, FusionFilter
from canyonnav.ins import ImuSample, InsState
from canyonnav.vision import ExtrinsicSet

ANCHOR = GeodeticPosition(0.534, 1.9897, 50.0)
L1 = 0.19029367279836487

EXTR = ExtrinsicSet(
    r_bc=Attitude.from_rotvec([0.0, -1.57, 0.0]).matrix(),
    p_bc=np.array([0.5, 0.0, -0.2]),
    r_c1c0=np.eye(3),
    p_c0c1=np.array([0.12, 0.0, 0.0]),
)


def make_filter(mode="spp", lever=None):
    cfg = FilterConfig(anchor=ANCHOR, extrinsics=EXTR,
                       lever_arm=np.zeros(3) if lever is None else lever)
    state = InsState(np.zeros(3), np.zeros(3), Attitude.identity())
    return FusionFilter(mode, state, 0.0, cfg)


def sat_state(sat_id, enu_dir, rng_m=2.2e7, snr=50.0):
    d = np.asarray(enu_dir, dtype=float)
    d = d / np.linalg.norm(d)
    pos = enu_to_ecef(d * rng_m, ANCHOR)
    return SatelliteState(sat_id, pos, 0.0, snr, L1)


SATS = [
    sat_state("G01", [0.0, 0.05, 1.0]),
    sat_state("G02", [0.8, 0.1, 0.6]),
    sat_state("G03", [-0.7, 0.4, 0.55]),
    sat_state("G04", [0.1, -0.9, 0.7]),
    sat_state("G05", [-0.2, -0.5, 0.5]),
]


def perfect_epoch(t=0.0, rcv_enu=(0.0, 0.0, 0.0), base_enu=None, amb_r=None, amb_b=None):
    """Noise-free epoch consistent with a receiver at `rcv_enu`."""
    rcv = enu_to_ecef(np.asarray(rcv_enu, dtype=float), ANCHOR)
    obs = []
    for st in SATS:
        rho = float(np.linalg.norm(st.position - rcv))
        n_r = (amb_r or {}).get(st.sat_id, 0.0)
        obs.append((GnssObservation(st.sat_id, rho, rho + L1 * n_r, carrier_valid=True), st))
    base_obs = None
    base_pos = None
    if base_enu is not None:
        base_pos = enu_to_ecef(np.asarray(base_enu, dtype=float), ANCHOR)
        base_obs = []
        for st in SATS:
            rho = float(np.linalg.norm(st.position - base_pos))
            n_b = (amb_b or {}).get(st.sat_id, 0.0)
            base_obs.append(GnssObservation(st.sat_id, rho, rho + L1 * n_b, carrier_valid=True))
    return GnssEpoch(t, obs, base_observations=base_obs, base_position=base_pos)


# --- SPP update -------------------------------------------------------------------

def test_zero_residual_no_change():
    filt = make_filter()
    epoch = perfect_epoch()
    filt.manage_gnss_states(epoch)
    report = filt.update_spp(epoch, {})
    assert report.correction_norm < 1e-9
    assert np.linalg.norm(filt.ins.position) < 1e-9
    assert report.residual_pre < 1e-6


def test_single_satellite_scalar_gain_oracle():
    filt = make_filter()
    # pin the clock so the slice is one-dimensional, then the posterior
    # position moves along the LOS by the scalar Kalman gain
    filt._insert_gnss_state("G", 0.0, 1e-9)
    epoch_full = perfect_epoch()
    eps = 0.5
    obs0, st0 = epoch_full.observations[1]  # G02, slanted LOS
    biased = GnssObservation(obs0.sat_id, obs0.pseudorange + eps, math.nan)
    epoch = GnssEpoch(0.0, [(biased, st0)])
    p0 = filt.cov[0, 0]
    var = gnss.observation_variance(
        SkyLabel.LOS, gnss.ObsKind.PSEUDORANGE,
        gnss.elevation_azimuth(st0.position, geodetic_to_ecef(ANCHOR), ANCHOR).elevation,
        st0.snr)
    report = filt.update_spp(epoch, {})
    assert not report.skipped
    rcv = geodetic_to_ecef(ANCHOR)
    u = st0.position - rcv
    u = u / np.linalg.norm(u)
    from canyonnav.geodesy import enu_matrix
    u_enu = enu_matrix(ANCHOR) @ u
    gain = p0 / (p0 + var)  # scalar oracle on the 1-D LOS slice
    expected = -u_enu * gain * eps
    np.testing.assert_allclose(filt.ins.position, expected, atol=1e-9)


def test_nlos_label_shrinks_correction():
    moves = {}
    for label in (SkyLabel.LOS, SkyLabel.NLOS):
        filt = make_filter()
        filt._insert_gnss_state("G", 0.0, 1e-9)
        epoch_full = perfect_epoch()
        obs0, st0 = epoch_full.observations[1]
        biased = GnssObservation(obs0.sat_id, obs0.pseudorange + 0.5, math.nan)
        filt.update_spp(GnssEpoch(0.0, [(biased, st0)]), {"G02": label})
        moves[label] = np.linalg.norm(filt.ins.position)
    assert moves[SkyLabel.NLOS] < moves[SkyLabel.LOS]


def test_all_gated_out_skips():
    filt = make_filter()
    epoch_full = perfect_epoch()
    filt.manage_gnss_states(epoch_full)
    # clock freshly whitened at 300 m: a 1e6 m outlier still fails the gate
    obs0, st0 = epoch_full.observations[0]
    crazy = GnssObservation(obs0.sat_id, obs0.pseudorange + 1.0e6, math.nan)
    report = filt.update_spp(GnssEpoch(0.0, [(crazy, st0)]), {})
    assert report.skipped
    assert report.rejected == ["G01"]
    assert np.linalg.norm(filt.ins.position) < 1e-12


def test_lever_arm_applied():
    lever = np.array([1.0, 0.5, 0.3])
    filt = make_filter(lever=lever)
    np.testing.assert_allclose(filt.antenna_position(), lever, atol=1e-12)
    epoch = perfect_epoch(rcv_enu=lever)
    filt.manage_gnss_states(epoch)
    report = filt.update_spp(epoch, {})
    assert report.correction_norm < 1e-9


# --- GNSS state management -----------------------------------------------------------

def test_spp_clock_reset_each_epoch():
    filt = make_filter()
    epoch = perfect_epoch()
    filt.manage_gnss_states(epoch)
    assert filt.gnss_dim == 1
    d0 = filt.dim
    idx = filt.gnss_index("G")
    assert filt.cov[idx, idx] == pytest.approx(300.0 ** 2)
    filt.update_spp(epoch, {})
    assert filt.cov[idx, idx] < 300.0 ** 2
    filt.manage_gnss_states(epoch)
    assert filt.dim == d0
    assert filt.cov[idx, idx] == pytest.approx(300.0 ** 2)
    assert np.all(filt.cov[idx, :idx] == 0.0)


def test_constellation_removed_when_absent():
    filt = make_filter()
    epoch = perfect_epoch()
    filt.manage_gnss_states(epoch)
    e_sat = sat_state("E07", [0.3, 0.3, 0.9])
    rho = float(np.linalg.norm(e_sat.position - geodetic_to_ecef(ANCHOR)))
    both = GnssEpoch(1.0, epoch.observations + [(GnssObservation("E07", rho), e_sat)])
    filt.manage_gnss_states(both)
    assert filt.gnss_dim == 2
    filt.manage_gnss_states(epoch)
    assert filt.gnss_dim == 1
    assert list(filt.gnss_states) == ["G"]


def rtk_epoch(amb_r=None, amb_b=None, t=0.0):
    return perfect_epoch(t=t, base_enu=(300.0, -150.0, 3.0), amb_r=amb_r, amb_b=amb_b)


def test_rtk_ambiguity_lifecycle():
    filt = make_filter(mode="rtk")
    amb_r = {s.sat_id: float(i * 7 + 3) for i, s in enumerate(SATS)}
    amb_b = {s.sat_id: float(i * 11 - 4) for i, s in enumerate(SATS)}
    epoch = rtk_epoch(amb_r, amb_b)
    dds = gnss.form_double_differences(epoch, geodetic_to_ecef(ANCHOR))
    filt.manage_gnss_states(epoch, dds)
    assert filt.gnss_dim == len(SATS) - 1
    for key, val in filt.gnss_states.items():
        ref, sid = key
        dd_n = (amb_r[sid] - amb_b[sid]) - (amb_r[ref] - amb_b[ref])
        assert val == pytest.approx(dd_n, abs=1e-6)
        idx = filt.gnss_index(key)
        assert filt.cov[idx, idx] == pytest.approx(100.0)
        assert np.all(filt.cov[idx, :idx] == 0.0)

    # lost satellite: dimension shrinks, remaining covariance is the submatrix
    pre = filt.cov.copy()
    keys_before = list(filt.gnss_states)
    lost = GnssEpoch(1.0, epoch.observations[:-1],
                     base_observations=epoch.base_observations[:-1],
                     base_position=epoch.base_position)
    dds2 = gnss.form_double_differences(lost, geodetic_to_ecef(ANCHOR))
    filt.manage_gnss_states(lost, dds2)
    assert filt.gnss_dim == len(SATS) - 2
    gone = [k for k in keys_before if k not in filt.gnss_states]
    assert gone == [("G01", "G05")]
    gone_idx = 15 + keys_before.index(gone[0])
    keep = [i for i in range(pre.shape[0]) if i != gone_idx]
    np.testing.assert_array_equal(filt.cov, pre[np.ix_(keep, keep)])


def test_rtk_zero_residual_no_change():
    filt = make_filter(mode="rtk")
    amb_r = {s.sat_id: float(i * 5 + 1) for i, s in enumerate(SATS)}
    epoch = rtk_epoch(amb_r, None)
    dds = gnss.form_double_differences(epoch, geodetic_to_ecef(ANCHOR))
    filt.manage_gnss_states(epoch, dds)
    report = filt.update_rtk(epoch, dds)
    assert not report.skipped
    assert np.linalg.norm(filt.ins.position) < 1e-7
    assert report.residual_pre < 1e-6


def test_rtk_carrier_bias_absorbed_by_ambiguity():
    # constant carrier bias on one satellite: absorbed into that pair's
    # ambiguity, position asymptotically unaffected (zero-noise chain)
    filt = make_filter(mode="rtk")
    bias_m = 0.7
    for k in range(30):
        epoch = rtk_epoch(t=float(k))
        biased_obs = []
        for obs, st in epoch.observations:
            if obs.sat_id == "G03":
                obs = GnssObservation(obs.sat_id, obs.pseudorange,
                                      obs.carrier + bias_m, carrier_valid=True)
            biased_obs.append((obs, st))
        epoch = GnssEpoch(epoch.time, biased_obs,
                          base_observations=epoch.base_observations,
                          base_position=epoch.base_position)
        dds = gnss.form_double_differences(epoch, filt.antenna_ecef())
        filt.manage_gnss_states(epoch, dds)
        filt.update_rtk(epoch, dds)
    assert np.linalg.norm(filt.ins.position) < 1e-3
    key = ("G01", "G03")
    assert filt.gnss_states[key] == pytest.approx(bias_m / L1, abs=1e-2)


def test_reference_switch_preserves_estimates():
    filt = make_filter(mode="rtk")
    amb_r = {s.sat_id: float(i * 7 + 3) for i, s in enumerate(SATS)}
    amb_b = {s.sat_id: float(i * 2 - 9) for i, s in enumerate(SATS)}
    epoch = rtk_epoch(amb_r, amb_b)
    dds = gnss.form_double_differences(epoch, geodetic_to_ecef(ANCHOR))
    filt.manage_gnss_states(epoch, dds)
    filt.update_rtk(epoch, dds)
    # force a switch by relabelling the old reference NLOS
    labels = {"G01": SkyLabel.NLOS}
    dds2 = gnss.form_double_differences(epoch, geodetic_to_ecef(ANCHOR), labels)
    new_ref = dds2[0].ref_id
    assert new_ref != "G01"
    expected = {}
    for d in dds2:
        dd_n = (amb_r[d.sat_id] - amb_b[d.sat_id]) - (amb_r[new_ref] - amb_b[new_ref])
        expected[(new_ref, d.sat_id)] = dd_n
    filt.manage_gnss_states(epoch, dds2)
    assert set(filt.gnss_states) == set(expected)
    for key, val in expected.items():
        assert filt.gnss_states[key] == pytest.approx(val, abs=1e-3)
    report = filt.update_rtk(epoch, dds2)
    assert report.correction_norm < 1e-3


def test_slip_resets_ambiguity():
    filt = make_filter(mode="rtk")
    epoch = rtk_epoch()
    dds = gnss.form_double_differences(epoch, geodetic_to_ecef(ANCHOR))
    filt.manage_gnss_states(epoch, dds)
    filt.update_rtk(epoch, dds)
    key = ("G01", "G02")
    idx = filt.gnss_index(key)
    assert filt.cov[idx, idx] < 100.0
    slipped = [gnss.DdObservation(**{**d.__dict__, "slip": d.sat_id == "G02"}) for d in dds]
    filt.manage_gnss_states(epoch, slipped)
    idx = filt.gnss_index(key)
    assert filt.cov[idx, idx] == pytest.approx(100.0)


# --- vision update ---------------------------------------------------------------------

def test_vision_empty_stack_noop():
    filt = make_filter()
    pos = filt.ins.position.copy()
    report = filt.update_vision([])
    assert report.skipped
    np.testing.assert_array_equal(filt.ins.position, pos)


def test_vision_zero_residual_no_state_change():
    filt = make_filter()
    filt.augment_clone(0, 0.0)
    filt.augment_clone(1, 0.1)
    rng = np.random.default_rng(3)
    h0 = rng.normal(size=(5, 12))
    report = filt.update_vision([(np.zeros(5), h0, [0, 1])])
    assert not report.skipped
    assert report.correction_norm < 1e-12
    assert np.linalg.norm(filt.ins.position) < 1e-12


def test_window_dimension_bookkeeping():
    filt = make_filter()
    epoch = perfect_epoch()
    filt.manage_gnss_states(epoch)
    for cid in range(5):
        filt.augment_clone(cid, cid * 0.1)
    assert filt.dim == 15 + 1 + 6 * 5
    assert filt.cov.shape == (filt.dim, filt.dim)
    filt.remove_clone(filt.marginalization_victim())
    assert filt.dim == 15 + 1 + 6 * 4
    assert list(filt.clones) == [0, 2, 3, 4]


def test_augment_new_block_equals_pose_cov_for_identity_extrinsics():
    cfg = FilterConfig(anchor=ANCHOR, extrinsics=ExtrinsicSet(
        np.eye(3), np.zeros(3), np.eye(3), np.array([0.12, 0.0, 0.0])))
    filt = FusionFilter("spp", InsState(np.zeros(3), np.zeros(3), Attitude.identity()), 0.0, cfg)
    rng = np.random.default_rng(9)
    a = rng.normal(size=(15, 15))
    filt.cov = a @ a.T + np.eye(15)
    p = filt.cov.copy()
    filt.augment_clone(0, 0.0)
    sl = filt.clone_slice(0)
    idx = [6, 7, 8, 0, 1, 2]  # clone order [dtheta, dp] vs INS [dp .. dtheta]
    np.testing.assert_allclose(filt.cov[sl, sl][np.ix_(range(6), range(6))],
                               p[np.ix_(idx, idx)], atol=1e-12)


# --- covariance health ------------------------------------------------------------------

def test_covariance_stays_symmetric_psd_through_mixed_updates():
    filt = make_filter()
    rng = np.random.default_rng(17)
    static = np.array([0.0, 0.0, -9.80665])
    cid = 0
    for k in range(200):
        t = k * 0.01
        gyro = rng.normal(scale=0.05, size=3)
        accel = static + rng.normal(scale=0.1, size=3)
        filt.propagate(ImuSample(t, gyro, accel), ImuSample(t + 0.01, gyro, accel))
        if k % 20 == 0:
            filt.augment_clone(cid, t)
            cid += 1
            if len(filt.clones) > 4:
                filt.remove_clone(filt.marginalization_victim())
        if k % 25 == 0:
            epoch = perfect_epoch(t=t)
            filt.manage_gnss_states(epoch)
            filt.update_spp(epoch, {})
    filt.flush_propagation()
    np.testing.assert_allclose(filt.cov, filt.cov.T, atol=0)
    assert np.linalg.eigvalsh(filt.cov).min() > -1e-10 * np.trace(filt.cov)


def test_gain_monotonicity_on_random_slices():
    # increasing a measurement's variance never increases the variance
    # reduction that measurement delivers
    rng = np.random.default_rng(23)
    for _ in range(50):
        filt = make_filter()
        a = rng.normal(size=(15, 15)) * 1e-3
        filt.cov = a @ a.T + 1e-4 * np.eye(15)
        h = np.zeros((1, filt.dim))
        h[0, :] = rng.normal(size=filt.dim)
        r = np.array([rng.normal(scale=1e-3)])
        tr0 = np.trace(filt.cov)
        reductions = []
        for scale in (1.0, 10.0):
            f2 = copy.deepcopy(filt)
            f2._apply_update(h, r, np.array([[1e-4 * scale]]))
            reductions.append(tr0 - np.trace(f2.cov))
        assert reductions[1] <= reductions[0] + 1e-15
