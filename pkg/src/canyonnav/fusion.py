"""Tightly coupled GNSS/INS/vision error-state filter.

Full error state, in this order:

    [ INS (15) | GNSS (y) | camera clones (6 each) ]

The GNSS sub-state depends on the positioning mode: per-constellation
receiver clock offsets in metres (absolute pseudorange mode, re-initialized
every epoch as white noise) or double-difference float carrier ambiguities
in cycles (relative carrier mode; no integer fixing). Clone errors are
[dtheta, dp] per clone, matching the vision module.

All measurement updates use the Joseph form, innovation chi-square gating,
and fold the estimated error into the nominal states immediately, so the
stored error state is always zero. The filter is a single-owner sequential
state machine; snapshots handed out for logging are copies.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import gnss as gnss_mod
from . import ins as ins_mod
from . import vision as vision_mod
from .errors import EmptyEpochError, NumericalError
from .geodesy import Attitude, GeodeticPosition, ecef_to_enu, enu_matrix, enu_to_ecef, geodetic_to_ecef, skew
from .gnss import GnssEpoch, ObsKind, SkyLabel, StochasticConfig
from .ins import INS_DIM, ImuSample, InsState, ProcessNoiseConfig
from .vision import CLONE_DIM, CameraClone, ExtrinsicSet

MODE_SPP = "spp"
MODE_RTK = "rtk"


@dataclass(frozen=True)
class FilterConfig:
    anchor: GeodeticPosition
    extrinsics: ExtrinsicSet
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    window_size: int = 20
    pixel_sigma: float = 1e-3          # normalized-plane units
    stochastic: StochasticConfig = StochasticConfig()
    process_noise: ProcessNoiseConfig = ProcessNoiseConfig()
    clock_prior_sigma: float = 300.0   # metres
    ambiguity_prior_sigma: float = 10.0  # cycles
    gnss_gate_prob: float = 0.99
    vision_gate_prob: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "lever_arm", np.asarray(self.lever_arm, dtype=float))


@dataclass
class UpdateReport:
    """Per-update diagnostics emitted to the run log."""

    time: float
    kind: str                      # "spp" | "rtk" | "vision"
    n_los: int = 0
    n_nlos: int = 0
    n_out: int = 0
    used: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    residual_pre: float = 0.0
    residual_post: float = 0.0
    correction_norm: float = 0.0
    skipped: bool = False
    pdop: float = math.nan

    def to_dict(self) -> dict:
        return {
            "time": self.time, "kind": self.kind,
            "n_los": self.n_los, "n_nlos": self.n_nlos, "n_out": self.n_out,
            "used": list(self.used), "rejected": list(self.rejected),
            "residual_pre": self.residual_pre, "residual_post": self.residual_post,
            "correction_norm": self.correction_norm, "skipped": self.skipped,
            "pdop": None if math.isnan(self.pdop) else self.pdop,
        }


def count_labels(labels: dict[str, SkyLabel]) -> tuple[int, int, int]:
    vals = list(labels.values())
    return (sum(v == SkyLabel.LOS for v in vals), sum(v == SkyLabel.NLOS for v in vals),
            sum(v == SkyLabel.OUT_OF_IMAGE for v in vals))


class FusionFilter:
    """Error-state filter over INS, GNSS and camera-clone sub-states."""

    def __init__(self, mode: str, ins_state: InsState, time: float, cfg: FilterConfig,
                 init_sigmas: dict | None = None):
        if mode not in (MODE_SPP, MODE_RTK):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.cfg = cfg
        self.ins = ins_state
        self.time = time
        self.anchor_ecef = geodetic_to_ecef(cfg.anchor)
        self.enu = enu_matrix(cfg.anchor)
        # GNSS sub-state: ordered key -> value (clock metres or ambiguity cycles)
        self.gnss_states: OrderedDict = OrderedDict()
        self.clones: OrderedDict[int, CameraClone] = OrderedDict()
        sig = {"pos": 0.05, "vel": 0.05, "att": 0.005, "ba": 0.02, "bw": 0.002}
        sig.update(init_sigmas or {})
        diag = np.repeat([sig["pos"], sig["vel"], sig["att"], sig["ba"], sig["bw"]], 3) ** 2
        self.cov = np.diag(diag)
        # propagation accumulators (applied lazily at measurement events)
        self._phi_acc = np.eye(INS_DIM)
        self._qd_acc = np.zeros((INS_DIM, INS_DIM))
        self._dirty = False
        self._gate_cache: dict[tuple[float, int], float] = {}
        self.mask_warnings = 0

    # --- layout helpers ---------------------------------------------------------

    @property
    def gnss_dim(self) -> int:
        return len(self.gnss_states)

    @property
    def dim(self) -> int:
        return INS_DIM + self.gnss_dim + CLONE_DIM * len(self.clones)

    def gnss_index(self, key) -> int:
        for i, k in enumerate(self.gnss_states):
            if k == key:
                return INS_DIM + i
        raise KeyError(key)

    def clone_slice(self, clone_id: int) -> slice:
        base = INS_DIM + self.gnss_dim
        for i, cid in enumerate(self.clones):
            if cid == clone_id:
                return slice(base + CLONE_DIM * i, base + CLONE_DIM * (i + 1))
        raise KeyError(clone_id)

    def _gate(self, prob: float, dof: int) -> float:
        key = (prob, dof)
        if key not in self._gate_cache:
            self._gate_cache[key] = float(chi2.ppf(prob, dof))
        return self._gate_cache[key]

    # --- propagation --------------------------------------------------------------

    def propagate(self, s0: ImuSample, s1: ImuSample) -> None:
        """Mechanize one IMU interval and accumulate the covariance transition."""
        f = ins_mod.build_error_dynamics(self.ins, s0)
        g = ins_mod.noise_input_matrix(self.ins)
        phi, qd = ins_mod.discrete_transition(f, g, self.cfg.process_noise.diagonal(),
                                              s1.time - s0.time)
        self.ins = ins_mod.mechanize_step(self.ins, s0, s1)
        self.time = s1.time
        self._phi_acc = phi @ self._phi_acc
        self._qd_acc = phi @ self._qd_acc @ phi.T + qd
        self._dirty = True

    def flush_propagation(self) -> None:
        """Apply accumulated transition/noise to the full covariance."""
        if not self._dirty:
            return
        self.cov = ins_mod.propagate_covariance(self.cov, self._phi_acc, self._qd_acc)
        self._phi_acc = np.eye(INS_DIM)
        self._qd_acc = np.zeros((INS_DIM, INS_DIM))
        self._dirty = False

    # --- state insertion/removal ----------------------------------------------------

    def _insert_gnss_state(self, key, value: float, prior_sigma: float) -> None:
        idx = INS_DIM + self.gnss_dim  # append at the end of the GNSS block
        self.gnss_states[key] = value
        n = self.cov.shape[0]
        cov = np.zeros((n + 1, n + 1))
        cov[:idx, :idx] = self.cov[:idx, :idx]
        cov[:idx, idx + 1:] = self.cov[:idx, idx:]
        cov[idx + 1:, :idx] = self.cov[idx:, :idx]
        cov[idx + 1:, idx + 1:] = self.cov[idx:, idx:]
        cov[idx, idx] = prior_sigma ** 2
        self.cov = cov

    def _remove_indices(self, idx: list[int]) -> None:
        self.cov = np.delete(np.delete(self.cov, idx, axis=0), idx, axis=1)

    def _remove_gnss_state(self, key) -> None:
        idx = self.gnss_index(key)
        del self.gnss_states[key]
        self._remove_indices([idx])

    def reset_gnss_state(self, key, value: float, prior_sigma: float) -> None:
        """Whiten one GNSS state: zero cross-covariance, prior variance."""
        idx = self.gnss_index(key)
        self.gnss_states[key] = value
        self.cov[idx, :] = 0.0
        self.cov[:, idx] = 0.0
        self.cov[idx, idx] = prior_sigma ** 2

    # --- camera window ----------------------------------------------------------------

    def augment_clone(self, clone_id: int, time: float) -> CameraClone:
        """Insert the current camera pose as a new clone (covariance grows by 6)."""
        self.flush_propagation()
        rot, pos = vision_mod.clone_pose_from_ins(self.ins, self.cfg.extrinsics)
        clone = CameraClone(clone_id, time, rot, pos)
        j = np.zeros((CLONE_DIM, self.dim))
        j[:, :INS_DIM] = vision_mod.augment_jacobian(self.ins, self.cfg.extrinsics)
        rows = j @ self.cov
        diag = rows @ j.T
        n = self.cov.shape[0]
        cov = np.zeros((n + CLONE_DIM, n + CLONE_DIM))
        cov[:n, :n] = self.cov
        cov[n:, :n] = rows
        cov[:n, n:] = rows.T
        cov[n:, n:] = diag
        self.cov = 0.5 * (cov + cov.T)
        self.clones[clone_id] = clone
        return clone

    def remove_clone(self, clone_id: int) -> None:
        sl = self.clone_slice(clone_id)
        del self.clones[clone_id]
        self._remove_indices(list(range(sl.start, sl.stop)))

    def marginalization_victim(self) -> int:
        """Clone to drop when the window is full: the second oldest."""
        ids = list(self.clones)
        return ids[1] if len(ids) > 1 else ids[0]

    # --- generic Joseph update --------------------------------------------------------

    def _apply_update(self, h: np.ndarray, r: np.ndarray, r_cov: np.ndarray) -> np.ndarray:
        s = h @ self.cov @ h.T + r_cov
        try:
            k = np.linalg.solve(s, h @ self.cov).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular innovation covariance") from exc
        dx = k @ r
        i_kh = np.eye(self.dim) - k @ h
        self.cov = i_kh @ self.cov @ i_kh.T + k @ r_cov @ k.T
        self.cov = 0.5 * (self.cov + self.cov.T)
        self._fold(dx)
        return dx

    def _fold(self, dx: np.ndarray) -> None:
        self.ins = self.ins.correct(dx[:INS_DIM])
        for i, key in enumerate(self.gnss_states):
            self.gnss_states[key] += dx[INS_DIM + i]
        base = INS_DIM + self.gnss_dim
        for i, (cid, clone) in enumerate(self.clones.items()):
            dth = dx[base + CLONE_DIM * i: base + CLONE_DIM * i + 3]
            dp = dx[base + CLONE_DIM * i + 3: base + CLONE_DIM * i + 6]
            self.clones[cid] = CameraClone(
                cid, clone.time,
                clone.rot @ Attitude.from_rotvec(dth).matrix(), clone.pos + dp)

    # --- geometry helpers ---------------------------------------------------------------

    def antenna_position(self) -> np.ndarray:
        """GNSS antenna position in the navigation frame (lever arm applied)."""
        return self.ins.position + self.ins.attitude.matrix() @ self.cfg.lever_arm

    def antenna_ecef(self) -> np.ndarray:
        return enu_to_ecef(self.antenna_position(), self.cfg.anchor)

    def vehicle_yaw(self) -> float:
        """Azimuth of the body forward (x) axis, clockwise from North."""
        fwd = self.ins.attitude.matrix()[:, 0]
        return math.atan2(fwd[0], fwd[1]) % (2.0 * math.pi)

    def _los_row(self, sat_pos_ecef: np.ndarray, antenna_ecef: np.ndarray) -> np.ndarray:
        """Geometry row (w.r.t. dp and dtheta) for one range measurement."""
        diff = sat_pos_ecef - antenna_ecef
        u_enu = self.enu @ (diff / np.linalg.norm(diff))
        row = np.zeros(self.dim)
        row[ins_mod.SLC_P] = -u_enu
        row[ins_mod.SLC_TH] = u_enu @ (self.ins.attitude.matrix() @ skew(self.cfg.lever_arm))
        return row

    @staticmethod
    def _pdop(rows: list[np.ndarray]) -> float:
        if len(rows) < 4:
            return math.nan
        geom = np.array([np.concatenate([r[0:3], [1.0]]) for r in rows])
        try:
            q = np.linalg.inv(geom.T @ geom)
        except np.linalg.LinAlgError:
            return math.nan
        return float(math.sqrt(max(0.0, q[0, 0] + q[1, 1] + q[2, 2])))

    # --- GNSS state management -----------------------------------------------------------

    def manage_gnss_states(self, epoch: GnssEpoch,
                           dds: list[gnss_mod.DdObservation] | None = None) -> None:
        """Add/remove/reset GNSS sub-states ahead of an epoch's update.

        Absolute mode: per-constellation receiver clocks are epoch-white, so
        each present constellation's clock is re-initialized (value 0, prior
        sigma from config) and absent ones are removed. Relative mode: one
        float ambiguity per current DD pair; new pairs enter with the
        configured prior, lost pairs are dropped, slips and reference
        switches are handled by `dds` content.
        """
        if self.mode == MODE_SPP:
            present = {obs.sat_id[0] for obs, _ in epoch.observations if obs.code_valid}
            for key in [k for k in self.gnss_states if k not in present]:
                self._remove_gnss_state(key)
            for const in sorted(present):
                if const in self.gnss_states:
                    self.reset_gnss_state(const, 0.0, self.cfg.clock_prior_sigma)
                else:
                    self._insert_gnss_state(const, 0.0, self.cfg.clock_prior_sigma)
            return

        dds = dds or []
        if dds:
            new_ref = dds[0].ref_id
            old_refs = {k[0] for k in self.gnss_states}
            if old_refs and new_ref not in old_refs:
                self._switch_reference(new_ref)
        current = {(d.ref_id, d.sat_id) for d in dds}
        for key in [k for k in self.gnss_states if k not in current]:
            self._remove_gnss_state(key)
        self.flush_propagation()
        preds = {p[0].sat_id: p[1]
                 for p in self._dd_predictions(dds, epoch, self.antenna_ecef())} if dds else {}
        for d in dds:
            key = (d.ref_id, d.sat_id)
            if d.slip and key in self.gnss_states:
                self._remove_gnss_state(key)
            if key not in self.gnss_states:
                init = self._ambiguity_init(d, preds.get(d.sat_id))
                self._insert_gnss_state(key, init, self.cfg.ambiguity_prior_sigma)

    def _ambiguity_init(self, d: gnss_mod.DdObservation, dd_rho_pred: float | None) -> float:
        """Float ambiguity seed from the INS-predicted DD range (falls back to code)."""
        if not math.isfinite(d.dd_carrier):
            return 0.0
        ref = dd_rho_pred if dd_rho_pred is not None else d.dd_pseudorange
        return (d.dd_carrier - ref) / d.wavelength

    def _switch_reference(self, new_ref: str) -> None:
        """Re-key ambiguities to a new reference satellite by differencing.

        N(new_ref, i) = N(old_ref, i) - N(old_ref, new_ref); the linear map is
        applied to values and covariance, preserving the joint distribution.
        """
        keys = list(self.gnss_states)
        old_ref = keys[0][0]
        pivot = (old_ref, new_ref)
        if pivot not in self.gnss_states:
            for key in keys:
                self._remove_gnss_state(key)
            return
        y = len(keys)
        new_keys, new_rows = [], []
        pivot_col = keys.index(pivot)
        for i, (_, sid) in enumerate(keys):
            row = np.zeros(y)
            row[pivot_col] = -1.0
            if sid == new_ref:
                new_keys.append((new_ref, old_ref))
            else:
                row[i] = 1.0
                new_keys.append((new_ref, sid))
            new_rows.append(row)
        t = np.array(new_rows)
        values = np.array([self.gnss_states[k] for k in keys])
        new_values = t @ values
        sl = slice(INS_DIM, INS_DIM + y)
        self.cov[sl, :] = t @ self.cov[sl, :]
        self.cov[:, sl] = self.cov[:, sl] @ t.T
        self.gnss_states = OrderedDict(zip(new_keys, new_values))

    # --- measurement updates ----------------------------------------------------------------

    def update_spp(self, epoch: GnssEpoch, labels: dict[str, SkyLabel] | None = None
                   ) -> UpdateReport:
        """Pseudorange update with sky-label-driven measurement weighting."""
        self.flush_propagation()
        labels = labels or {}
        report = UpdateReport(epoch.time, MODE_SPP)
        report.n_los, report.n_nlos, report.n_out = count_labels(labels)
        ant_ecef = self.antenna_ecef()
        ant_geo = self.cfg.anchor

        rows, residuals, variances, ids = [], [], [], []
        for obs, sat in epoch.observations:
            if not obs.code_valid:
                continue
            try:
                ea = gnss_mod.elevation_azimuth(sat.position, ant_ecef, ant_geo)
            except gnss_mod.BelowHorizonError:
                continue
            if ea.elevation <= 0.0:
                continue
            label = labels.get(obs.sat_id, SkyLabel.LOS)
            iono, tropo = epoch.atmosphere.get(obs.sat_id, (0.0, 0.0))
            clock = self.gnss_states.get(obs.sat_id[0], 0.0)
            pred = gnss_mod.predict_pseudorange(ant_ecef, clock, sat, iono, tropo)
            row = self._los_row(sat.position, ant_ecef)
            row[self.gnss_index(obs.sat_id[0])] = 1.0
            rows.append(row)
            residuals.append(obs.pseudorange - pred)
            variances.append(gnss_mod.observation_variance(
                label, ObsKind.PSEUDORANGE, ea.elevation, sat.snr, self.cfg.stochastic))
            ids.append(obs.sat_id)
        if not rows:
            report.skipped = True
            return report

        gate = self._gate(self.cfg.gnss_gate_prob, 1)
        keep = []
        for i, row in enumerate(rows):
            s_i = row @ self.cov @ row + variances[i]
            if residuals[i] ** 2 / s_i <= gate:
                keep.append(i)
            else:
                report.rejected.append(ids[i])
        if not keep:
            report.skipped = True
            return report

        h = np.array([rows[i] for i in keep])
        r = np.array([residuals[i] for i in keep])
        r_cov = np.diag([variances[i] for i in keep])
        report.used = [ids[i] for i in keep]
        report.residual_pre = float(np.linalg.norm(r))
        report.pdop = self._pdop([rows[i] for i in keep])
        dx = self._apply_update(h, r, r_cov)
        report.correction_norm = float(np.linalg.norm(dx))

        ant_ecef = self.antenna_ecef()
        post = []
        for i in keep:
            obs, sat = next(p for p in epoch.observations if p[0].sat_id == ids[i])
            iono, tropo = epoch.atmosphere.get(ids[i], (0.0, 0.0))
            clock = self.gnss_states.get(ids[i][0], 0.0)
            post.append(obs.pseudorange - gnss_mod.predict_pseudorange(ant_ecef, clock, sat, iono, tropo))
        report.residual_post = float(np.linalg.norm(post))
        return report

    def _dd_predictions(self, dds, epoch: GnssEpoch, ant_ecef: np.ndarray):
        """Predicted DD pseudorange/carrier and geometry rows per pair."""
        base_pos = epoch.base_position
        sat_pos = {obs.sat_id: st.position for obs, st in epoch.observations}
        atmo_r = epoch.atmosphere

        def sd_geometry(sid):
            rho_r = float(np.linalg.norm(sat_pos[sid] - ant_ecef))
            rho_b = float(np.linalg.norm(sat_pos[sid] - base_pos))
            return rho_r - rho_b

        # short-baseline: rover and base atmospheric terms are identical in
        # the simulated bundles, so they cancel in the double difference;
        # real-data adapters pre-correct differential atmosphere.
        del atmo_r
        out = []
        ref = dds[0].ref_id
        sd_ref = sd_geometry(ref)
        row_ref = self._los_row(sat_pos[ref], ant_ecef)
        for d in dds:
            dd_rho = sd_geometry(d.sat_id) - sd_ref
            row = self._los_row(sat_pos[d.sat_id], ant_ecef) - row_ref
            out.append((d, dd_rho, dd_rho, row))
        return out

    def update_rtk(self, epoch: GnssEpoch, dds: list[gnss_mod.DdObservation]) -> UpdateReport:
        """Double-difference pseudorange + float-ambiguity carrier update."""
        self.flush_propagation()
        report = UpdateReport(epoch.time, MODE_RTK)
        if not dds:
            report.skipped = True
            return report
        labels = {d.sat_id: d.label for d in dds}
        labels[dds[0].ref_id] = dds[0].ref_label
        report.n_los, report.n_nlos, report.n_out = count_labels(labels)

        ant_ecef = self.antenna_ecef()
        preds = self._dd_predictions(dds, epoch, ant_ecef)

        code_rows, code_res, code_dds = [], [], []
        carr_rows, carr_res, carr_dds = [], [], []
        for d, code_pred, carr_pred, row in preds:
            code_rows.append(row)
            code_res.append(d.dd_pseudorange - code_pred)
            code_dds.append(d)
            key = (d.ref_id, d.sat_id)
            if math.isfinite(d.dd_carrier) and key in self.gnss_states:
                crow = row.copy()
                crow[self.gnss_index(key)] = d.wavelength
                carr_rows.append(crow)
                carr_res.append(d.dd_carrier - carr_pred - d.wavelength * self.gnss_states[key])
                carr_dds.append(d)

        r_code = gnss_mod.dd_covariance(code_dds, ObsKind.PSEUDORANGE, self.cfg.stochastic)
        r_carr = gnss_mod.dd_covariance(carr_dds, ObsKind.CARRIER, self.cfg.stochastic)

        # per-row gate on the innovation variance (dense R: use its diagonal)
        gate = self._gate(self.cfg.gnss_gate_prob, 1)
        keep_c, keep_l = [], []
        for i, row in enumerate(code_rows):
            s_i = row @ self.cov @ row + r_code[i, i]
            if code_res[i] ** 2 / s_i <= gate:
                keep_c.append(i)
            else:
                report.rejected.append(("code", code_dds[i].sat_id))
        for i, row in enumerate(carr_rows):
            s_i = row @ self.cov @ row + r_carr[i, i]
            if carr_res[i] ** 2 / s_i <= gate:
                keep_l.append(i)
            else:
                report.rejected.append(("carrier", carr_dds[i].sat_id))
        if not keep_c and not keep_l:
            report.skipped = True
            return report

        h = np.array([code_rows[i] for i in keep_c] + [carr_rows[i] for i in keep_l])
        r = np.array([code_res[i] for i in keep_c] + [carr_res[i] for i in keep_l])
        nc = len(keep_c)
        r_cov = np.zeros((nc + len(keep_l), nc + len(keep_l)))
        r_cov[:nc, :nc] = r_code[np.ix_(keep_c, keep_c)]
        r_cov[nc:, nc:] = r_carr[np.ix_(keep_l, keep_l)]
        report.used = [code_dds[i].sat_id for i in keep_c]
        report.residual_pre = float(np.linalg.norm(r))
        report.pdop = self._pdop([code_rows[i] for i in keep_c])
        dx = self._apply_update(h, r, r_cov)
        report.correction_norm = float(np.linalg.norm(dx))
        report.residual_post = float(np.linalg.norm(r - h @ dx))
        return report

    def update_vision(self, stacks: list[tuple[np.ndarray, np.ndarray, list[int]]]
                      ) -> UpdateReport:
        """Joint update from per-feature null-space-projected residual stacks.

        Each stack is (r0, H0, clone_ids) with H0 columns grouped per clone.
        Features failing the chi-square gate are dropped; tall stacks are
        QR-compressed before the gain computation.
        """
        self.flush_propagation()
        report = UpdateReport(self.time, "vision")
        rows, res = [], []
        sigma2 = self.cfg.pixel_sigma ** 2
        for r0, h0, clone_ids in stacks:
            h_full = np.zeros((h0.shape[0], self.dim))
            for j, cid in enumerate(clone_ids):
                h_full[:, self.clone_slice(cid)] = h0[:, CLONE_DIM * j: CLONE_DIM * (j + 1)]
            s = h_full @ self.cov @ h_full.T + sigma2 * np.eye(len(r0))
            gamma = float(r0 @ np.linalg.solve(s, r0))
            if gamma > self._gate(self.cfg.vision_gate_prob, len(r0)):
                report.rejected.append(len(r0))
                continue
            rows.append(h_full)
            res.append(r0)
        if not rows:
            report.skipped = True
            return report
        h = np.vstack(rows)
        r = np.concatenate(res)
        if h.shape[0] > self.dim:  # QR compression of the tall stack
            q, rr = np.linalg.qr(h)
            h = rr
            r = q.T @ r
        report.used = [len(r)]
        report.residual_pre = float(np.linalg.norm(r))
        dx = self._apply_update(h, r, sigma2 * np.eye(h.shape[0]))
        report.correction_norm = float(np.linalg.norm(dx))
        report.residual_post = float(np.linalg.norm(r - h @ dx))
        return report
