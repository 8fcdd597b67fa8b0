"""Sliding-window stereo visual constraints.

Camera clones store the LEFT camera pose in the navigation frame
(rotation R^n_c taking camera vectors to nav, position p^n_c). A feature
at p^n projects through

    p_left  = (R^n_c)^T (p^n - p^n_c)
    p_right = R^{c1}_{c0} (p_left - p^{c0}_{c1})

onto normalized image planes z = (X/Z, Y/Z) for each camera, stacked as
(u0, v0, u1, v1) per clone. Clone error states are ordered [dtheta, dp]
with right-multiplicative attitude errors.

Feature positions never enter the filter state: their stacked residuals are
projected onto the left null space of the feature Jacobian, leaving
constraints on the clone poses only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateGeometryError
from .geodesy import skew
from .ins import SLC_P, SLC_TH, InsState

CLONE_DIM = 6
MIN_BASELINE = 0.05        # metres between observing clone centres
MIN_RAY_ANGLE = 1e-6       # rad; smaller parallax is degenerate
MIN_DEPTH = 0.1            # metres; closer features are excluded
MIN_STACK_ROWS = 7
REPROJ_RMS_GATE = 0.01     # normalized-plane units


@dataclass(frozen=True)
class CameraClone:
    """Left-camera pose snapshot kept in the sliding window."""

    clone_id: int
    time: float
    rot: np.ndarray   # R^n_c
    pos: np.ndarray   # p^n_c

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float))
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))


@dataclass(frozen=True)
class ExtrinsicSet:
    """Camera-IMU and stereo extrinsics, calibrated offline."""

    r_bc: np.ndarray      # camera-to-body rotation R^b_c
    p_bc: np.ndarray      # left camera origin in the body frame
    r_c1c0: np.ndarray    # left-to-right rotation R^{c1}_{c0}
    p_c0c1: np.ndarray    # right camera origin in the left camera frame

    def __post_init__(self):
        for name in ("r_bc", "p_bc", "r_c1c0", "p_c0c1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for rot in (self.r_bc, self.r_c1c0):
            if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
                raise ValueError("extrinsic rotation is not orthonormal")
        baseline = np.linalg.norm(self.p_c0c1)
        if not (0.01 < baseline < 2.0):
            raise ValueError(f"stereo baseline {baseline:.3f} m outside (0.01, 2)")


@dataclass
class FeatureTrack:
    """Normalized stereo observations of one feature, keyed by clone id."""

    feature_id: int
    observations: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, clone_id: int, z: np.ndarray) -> None:
        self.observations[clone_id] = np.asarray(z, dtype=float)

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True)
class TriangulatedFeature:
    position: np.ndarray
    converged: bool
    reproj_rms: float


def clone_pose_from_ins(state: InsState, extr: ExtrinsicSet) -> tuple[np.ndarray, np.ndarray]:
    """Left camera pose implied by the IMU pose and extrinsics."""
    r_nb = state.attitude.matrix()
    return r_nb @ extr.r_bc, state.position + r_nb @ extr.p_bc


def augment_jacobian(state: InsState, extr: ExtrinsicSet) -> np.ndarray:
    """6x15 Jacobian of the new clone's [dtheta_c, dp_c] w.r.t. INS errors.

    dtheta_c = (R^b_c)^T dtheta;  dp_c = dp - R^n_b skew(p^b_c) dtheta.
    """
    j = np.zeros((CLONE_DIM, 15))
    j[0:3, SLC_TH] = extr.r_bc.T
    j[3:6, SLC_P] = np.eye(3)
    j[3:6, SLC_TH] = -state.attitude.matrix() @ skew(extr.p_bc)
    return j


def _right_camera_pose(clone: CameraClone, extr: ExtrinsicSet) -> tuple[np.ndarray, np.ndarray]:
    return clone.rot @ extr.r_c1c0.T, clone.pos + clone.rot @ extr.p_c0c1


def stereo_project(point: np.ndarray, clone: CameraClone, extr: ExtrinsicSet) -> tuple[np.ndarray, float, float]:
    """Project a nav-frame point; returns (u0, v0, u1, v1) and both depths."""
    p_left = clone.rot.T @ (point - clone.pos)
    p_right = extr.r_c1c0 @ (p_left - extr.p_c0c1)
    return (np.array([p_left[0] / p_left[2], p_left[1] / p_left[2],
                      p_right[0] / p_right[2], p_right[1] / p_right[2]]),
            p_left[2], p_right[2])


def _observing_cameras(track: FeatureTrack, clones: Mapping[int, CameraClone],
                       extr: ExtrinsicSet):
    """(world-to-camera rotation, centre, measurement) per camera per clone."""
    cams = []
    for cid in sorted(track.observations):
        if cid not in clones:
            continue
        clone = clones[cid]
        z = track.observations[cid]
        cams.append((clone.rot.T, clone.pos, z[0:2]))
        r_nc1, p_nc1 = _right_camera_pose(clone, extr)
        cams.append((r_nc1.T, p_nc1, z[2:4]))
    return cams


def triangulate(track: FeatureTrack, clones: Mapping[int, CameraClone],
                extr: ExtrinsicSet, max_iter: int = 10, step_tol: float = 1e-8,
                rms_gate: float = REPROJ_RMS_GATE) -> TriangulatedFeature:
    """Linear multi-view initialization refined by Gauss-Newton on inverse depth.

    Raises DegenerateGeometryError for insufficient baseline or parallax;
    returns converged=False features for the caller to drop (negative depth
    or reprojection RMS beyond the gate).
    """
    obs_ids = [cid for cid in sorted(track.observations) if cid in clones]
    if len(obs_ids) < 2:
        raise DegenerateGeometryError(f"feature {track.feature_id}: fewer than 2 observing clones")
    centres = np.array([clones[cid].pos for cid in obs_ids])
    spread = max(np.linalg.norm(a - b) for a in centres for b in centres)
    if spread <= MIN_BASELINE:
        raise DegenerateGeometryError(
            f"feature {track.feature_id}: clone baseline {spread:.3f} m below {MIN_BASELINE}")
    rays = []
    for cid in obs_ids:
        z = track.observations[cid]
        d = clones[cid].rot @ np.array([z[0], z[1], 1.0])
        rays.append(d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            cosang = min(1.0, max(-1.0, float(rays[i] @ rays[j])))
            max_angle = max(max_angle, math.acos(cosang))
    if max_angle < MIN_RAY_ANGLE:
        raise DegenerateGeometryError(f"feature {track.feature_id}: rays parallel within {MIN_RAY_ANGLE} rad")

    cams = _observing_cameras(track, clones, extr)

    # linear init: (u*w3 - w1)^T (p - o) = 0 rows
    a_rows, b_rows = [], []
    for w, o, z in cams:
        for k in range(2):
            row = z[k] * w[2] - w[k]
            a_rows.append(row)
            b_rows.append(row @ o)
    point, *_ = np.linalg.lstsq(np.array(a_rows), np.array(b_rows), rcond=None)

    # Gauss-Newton on inverse depth in the anchor (first) left camera
    anchor = clones[obs_ids[0]]
    p_anchor = anchor.rot.T @ (point - anchor.pos)
    if p_anchor[2] <= 1e-6:
        return TriangulatedFeature(point, False, math.inf)
    theta = np.array([p_anchor[0] / p_anchor[2], p_anchor[1] / p_anchor[2], 1.0 / p_anchor[2]])

    def residuals_jac(th):
        alpha, beta, rho = th
        m = np.array([alpha, beta, 1.0])
        res, jac = [], []
        for w, o, z in cams:
            a = w @ anchor.rot
            t = w @ (anchor.pos - o)
            p = a @ m + rho * t
            if p[2] <= 1e-9:
                return None, None
            pred = p[:2] / p[2]
            res.append(z - pred)
            jp = np.array([[1.0 / p[2], 0.0, -p[0] / p[2] ** 2],
                           [0.0, 1.0 / p[2], -p[1] / p[2] ** 2]])
            jac.append(-jp @ np.column_stack([a[:, 0], a[:, 1], t]))
        return np.concatenate(res), np.vstack(jac)

    converged = False
    for _ in range(max_iter):
        res, jac = residuals_jac(theta)
        if res is None:
            return TriangulatedFeature(point, False, math.inf)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        theta = theta + step
        if theta[2] <= 1e-9:
            return TriangulatedFeature(point, False, math.inf)
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
    point = anchor.pos + anchor.rot @ (np.array([theta[0], theta[1], 1.0]) / theta[2])

    res, _ = residuals_jac(theta)
    if res is None:
        return TriangulatedFeature(point, False, math.inf)
    rms = float(np.sqrt(np.mean(res ** 2)))
    for w, o, _ in cams:
        if (w @ (point - o))[2] <= 0.0:
            return TriangulatedFeature(point, False, rms)
    return TriangulatedFeature(point, converged and rms <= rms_gate, rms)


def reprojection_residual(track: FeatureTrack, clones: Mapping[int, CameraClone],
                          feature: TriangulatedFeature, extr: ExtrinsicSet
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Stacked stereo residuals with analytic Jacobians.

    Returns (r, H_cam, H_f, clone_ids): 4 rows per observing clone; H_cam has
    a 4x6 block per clone ordered [dtheta_c, dp_c]; clones where either depth
    falls below MIN_DEPTH are excluded from the stack.
    """
    rows_r, rows_hc, rows_hf, used = [], [], [], []
    for cid in sorted(track.observations):
        if cid not in clones:
            continue
        clone = clones[cid]
        z = track.observations[cid]
        p_left = clone.rot.T @ (feature.position - clone.pos)
        p_right = extr.r_c1c0 @ (p_left - extr.p_c0c1)
        if abs(p_left[2]) < MIN_DEPTH or abs(p_right[2]) < MIN_DEPTH:
            continue
        pred = np.array([p_left[0] / p_left[2], p_left[1] / p_left[2],
                         p_right[0] / p_right[2], p_right[1] / p_right[2]])
        rows_r.append(z - pred)

        d_left_dth = skew(p_left)
        d_left_dp = -clone.rot.T
        d_left_df = clone.rot.T
        jl = np.array([[1.0 / p_left[2], 0.0, -p_left[0] / p_left[2] ** 2],
                       [0.0, 1.0 / p_left[2], -p_left[1] / p_left[2] ** 2]])
        jr = np.array([[1.0 / p_right[2], 0.0, -p_right[0] / p_right[2] ** 2],
                       [0.0, 1.0 / p_right[2], -p_right[1] / p_right[2] ** 2]])
        jr_chain = jr @ extr.r_c1c0
        hc = np.zeros((4, CLONE_DIM))
        hc[0:2, 0:3] = jl @ d_left_dth
        hc[0:2, 3:6] = jl @ d_left_dp
        hc[2:4, 0:3] = jr_chain @ d_left_dth
        hc[2:4, 3:6] = jr_chain @ d_left_dp
        hf = np.vstack([jl @ d_left_df, jr_chain @ d_left_df])
        rows_hc.append(hc)
        rows_hf.append(hf)
        used.append(cid)
    if not used:
        return np.zeros(0), np.zeros((0, 0)), np.zeros((0, 3)), []
    n = len(used)
    h_cam = np.zeros((4 * n, CLONE_DIM * n))
    for i, blk in enumerate(rows_hc):
        h_cam[4 * i:4 * i + 4, CLONE_DIM * i:CLONE_DIM * i + CLONE_DIM] = blk
    return np.concatenate(rows_r), h_cam, np.vstack(rows_hf), used


def nullspace_project(r: np.ndarray, h_cam: np.ndarray, h_f: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Project the residual stack onto the left null space of H_f.

    The output (r0, H0) is independent of the feature-position error and has
    3 fewer rows. Raises DegenerateGeometryError for rank-deficient H_f or
    stacks shorter than MIN_STACK_ROWS.
    """
    m = h_f.shape[0]
    if m < MIN_STACK_ROWS:
        raise DegenerateGeometryError(f"stack of {m} rows too short to marginalize a feature")
    q, rr = np.linalg.qr(h_f, mode="complete")
    if np.abs(np.diag(rr[:3, :3])).min() < 1e-10 * max(1.0, np.abs(rr).max()):
        raise DegenerateGeometryError("feature Jacobian is rank deficient")
    v = q[:, 3:]
    return v.T @ r, v.T @ h_cam
