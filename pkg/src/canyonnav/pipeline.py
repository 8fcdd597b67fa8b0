"""End-to-end run orchestration: streams in, trajectory/report bundle out.

Event order is deterministic: IMU propagation advances the filter to each
measurement cluster; within a cluster camera processing (clone management +
visual updates) runs before the GNSS update, and one trajectory row is
written per camera frame afterwards. Masks are matched to GNSS epochs
nearest-in-time within 0.5 s; a missing mask degrades that epoch to the
unaided baseline (all satellites LOS) and bumps a warning counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, plots, sim, skyview
from .dataio import DatasetBundle, RunConfig
from .errors import (BelowHorizonError, DegenerateGeometryError, EmptyEpochError,
                     InvalidGeometryError)
from .fusion import MODE_SPP, FilterConfig, FusionFilter
from .geodesy import Attitude
from .gnss import elevation_azimuth, form_double_differences
from .ins import InsState
from .skyview import labels_by_id
from .vision import FeatureTrack, nullspace_project, reprojection_residual, triangulate

EVENT_TOL = 1e-6
MASK_MATCH_TOL = 0.5


@dataclass
class ResultBundle:
    """Paths of everything a run writes."""

    out_dir: Path
    trajectory: Path
    reports: Path
    run_meta: Path
    error_report: Path | None
    error_series: Path | None
    los_counts: Path
    figures: list[Path]


def _initial_filter(config: RunConfig, bundle: DatasetBundle) -> FusionFilter:
    init = bundle.meta["initial_state"]
    state = InsState(np.array(init["position"], dtype=float),
                     np.array(init["velocity"], dtype=float),
                     Attitude(np.array(init["quaternion"], dtype=float)))
    fcfg = FilterConfig(
        anchor=bundle.anchor,
        extrinsics=config.extrinsics,
        lever_arm=config.lever_arm,
        window_size=config.window_size,
        pixel_sigma=config.pixel_sigma,
        stochastic=config.stochastic,
        process_noise=config.process_noise,
    )
    return FusionFilter(config.mode, state, float(init.get("time", 0.0)), fcfg)


def _nearest_mask(masks: dict[float, Path], t: float):
    if not masks:
        return None
    t_best = min(masks, key=lambda tm: abs(tm - t))
    if abs(t_best - t) > MASK_MATCH_TOL:
        return None
    return masks[t_best]


class _TrackBook:
    """Active feature tracks over the sliding window."""

    def __init__(self):
        self.tracks: dict[int, FeatureTrack] = {}

    def add_frame(self, clone_id: int, obs: list[tuple[int, int, np.ndarray]]) -> set[int]:
        seen = set()
        for cid, fid, z in obs:
            self.tracks.setdefault(fid, FeatureTrack(fid)).add(clone_id, z)
            seen.add(fid)
        return seen

    def dead_tracks(self, seen: set[int]) -> list[FeatureTrack]:
        return [tr for fid, tr in self.tracks.items() if fid not in seen]

    def drop(self, fid: int) -> None:
        self.tracks.pop(fid, None)

    def touching(self, clone_id: int) -> list[FeatureTrack]:
        return [tr for tr in self.tracks.values() if clone_id in tr.observations]


def _vision_stacks(filt: FusionFilter, tracks: list[FeatureTrack]):
    """Triangulate and project each track; unusable tracks yield nothing."""
    stacks = []
    for track in tracks:
        usable = {cid: z for cid, z in track.observations.items() if cid in filt.clones}
        if len(usable) < 2:
            continue
        trimmed = FeatureTrack(track.feature_id, dict(usable))
        try:
            feat = triangulate(trimmed, filt.clones, filt.cfg.extrinsics)
        except DegenerateGeometryError:
            continue
        if not feat.converged:
            continue
        r, h_cam, h_f, used = reprojection_residual(trimmed, filt.clones, feat,
                                                    filt.cfg.extrinsics)
        if len(used) < 2:
            continue
        try:
            r0, h0 = nullspace_project(r, h_cam, h_f)
        except DegenerateGeometryError:
            continue
        stacks.append((r0, h0, used))
    return stacks


def run_pipeline(config: RunConfig, out_dir) -> ResultBundle:
    """Execute one full run and write the result bundle under `out_dir`."""
    bundle = dataio.parse_dataset(config)
    out = dataio.ensure_dir(out_dir)
    filt = _initial_filter(config, bundle)
    book = _TrackBook()

    # camera events cover the full camera grid: frames without visible
    # features still produce a clone and a trajectory row
    cam_rate = float(bundle.meta.get("rates", {}).get("camera", 10.0))
    duration = float(bundle.meta.get("duration", bundle.imu[-1].time))
    cam_dt = 1.0 / cam_rate
    cam_times = {k * cam_dt for k in range(int(round(duration * cam_rate)) + 1)}
    cam_times.update(bundle.frames.keys())

    events: list[tuple[float, int, object]] = []
    for t in sorted(cam_times):
        events.append((t, 0, bundle.frames.get(t, [])))
    for epoch in bundle.gnss:
        events.append((epoch.time, 1, epoch))
    events.sort(key=lambda e: (e[0], e[1]))

    imu = bundle.imu
    imu_idx = 0
    trajectory_rows = []
    reports = []
    los_rows = []

    for t_event, priority, payload in events:
        if t_event < filt.time - EVENT_TOL:
            continue
        while imu_idx + 1 < len(imu) and imu[imu_idx + 1].time <= t_event + EVENT_TOL:
            filt.propagate(imu[imu_idx], imu[imu_idx + 1])
            imu_idx += 1

        if priority == 0:
            clone_id = payload[0][0] if payload else int(round(t_event * cam_rate))
            filt.augment_clone(clone_id, t_event)
            seen = book.add_frame(clone_id, payload)

            update_tracks = []
            for track in book.dead_tracks(seen):
                if len(track.observations) >= 2:
                    update_tracks.append(track)
                book.drop(track.feature_id)

            victim = None
            if len(filt.clones) > config.window_size:
                victim = filt.marginalization_victim()
                for track in book.touching(victim):
                    if len(track.observations) >= 2:
                        update_tracks.append(track)
                        track.observations.clear()
                    else:
                        track.observations.pop(victim, None)

            stacks = _vision_stacks(filt, update_tracks)
            if stacks:
                reports.append(filt.update_vision(stacks).to_dict())
            if victim is not None:
                filt.remove_clone(victim)
            trajectory_rows.append([t_event, filt.ins.position[0],
                                    filt.ins.position[1], filt.ins.position[2]])
        else:
            epoch = payload
            labels = {}
            if config.sndm:
                mask_path = _nearest_mask(bundle.masks, epoch.time)
                mask = dataio.read_mask_png(mask_path, epoch.time) if mask_path else None
                if mask is None:
                    filt.mask_warnings += 1
                sats = []
                ant = filt.antenna_ecef()
                for obs, sat in epoch.observations:
                    try:
                        ea = elevation_azimuth(sat.position, ant, bundle.anchor)
                    except (BelowHorizonError, InvalidGeometryError):
                        continue
                    sats.append((obs.sat_id, ea))
                projections, _ = skyview.classify_epoch(mask, sats, filt.vehicle_yaw(),
                                                        config.fisheye)
                labels = labels_by_id(projections)

            if config.mode == MODE_SPP:
                filt.manage_gnss_states(epoch)
                report = filt.update_spp(epoch, labels)
            else:
                try:
                    dds = form_double_differences(epoch, filt.antenna_ecef(), labels)
                except EmptyEpochError:
                    dds = []
                filt.manage_gnss_states(epoch, dds)
                report = filt.update_rtk(epoch, dds)
            reports.append(report.to_dict())
            los_rows.append([epoch.time, report.n_los, report.n_nlos + report.n_out,
                             len(epoch.observations),
                             report.pdop if not math.isnan(report.pdop) else ""])

    traj_path = out / "trajectory.csv"
    dataio.write_trajectory(traj_path, trajectory_rows)
    reports_path = out / "reports.jsonl"
    dataio.write_jsonl(reports_path, reports)
    los_path = out / "los_counts.csv"
    dataio._write_csv(los_path, ["time", "n_los", "n_nlos", "n_total", "pdop"], los_rows)

    error_report_path = None
    error_series_path = None
    figures: list[Path] = []
    err_report = None
    if bundle.truth is not None:
        est = np.array(trajectory_rows)
        err_report = sim.compute_rmse(est, bundle.truth)
        error_report_path = out / "error_report.json"
        dataio.write_json(error_report_path, err_report.to_dict())
        error_series_path = out / "error_series.csv"
        dataio._write_csv(error_series_path, ["time", "err_east", "err_north", "err_up"],
                          [[t, e[0], e[1], e[2]]
                           for t, e in zip(err_report.times, err_report.errors)])
        figures.append(plots.plot_error_series(err_report, out / "error_series.png"))
    figures.append(plots.plot_los_counts(los_rows, out / "los_counts.png"))

    run_meta_path = out / "run_meta.json"
    dataio.write_json(run_meta_path, {
        "schema_version": 1,
        "mode": config.mode,
        "sndm": config.sndm,
        "seed": config.seed,
        "n_trajectory_rows": len(trajectory_rows),
        "n_reports": len(reports),
        "mask_warnings": filt.mask_warnings,
        "rmse": err_report.to_dict() if err_report else None,
    })
    return ResultBundle(out_dir=out, trajectory=traj_path, reports=reports_path,
                        run_meta=run_meta_path, error_report=error_report_path,
                        error_series=error_series_path, los_counts=los_path,
                        figures=figures)
