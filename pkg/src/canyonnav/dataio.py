"""File formats, configuration and dataset ingestion.

Formats are chosen for diffability at desk scale: CSV for sensor streams,
JSON for configuration/reports, 8-bit PNG for sky masks (>= 128 means sky).
Floats are written with repr so write -> parse -> write is byte-idempotent.
All writers go through an atomic temp-file + rename.

Column layouts (headers included in the files):

    imu.csv     time,wx,wy,wz,ax,ay,az                       (SI units)
    gnss*.csv   time,sat_id,P,L,snr,sat_x,sat_y,sat_z,sat_clk,lambda,iono,tropo,lli
    tracks.csv  time,clone_id,feature_id,u0,v0,u1,v1         (normalized)
    *.csv trajectories: time,east,north,up                   (metres, ENU)
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .geodesy import GeodeticPosition
from .gnss import GnssEpoch, GnssObservation, SatelliteState, StochasticConfig
from .ins import ImuSample, ProcessNoiseConfig
from .skyview import SKY_PNG_THRESHOLD, FisheyeModel, SkyMask
from .vision import ExtrinsicSet

IMU_COLUMNS = ["time", "wx", "wy", "wz", "ax", "ay", "az"]
GNSS_COLUMNS = ["time", "sat_id", "P", "L", "snr", "sat_x", "sat_y", "sat_z",
                "sat_clk", "lambda", "iono", "tropo", "lli"]
TRACK_COLUMNS = ["time", "clone_id", "feature_id", "u0", "v0", "u1", "v1"]
TRAJECTORY_COLUMNS = ["time", "east", "north", "up"]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _read_csv(path, columns) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != columns:
            raise DataError(f"{path}: expected columns {columns}, found {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                missing = columns[len(row)] if len(row) < len(columns) else None
                detail = f"missing column {missing!r}" if missing else f"{len(row)} fields"
                raise DataError(f"{path}:{lineno}: {detail} (expected {len(columns)})")
            rows.append(row)
    return rows


def _parse_float(path, lineno, name, value) -> float:
    try:
        out = float(value)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {name!r} is not a number: {value!r}") from None
    if math.isnan(out) and name not in ("L",):
        raise DataError(f"{path}:{lineno}: column {name!r} is NaN")
    return out


# --- IMU ------------------------------------------------------------------------------

def write_imu(path, rows) -> None:
    _write_csv(path, IMU_COLUMNS, rows)


def read_imu(path) -> list[ImuSample]:
    rows = _read_csv(path, IMU_COLUMNS)
    if not rows:
        raise DataError(f"{path}: no IMU samples")
    samples = []
    prev_t = -math.inf
    for lineno, row in enumerate(rows, start=2):
        vals = [_parse_float(path, lineno, c, v) for c, v in zip(IMU_COLUMNS, row)]
        if vals[0] <= prev_t:
            raise DataError(f"{path}:{lineno}: non-monotone time {vals[0]}")
        prev_t = vals[0]
        samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


# --- GNSS -----------------------------------------------------------------------------

def write_gnss(path, rows) -> None:
    _write_csv(path, GNSS_COLUMNS, rows)


def read_gnss(path) -> list[dict]:
    """Raw per-observation records grouped later into epochs."""
    rows = _read_csv(path, GNSS_COLUMNS)
    if not rows:
        raise DataError(f"{path}: no epochs")
    records = []
    for lineno, row in enumerate(rows, start=2):
        rec = {"sat_id": row[1]}
        for name, value in zip(GNSS_COLUMNS, row):
            if name == "sat_id":
                continue
            rec[name] = _parse_float(path, lineno, name, value)
        records.append(rec)
    return records


def group_gnss_epochs(records: list[dict], base_records: list[dict] | None = None,
                      base_position: np.ndarray | None = None) -> list[GnssEpoch]:
    """Group raw records into time-sorted GnssEpoch objects (base merged in)."""
    by_time: dict[float, list[dict]] = {}
    for rec in records:
        by_time.setdefault(rec["time"], []).append(rec)
    base_by_time: dict[float, list[dict]] = {}
    for rec in base_records or []:
        base_by_time.setdefault(rec["time"], []).append(rec)

    epochs = []
    for t in sorted(by_time):
        obs = []
        atmosphere = {}
        for rec in by_time[t]:
            carrier_valid = math.isfinite(rec["L"])
            sat = SatelliteState(rec["sat_id"], np.array([rec["sat_x"], rec["sat_y"], rec["sat_z"]]),
                                 rec["sat_clk"], rec["snr"], rec["lambda"])
            obs.append((GnssObservation(rec["sat_id"], rec["P"], rec["L"],
                                        carrier_valid=carrier_valid,
                                        loss_of_lock=bool(rec["lli"])), sat))
            atmosphere[rec["sat_id"]] = (rec["iono"], rec["tropo"])
        base_obs = None
        if t in base_by_time:
            base_obs = [GnssObservation(r["sat_id"], r["P"], r["L"],
                                        carrier_valid=math.isfinite(r["L"]),
                                        loss_of_lock=bool(r["lli"]))
                        for r in base_by_time[t]]
        epochs.append(GnssEpoch(t, obs, atmosphere=atmosphere,
                                base_observations=base_obs, base_position=base_position))
    return epochs


# --- feature tracks ----------------------------------------------------------------------

def write_tracks(path, rows) -> None:
    _write_csv(path, TRACK_COLUMNS, rows)


def read_tracks(path) -> list[tuple[float, int, int, np.ndarray]]:
    rows = _read_csv(path, TRACK_COLUMNS)
    out = []
    for lineno, row in enumerate(rows, start=2):
        t = _parse_float(path, lineno, "time", row[0])
        try:
            clone_id, feature_id = int(row[1]), int(row[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer id") from None
        z = np.array([_parse_float(path, lineno, c, v)
                      for c, v in zip(TRACK_COLUMNS[3:], row[3:])])
        out.append((t, clone_id, feature_id, z))
    return out


# --- trajectories --------------------------------------------------------------------------

def write_trajectory(path, rows) -> None:
    _write_csv(path, TRAJECTORY_COLUMNS, rows)


def read_trajectory(path) -> np.ndarray:
    rows = _read_csv(path, TRAJECTORY_COLUMNS)
    if not rows:
        raise DataError(f"{path}: empty trajectory")
    out = np.array([[_parse_float(path, i + 2, c, v) for c, v in zip(TRAJECTORY_COLUMNS, row)]
                    for i, row in enumerate(rows)])
    return out


# --- masks -----------------------------------------------------------------------------------

def write_mask_png(path, raster: np.ndarray) -> None:
    img = Image.fromarray(np.where(raster, 255, 0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_gray_png(path, gray: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_mask_png(path, time: float = 0.0) -> SkyMask:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: mask file not found")
    arr = np.asarray(Image.open(path).convert("L"))
    return SkyMask(arr >= SKY_PNG_THRESHOLD, image_id=path.name, time=time)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: image not found")
    return np.asarray(Image.open(path).convert("L"))


# --- JSON helpers -------------------------------------------------------------------------------

def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from None


def write_jsonl(path, records) -> None:
    text = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)
    atomic_write_text(path, text)


# --- run configuration ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Validated pipeline configuration (paths resolved against its directory)."""

    mode: str
    sndm: bool
    imu_path: Path
    gnss_path: Path
    tracks_path: Path
    meta_path: Path
    base_path: Path | None
    masks_manifest_path: Path | None
    truth_path: Path | None
    fisheye: FisheyeModel
    extrinsics: ExtrinsicSet
    lever_arm: np.ndarray
    window_size: int
    pixel_sigma: float
    stochastic: StochasticConfig
    process_noise: ProcessNoiseConfig
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Load and validate a run configuration JSON, applying CLI overrides."""
    path = Path(path)
    raw = read_json(path)
    overrides = overrides or {}
    for key in ("mode", "sndm", "seed"):
        if overrides.get(key) is not None:
            raw[key] = overrides[key]

    mode = raw.get("mode", "spp")
    if mode not in ("spp", "rtk"):
        raise ConfigError(f"mode must be 'spp' or 'rtk', got {mode!r}")
    sndm = bool(raw.get("sndm", True))
    root = path.parent
    paths = raw.get("paths", {})

    def resolve(key, required):
        rel = paths.get(key)
        if rel is None:
            if required:
                raise ConfigError(f"config missing required path {key!r}")
            return None
        p = root / rel
        if not p.exists():
            raise ConfigError(f"configured path does not exist: {p}")
        return p

    imu_path = resolve("imu", True)
    gnss_path = resolve("gnss", True)
    tracks_path = resolve("tracks", True)
    meta_path = resolve("meta", True)
    base_path = resolve("gnss_base", mode == "rtk")
    masks_path = resolve("masks_manifest", sndm)
    truth_path = resolve("truth", False)

    fe = raw.get("fisheye", {})
    fisheye = FisheyeModel(float(fe.get("cx", 256.0)), float(fe.get("cy", 256.0)),
                           float(fe.get("radius", 240.0)), float(fe.get("yaw_offset", 0.0)))
    ex = raw.get("extrinsics")
    if ex is None:
        raise ConfigError("config missing extrinsics")
    extrinsics = ExtrinsicSet(np.array(ex["r_bc"]), np.array(ex["p_bc"]),
                              np.array(ex["r_c1c0"]), np.array(ex["p_c0c1"]))
    stoch = StochasticConfig(**raw.get("stochastic", {}))
    pn = ProcessNoiseConfig(**raw.get("process_noise", {}))
    return RunConfig(
        mode=mode, sndm=sndm,
        imu_path=imu_path, gnss_path=gnss_path, tracks_path=tracks_path,
        meta_path=meta_path, base_path=base_path, masks_manifest_path=masks_path,
        truth_path=truth_path,
        fisheye=fisheye, extrinsics=extrinsics,
        lever_arm=np.array(raw.get("lever_arm", [0.0, 0.0, 0.0]), dtype=float),
        window_size=int(raw.get("window_size", 20)),
        pixel_sigma=float(raw.get("pixel_sigma", 1e-3)),
        stochastic=stoch, process_noise=pn,
        seed=int(raw.get("seed", 0)), raw=raw,
    )


@dataclass
class DatasetBundle:
    """Parsed, time-sorted input streams for one pipeline run."""

    meta: dict
    imu: list[ImuSample]
    gnss: list[GnssEpoch]
    frames: dict[float, list[tuple[int, int, np.ndarray]]]  # t -> (clone, feature, z)
    masks: dict[float, Path]
    anchor: GeodeticPosition
    truth: np.ndarray | None


def parse_dataset(config: RunConfig) -> DatasetBundle:
    """Load and cross-validate every stream referenced by the config."""
    meta = read_json(config.meta_path)
    anchor = GeodeticPosition(**meta["anchor"])
    imu = read_imu(config.imu_path)
    rover = read_gnss(config.gnss_path)
    base_records = None
    base_pos = None
    if config.mode == "rtk":
        base_records = read_gnss(config.base_path)
        base_pos = np.array(meta["base_position_ecef"], dtype=float)
    epochs = group_gnss_epochs(rover, base_records, base_pos)

    frames: dict[float, list[tuple[int, int, np.ndarray]]] = {}
    for t, clone_id, feature_id, z in read_tracks(config.tracks_path):
        frames.setdefault(t, []).append((clone_id, feature_id, z))

    masks: dict[float, Path] = {}
    if config.sndm and config.masks_manifest_path is not None:
        manifest = read_json(config.masks_manifest_path)
        root = config.masks_manifest_path.parent
        for t_str, rel in manifest.items():
            p = root / rel
            if not p.exists():
                raise DataError(f"mask listed in manifest is missing: {p}")
            masks[float(t_str)] = p

    truth = read_trajectory(config.truth_path) if config.truth_path else None

    times = [imu[0].time, imu[-1].time] + [e.time for e in epochs[:1]] + [e.time for e in epochs[-1:]]
    if max(times) - min(times) > 86400.0:
        raise DataError("streams span more than 24 h; timestamp base mismatch likely")
    return DatasetBundle(meta=meta, imu=imu, gnss=epochs, frames=frames,
                         masks=masks, anchor=anchor, truth=truth)
