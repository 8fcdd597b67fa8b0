"""Sky-mask handling, satellite-to-fisheye projection and LOS/NLOS classification.

The sky-pointing fisheye is modelled as an ideal equidistant zenith
projection: image radius is proportional to zenith angle, so elevation 90
degrees maps to the principal point and elevation 0 to the rim circle of
radius `radius` pixels. Pixel axes are x right / y down, and the projection
angle is measured clockwise from image-up:

    r = radius * (pi/2 - ele) / (pi/2)
    alpha = az - vehicle_yaw - yaw_offset
    u = cx + r * sin(alpha),  v = cy - r * cos(alpha)

Classification samples the binary mask at the nearest pixel; smoothing would
blur the sky/building boundary that defines NLOS. Satellites projecting
outside the rim or image bounds are labelled out-of-image and treated as
NLOS downstream (a satellite below the fisheye field of view is almost
certainly obstructed).

Masks interchange as 8-bit single-channel PNG: value >= 128 means sky.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .gnss import ElevationAzimuth, SkyLabel

SKY_PNG_THRESHOLD = 128
MIN_MASK_SIZE = 64


@dataclass(frozen=True)
class SkyMask:
    """Binary sky raster (True = sky) for one epoch."""

    raster: np.ndarray
    image_id: str = ""
    time: float = 0.0

    def __post_init__(self):
        raster = np.asarray(self.raster, dtype=bool)
        if raster.ndim != 2 or raster.shape[0] < MIN_MASK_SIZE or raster.shape[1] < MIN_MASK_SIZE:
            raise ValueError(f"mask must be at least {MIN_MASK_SIZE}x{MIN_MASK_SIZE}, got {raster.shape}")
        object.__setattr__(self, "raster", raster)

    @property
    def height(self) -> int:
        return self.raster.shape[0]

    @property
    def width(self) -> int:
        return self.raster.shape[1]


@dataclass(frozen=True)
class FisheyeModel:
    """Zenith-centred equidistant projection parameters (pixels / radians)."""

    cx: float
    cy: float
    radius: float           # image radius at elevation 0
    yaw_offset: float = 0.0  # mounting yaw between image-up and vehicle forward

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("rim radius must be positive")


@dataclass(frozen=True)
class SatelliteProjection:
    sat_id: str
    u: float
    v: float
    label: SkyLabel


def project_satellite(ea: ElevationAzimuth, vehicle_yaw: float, model: FisheyeModel) -> tuple[float, float]:
    """Project an (elevation, azimuth) direction onto the fisheye image plane."""
    r = model.radius * (math.pi / 2 - ea.elevation) / (math.pi / 2)
    alpha = ea.azimuth - vehicle_yaw - model.yaw_offset
    return model.cx + r * math.sin(alpha), model.cy - r * math.cos(alpha)


def unproject_pixel(u: float, v: float, vehicle_yaw: float, model: FisheyeModel) -> ElevationAzimuth:
    """Analytic inverse of :func:`project_satellite` (pixels inside the rim)."""
    du = u - model.cx
    dv = model.cy - v
    r = math.hypot(du, dv)
    ele = math.pi / 2 * (1.0 - r / model.radius)
    az = (math.atan2(du, dv) + vehicle_yaw + model.yaw_offset) % (2.0 * math.pi)
    if az >= 2.0 * math.pi:
        az = 0.0
    return ElevationAzimuth(ele, az)


def classify_epoch(mask: SkyMask | None,
                   sats: Sequence[tuple[str, ElevationAzimuth]],
                   vehicle_yaw: float,
                   model: FisheyeModel) -> tuple[list[SatelliteProjection], bool]:
    """Label satellites LOS/NLOS by sampling the sky mask at their projections.

    With no mask available every satellite falls back to LOS (the filter then
    degrades to the unaided baseline); the second return value flags that.
    """
    out = []
    if mask is None:
        for sat_id, ea in sats:
            u, v = project_satellite(ea, vehicle_yaw, model)
            out.append(SatelliteProjection(sat_id, u, v, SkyLabel.LOS))
        return out, True
    for sat_id, ea in sats:
        u, v = project_satellite(ea, vehicle_yaw, model)
        col, row = round(u), round(v)
        r = math.hypot(u - model.cx, model.cy - v)
        if r > model.radius or not (0 <= row < mask.height and 0 <= col < mask.width):
            label = SkyLabel.OUT_OF_IMAGE
        elif mask.raster[row, col]:
            label = SkyLabel.LOS
        else:
            label = SkyLabel.NLOS
        out.append(SatelliteProjection(sat_id, u, v, label))
    return out, False


def labels_by_id(projections: Sequence[SatelliteProjection]) -> dict[str, SkyLabel]:
    return {p.sat_id: p.label for p in projections}


# --- classical segmentation baselines ------------------------------------------

def _to_gray(image: np.ndarray) -> np.ndarray:
    """Accept 8-bit or float grayscale/RGB rasters; return float in [0, 255]."""
    img = np.asarray(image)
    if img.size == 0:
        raise DataError("empty image")
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    elif img.ndim != 2:
        raise DataError(f"expected 2-D or 3-D raster, got shape {img.shape}")
    img = img.astype(float)
    if img.max() <= 1.0:
        img = img * 255.0
    return img


def otsu_threshold(gray: np.ndarray) -> float:
    """Global threshold maximizing between-class variance on a 256-bin histogram.

    On plateaus of the objective (e.g. strictly two-valued images) the middle
    of the argmax plateau is returned, so the threshold falls strictly
    between well-separated modes.
    """
    hist, _ = np.histogram(gray, bins=256, range=(0.0, 256.0))
    total = hist.sum()
    w0 = np.cumsum(hist)
    mu0 = np.cumsum(hist * np.arange(256))
    mu_total = mu0[-1]
    w1 = total - w0
    valid = (w0[:-1] > 0) & (w1[:-1] > 0)
    if not np.any(valid):
        return math.nan  # uniform image; caller applies the fallback policy
    m0 = np.where(w0[:-1] > 0, mu0[:-1] / np.maximum(w0[:-1], 1), 0.0)
    m1 = np.where(w1[:-1] > 0, (mu_total - mu0[:-1]) / np.maximum(w1[:-1], 1), 0.0)
    sigma_b = np.where(valid, w0[:-1] * w1[:-1] * (m0 - m1) ** 2, -1.0)
    best = sigma_b.max()
    plateau = np.flatnonzero(sigma_b >= best * (1.0 - 1e-12))
    return float((plateau[0] + plateau[-1]) / 2.0) + 0.5


def _uniform_fallback(gray: np.ndarray) -> np.ndarray:
    return np.full(gray.shape, bool(gray.flat[0] > 127.5))


def _segment_otsu(gray: np.ndarray) -> np.ndarray:
    t = otsu_threshold(gray)
    if math.isnan(t):
        return _uniform_fallback(gray)
    return gray > t


def _kmeans_1d(values: np.ndarray, rng: np.random.Generator, max_iter: int = 50) -> tuple[float, float]:
    """2-means on scalar intensities with k-means++ seeding; returns sorted centers."""
    c0 = values[rng.integers(len(values))]
    d2 = (values - c0) ** 2
    total = d2.sum()
    if total == 0.0:
        return float(c0), float(c0)
    c1 = values[rng.choice(len(values), p=d2 / total)]
    centers = np.array([c0, c1], dtype=float)
    for _ in range(max_iter):
        assign = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
        new = np.array([values[assign == k].mean() if np.any(assign == k) else centers[k]
                        for k in range(2)])
        if np.allclose(new, centers):
            centers = new
            break
        centers = new
    return float(centers.min()), float(centers.max())


def _segment_kmeans(gray: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flat = gray.ravel()
    lo, hi = _kmeans_1d(flat, rng)
    if lo == hi:
        return _uniform_fallback(gray)
    # cluster with the higher mean intensity is sky
    return np.abs(gray - hi) < np.abs(gray - lo)


def _segment_region_growth(gray: np.ndarray, seed: tuple[int, int], tol: float) -> np.ndarray:
    """Flood fill from the seed pixel: the grown connected region is sky."""
    seed_val = gray[seed]
    within = np.abs(gray - seed_val) <= tol
    labels, _ = ndimage.label(within)
    return labels == labels[seed]


def segment_baseline(image: np.ndarray, method: str,
                     seed_point: tuple[int, int] | None = None,
                     tolerance: float = 25.0,
                     rng: np.random.Generator | None = None) -> SkyMask:
    """Segment a sky-view image with one of the classical baselines.

    `method` is one of 'otsu', 'kmeans', 'region_growth'. For region growth
    the seed defaults to the image centre (the principal point of a
    zenith-pointing fisheye); `tolerance` is in 8-bit intensity units.
    """
    gray = _to_gray(image)
    if method == "otsu":
        raster = _segment_otsu(gray)
    elif method == "kmeans":
        raster = _segment_kmeans(gray, rng or np.random.default_rng(0))
    elif method == "region_growth":
        if seed_point is None:
            seed_point = (gray.shape[0] // 2, gray.shape[1] // 2)
        raster = _segment_region_growth(gray, seed_point, tolerance)
    else:
        raise DataError(f"unknown segmentation method {method!r}")
    return SkyMask(raster)


def segmentation_accuracy(pred: SkyMask, truth: SkyMask) -> float:
    """Pixel accuracy: fraction of matching pixels."""
    if pred.raster.shape != truth.raster.shape:
        raise DataError(f"mask shapes differ: {pred.raster.shape} vs {truth.raster.shape}")
    return float(np.mean(pred.raster == truth.raster))


def render_mask(cutoff: Callable[[np.ndarray], np.ndarray], vehicle_yaw: float,
                model: FisheyeModel, shape: tuple[int, int]) -> np.ndarray:
    """Render a boolean sky raster from a skyline elevation-cutoff function.

    A pixel is sky when the elevation at its centre exceeds the cutoff at its
    azimuth; pixels outside the rim are non-sky. `cutoff` maps azimuth arrays
    (rad, clockwise from North) to minimum sky elevations (rad).
    """
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w]
    du = uu - model.cx
    dv = model.cy - vv
    r = np.hypot(du, dv)
    ele = math.pi / 2 * (1.0 - r / model.radius)
    az = (np.arctan2(du, dv) + vehicle_yaw + model.yaw_offset) % (2.0 * math.pi)
    return (r <= model.radius) & (ele > cutoff(az))


def sky_pixel_at(u: float, v: float, cutoff: Callable[[np.ndarray], np.ndarray],
                 vehicle_yaw: float, model: FisheyeModel, shape: tuple[int, int]) -> bool | None:
    """Analytic value of the rendered mask at pixel (round(u), round(v)).

    Returns None outside the rim/bounds. Matches :func:`render_mask` exactly,
    letting a generator label satellites consistently with rasterized masks.
    """
    col, row = round(u), round(v)
    h, w = shape
    du = col - model.cx
    dv = model.cy - row
    r = math.hypot(du, dv)
    if r > model.radius or not (0 <= row < h and 0 <= col < w):
        return None
    ele = math.pi / 2 * (1.0 - r / model.radius)
    az = (math.atan2(du, dv) + vehicle_yaw + model.yaw_offset) % (2.0 * math.pi)
    return bool(ele > float(cutoff(np.array([az]))[0]))
