"""Coarse-to-fine waterline localization with an accept/reject confidence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gaugeread.raster import Raster, canny, sobel_float

FINE_HALF_WINDOW = 5


@dataclass(frozen=True)
class WaterlineConfig:
    threshold: float = 0.20
    window: int = 25
    smooth_rows: int = 5
    band_rows: int = 30
    guard_rows: int = 2
    canny_low: float = 50.0
    canny_high: float = 150.0
    canny_sigma: float = 1.4


@dataclass(frozen=True)
class WaterlineResult:
    row: int
    coarse_row: int
    confidence: float
    accepted: bool


def _cols(gray: Raster, plate_cols: tuple[int, int] | None) -> slice:
    if plate_cols is None:
        return slice(0, gray.width)
    c0, c1 = plate_cols
    if not 0 <= c0 < c1 <= gray.width:
        raise ValueError(f"plate columns {plate_cols} empty or outside image of width {gray.width}")
    return slice(c0, c1)


def _moving_average(values: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return values.astype(np.float64)
    half = n // 2
    padded = np.pad(values.astype(np.float64), (half, n - 1 - half), mode="edge")
    c = np.concatenate([[0.0], np.cumsum(padded)])
    return (c[n:] - c[:-n]) / n


def _profile(edges: np.ndarray, mag: np.ndarray, cols: slice, smooth_rows: int) -> np.ndarray:
    return _moving_average(np.where(edges, mag, 0.0)[:, cols].sum(axis=1), smooth_rows)


def edge_profile(gray: Raster, plate_cols: tuple[int, int] | None = None,
                 config: WaterlineConfig = WaterlineConfig()) -> np.ndarray:
    """Per-row sum of Canny edge magnitudes over the plate columns, smoothed."""
    edges, mag = canny(gray, config.canny_low, config.canny_high, config.canny_sigma)
    return _profile(edges, mag, _cols(gray, plate_cols), config.smooth_rows)


def strongest_drop(profile: np.ndarray, w: int) -> int:
    """Row r maximizing mean(P[r-w:r]) - mean(P[r:r+w+1]); ties go to the smallest r."""
    n = len(profile)
    if n < 2 * w + 1:
        raise ValueError(f"profile of {n} rows is shorter than the {2 * w + 1} rows the window needs")
    c = np.concatenate([[0.0], np.cumsum(profile)])
    r = np.arange(w, n - w)
    above = (c[r] - c[r - w]) / w
    below = (c[r + w + 1] - c[r]) / (w + 1)
    return int(r[np.argmax(above - below)])


def coarse_row(gray: Raster, plate_cols: tuple[int, int] | None = None,
               config: WaterlineConfig = WaterlineConfig()) -> int:
    if gray.height < 2 * config.window + 1:
        raise ValueError(f"image of {gray.height} rows is too short for a {config.window}-row window")
    return strongest_drop(edge_profile(gray, plate_cols, config), config.window)


def fine_row(gray: Raster, coarse: int, plate_cols: tuple[int, int] | None = None) -> int:
    """Row of maximum summed |Sobel-y| within +/-5 rows of the coarse estimate."""
    lo, hi = coarse - FINE_HALF_WINDOW, coarse + FINE_HALF_WINDOW
    if lo < 0 or hi >= gray.height:
        raise ValueError(f"fine window [{lo}, {hi}] falls outside the image")
    _, gy = sobel_float(gray.data)
    cols = _cols(gray, plate_cols)
    strength = np.abs(gy[lo:hi + 1, cols]).sum(axis=1)
    rows = np.arange(lo, hi + 1)
    # max strength, then nearest to coarse, then smaller row
    order = np.lexsort((rows, np.abs(rows - coarse), -strength))
    return int(rows[order[0]])


def waterline_confidence(gray: Raster, row: int, plate_cols: tuple[int, int] | None = None,
                         config: WaterlineConfig = WaterlineConfig(), eps: float = 1e-6) -> float:
    """Relative drop in Canny edge density from the band above the row to the band below."""
    edges, _ = canny(gray, config.canny_low, config.canny_high, config.canny_sigma)
    return _confidence_from_edges(edges, row, _cols(gray, plate_cols), config, eps)


def _confidence_from_edges(edges: np.ndarray, row: int, cols: slice, config: WaterlineConfig,
                           eps: float = 1e-6) -> float:
    g, n = config.guard_rows, config.band_rows
    h = edges.shape[0]
    above = edges[max(row - g - n, 0):max(row - g, 0), cols]
    below = edges[min(row + g + 1, h):min(row + g + 1 + n, h), cols]
    e_above = float(above.mean()) if above.size else 0.0
    e_below = float(below.mean()) if below.size else 0.0
    return max(0.0, e_above - e_below) / (e_above + e_below + eps)


def detect_waterline(gray: Raster, plate_cols: tuple[int, int] | None = None,
                     threshold: float | None = None,
                     config: WaterlineConfig = WaterlineConfig()) -> WaterlineResult:
    threshold = config.threshold if threshold is None else threshold
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if gray.height < 2 * config.window + 1:
        raise ValueError(f"image of {gray.height} rows is too short for a {config.window}-row window")
    edges, mag = canny(gray, config.canny_low, config.canny_high, config.canny_sigma)
    cols = _cols(gray, plate_cols)
    profile = _profile(edges, mag, cols, config.smooth_rows)
    coarse = strongest_drop(profile, config.window)
    coarse = min(max(coarse, FINE_HALF_WINDOW), gray.height - 1 - FINE_HALF_WINDOW)
    row = fine_row(gray, coarse, plate_cols)
    conf = _confidence_from_edges(edges, row, cols, config)
    return WaterlineResult(row=row, coarse_row=coarse, confidence=conf, accepted=conf >= threshold)
