"""Pixel-to-centimetre calibration from major scale keypoints.

Rows grow downward and gauge values grow upward, so the anchor mark for a
waterline is the nearest major mark at or above it and the reading is the
anchor value minus the sub-interval fraction times 10 cm.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks

from gaugeread.raster import Raster, otsu_threshold
from gaugeread.synth import GroundTruth
from gaugeread.waterline import WaterlineResult

MAJOR_INTERVAL_CM = 10.0
RATIO_TOLERANCE = 0.05


class CalibrationError(ValueError):
    pass


class DetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScaleKeypoint:
    row: float
    col: float
    value_cm: float | None = None
    confidence: float = 1.0


@dataclass(frozen=True)
class PlateDetection:
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    keypoints: tuple[ScaleKeypoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        kps = tuple(sorted(self.keypoints, key=lambda k: k.row))
        if any(b.row <= a.row for a, b in zip(kps, kps[1:])):
            raise ValueError("keypoint rows must be strictly increasing")
        object.__setattr__(self, "keypoints", kps)

    @property
    def plate_height_px(self) -> int:
        return self.bbox[3] - self.bbox[1]

    @property
    def plate_cols(self) -> tuple[int, int]:
        return self.bbox[0], self.bbox[2]

    def to_dict(self) -> dict:
        return {
            "bbox": list(self.bbox),
            "keypoints": [{"row": k.row, "col": k.col, "value_cm": k.value_cm, "conf": k.confidence}
                          for k in self.keypoints],
            "plate_height_px": self.plate_height_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PlateDetection:
        kps = tuple(ScaleKeypoint(row=float(k["row"]), col=float(k["col"]), value_cm=k.get("value_cm"),
                                  confidence=float(k.get("conf", 1.0))) for k in d["keypoints"])
        det = cls(bbox=tuple(d["bbox"]), keypoints=kps)
        if "plate_height_px" in d and int(d["plate_height_px"]) != det.plate_height_px:
            raise ValueError("plate_height_px disagrees with the bbox height")
        return det


@dataclass(frozen=True)
class ScaleGeometry:
    """Everything Stage 2 needs; no numeral value required."""

    d_m: float
    d_n: float
    ratio: float
    plate_height_px: int
    anchor_row: float
    waterline_row: float


@dataclass(frozen=True)
class ScaleCalibration:
    d_m: float
    d_n: float
    ratio: float
    major_reading_cm: float
    reading_cm: float
    plate_height_px: int = 0


def major_gap(rows) -> float:
    rows = [float(r) for r in rows]
    if len(rows) < 2:
        raise CalibrationError("need at least two major keypoints")
    diffs = [b - a for a, b in zip(rows, rows[1:])]
    if any(d <= 0 for d in diffs):
        raise CalibrationError("keypoint rows must be strictly increasing")
    return float(statistics.median(diffs))


def waterline_gap(waterline_row: float, anchor_row: float) -> float:
    if waterline_row < anchor_row:
        raise CalibrationError(f"waterline row {waterline_row} lies above its anchor row {anchor_row}")
    return float(waterline_row - anchor_row)


def gap_ratio(d_n: float, d_m: float, tol: float = RATIO_TOLERANCE) -> float:
    if not d_m > 0:
        raise CalibrationError(f"major gap must be positive, got {d_m}")
    if d_n < 0 or d_n > d_m * (1 + tol):
        raise CalibrationError(f"waterline gap {d_n} inconsistent with major gap {d_m}")
    return min(max(d_n / d_m, 0.0), 1.0)


def compute_reading(major_reading_cm: float, ratio: float) -> float:
    if not 0 <= ratio <= 1:
        raise CalibrationError(f"ratio must lie in [0, 1], got {ratio}")
    return major_reading_cm - ratio * MAJOR_INTERVAL_CM


def _anchor_index(detection: PlateDetection, waterline_row: float) -> int:
    above = [i for i, k in enumerate(detection.keypoints) if k.row <= waterline_row]
    if not above:
        raise CalibrationError("no anchor: every keypoint lies below the waterline")
    return above[-1]


def scale_geometry(detection: PlateDetection, waterline_row: float) -> ScaleGeometry:
    d_m = major_gap([k.row for k in detection.keypoints])
    anchor = detection.keypoints[_anchor_index(detection, waterline_row)]
    d_n = waterline_gap(waterline_row, anchor.row)
    return ScaleGeometry(d_m=d_m, d_n=d_n, ratio=gap_ratio(d_n, d_m),
                         plate_height_px=detection.plate_height_px,
                         anchor_row=anchor.row, waterline_row=float(waterline_row))


def anchor_value(detection: PlateDetection, waterline_row: float, d_m: float | None = None) -> float:
    """Value of the anchor mark; inferred from another labelled mark if it has none."""
    kps = detection.keypoints
    idx = _anchor_index(detection, waterline_row)
    if kps[idx].value_cm is not None:
        return float(kps[idx].value_cm)
    known = [k for k in kps if k.value_cm is not None]
    if not known:
        raise CalibrationError("no keypoint carries a numeral value; only geometry is available")
    d_m = d_m if d_m is not None else major_gap([k.row for k in kps])
    ref = min(known, key=lambda k: abs(k.row - kps[idx].row))
    steps = round((kps[idx].row - ref.row) / d_m)
    return float(ref.value_cm) - MAJOR_INTERVAL_CM * steps


def calibrate_row(detection: PlateDetection, waterline_row: float) -> ScaleCalibration:
    geo = scale_geometry(detection, waterline_row)
    m = anchor_value(detection, waterline_row, geo.d_m)
    return ScaleCalibration(d_m=geo.d_m, d_n=geo.d_n, ratio=geo.ratio, major_reading_cm=m,
                            reading_cm=compute_reading(m, geo.ratio),
                            plate_height_px=geo.plate_height_px)


def calibrate(detection: PlateDetection, waterline: WaterlineResult) -> ScaleCalibration:
    if not waterline.accepted:
        raise CalibrationError("waterline detection was rejected")
    return calibrate_row(detection, waterline.row)


# -- keypoint backends ---------------------------------------------------------

class KeypointDetector(Protocol):
    def detect(self, image_id: str, gray: Raster) -> PlateDetection: ...


def detection_from_truth(gt: GroundTruth) -> PlateDetection:
    kps = tuple(ScaleKeypoint(row=k.row, col=k.col, value_cm=float(k.value_cm))
                for k in gt.major_keypoints if k.visible)
    return PlateDetection(bbox=gt.plate_bbox, keypoints=kps)


@dataclass
class OracleDetector:
    """Serves keypoints straight from renderer ground truth."""

    truths: dict[str, GroundTruth]

    def detect(self, image_id: str, gray: Raster) -> PlateDetection:
        try:
            return detection_from_truth(self.truths[image_id])
        except KeyError:
            raise DetectionError(f"no ground truth for {image_id!r}") from None


@dataclass
class FileDetector:
    """Reads the detection interchange file: {image_id: {bbox, keypoints, plate_height_px}}."""

    detections: dict[str, PlateDetection] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> FileDetector:
        raw = json.loads(Path(path).read_text())
        return cls({k: PlateDetection.from_dict(v) for k, v in raw.items()})

    def detect(self, image_id: str, gray: Raster) -> PlateDetection:
        try:
            return self.detections[image_id]
        except KeyError:
            raise DetectionError(f"no detection for {image_id!r}") from None


def save_detections(detections: dict[str, PlateDetection], path: str | Path) -> None:
    payload = {k: detections[k].to_dict() for k in sorted(detections)}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _longest_run(mask: np.ndarray) -> tuple[int, int]:
    best, start, best_span = (0, 0), None, -1
    for i, v in enumerate(np.append(mask, False)):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start > best_span:
                best_span, best = i - start, (start, i)
            start = None
    return best


@dataclass
class ClassicalDetector:
    """Plate box from the Otsu foreground, major marks from full-width dark bands.

    Only the major bars cross the whole plate, so a high percentile of each
    row's intensities drops sharply on a bar while numerals and triangles,
    which cover part of the width, leave it bright. Bars are the peaks of that
    drop below a running maximum; each keypoint sits where the drop first
    reaches half its peak, i.e. the top edge of the bar. Numeral values are not
    read, so keypoints carry no ``value_cm``.
    """

    row_percentile: float = 90.0
    background_rows: int = 15
    min_gap: int = 8
    rel_height: float = 0.4
    min_drop: float = 10.0

    def detect(self, image_id: str, gray: Raster) -> PlateDetection:
        _, binary = otsu_threshold(gray)
        bright = binary.data > 0
        col_frac = bright.mean(axis=0)
        if col_frac.max() <= 0:
            raise DetectionError("no bright plate region")
        c0, c1 = _longest_run(col_frac >= 0.2 * col_frac.max())
        if c1 - c0 < 8:
            raise DetectionError("plate columns not found")
        row_frac = bright[:, c0 + 1:c1 - 1].mean(axis=1)
        plate_rows = np.nonzero(row_frac >= 0.3)[0]
        if len(plate_rows) == 0:
            raise DetectionError("plate rows not found")
        r0, r1 = int(plate_rows[0]), int(plate_rows[-1]) + 1

        inner = gray.data[r0:r1, c0 + 2:c1 - 2].astype(np.float64)
        level = np.percentile(inner, self.row_percentile, axis=1)
        drop = ndimage.maximum_filter1d(level, size=self.background_rows, mode="nearest") - level
        if drop.max() <= 0:
            raise DetectionError("no dark bands on the plate")
        peaks, _ = find_peaks(drop, height=max(self.min_drop, self.rel_height * drop.max()), distance=self.min_gap)
        tops = []
        for p in peaks:
            top = p
            while top > 0 and drop[top - 1] >= 0.5 * drop[p]:
                top -= 1
            # sub-pixel half-max crossing
            below = drop[top - 1] if top > 0 else 0.0
            frac = (drop[top] - 0.5 * drop[p]) / (drop[top] - below) if drop[top] > below else 0.0
            tops.append(r0 + top - frac + 0.5)
        if len(tops) < 2:
            raise DetectionError(f"found {len(tops)} major marks, need at least 2")
        col = (c0 + c1) / 2.0
        kps = tuple(ScaleKeypoint(row=float(r), col=col, value_cm=None, confidence=0.5) for r in tops)
        return PlateDetection(bbox=(c0, r0, c1, r1), keypoints=kps)
