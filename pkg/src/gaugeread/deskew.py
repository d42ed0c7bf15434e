"""Angular correction from long near-vertical line segments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gaugeread.raster import Raster, quantize, sobel_float


@dataclass(frozen=True)
class HoughParams:
    rho_res: float = 1.0
    theta_res_deg: float = 1.0
    threshold: int = 60
    max_gap: int = 10
    # perpendicular slack (px) when following a line, and half-width erased after it
    corridor: int = 2
    seed: int = 0


@dataclass(frozen=True)
class DeskewConfig:
    min_len: float = 150.0
    gate_deg: float = 1.0
    edge_threshold: float = 160.0
    max_dev_deg: float = 45.0
    hough: HoughParams = field(default_factory=HoughParams)


@dataclass(frozen=True)
class LineSegment:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)

    @property
    def theta_deg(self) -> float:
        """Orientation against the horizontal axis, in (-90, 90]."""
        t = math.degrees(math.atan2(self.y2 - self.y1, self.x2 - self.x1))
        while t <= -90.0:
            t += 180.0
        while t > 90.0:
            t -= 180.0
        return t

    @property
    def deviation_deg(self) -> float:
        """Signed deviation from vertical; positive when the top leans left
        (a counter-clockwise tilt as displayed with rows growing downward)."""
        t = self.theta_deg
        return 90.0 - t if t > 0 else -(90.0 + t)


@dataclass(frozen=True)
class SkewEstimate:
    qualifying_segments: int
    p80_dev_deg: float
    mean_abs_dev_deg: float
    rotation_deg: float


def edge_map(gray: Raster, threshold: float) -> np.ndarray:
    gx, _ = sobel_float(gray.data)
    return np.abs(gx) > threshold


def probabilistic_hough(mask: np.ndarray, min_len: float, params: HoughParams = HoughParams()) -> list[LineSegment]:
    """Progressive probabilistic Hough transform on a boolean edge mask.

    Edge points are visited in seeded random order and vote into a (rho, theta)
    accumulator. When a bin reaches the vote threshold the line is followed from
    the seed point in both directions, tolerating gaps of up to ``max_gap``
    steps. Points found along the way are fitted by total least squares to give
    the segment endpoints; accepted segments have their corridor erased from the
    mask and their votes withdrawn.
    """
    h, w = mask.shape
    work = mask.copy()
    voted = np.zeros_like(work)
    thetas = np.deg2rad(np.arange(0.0, 180.0, params.theta_res_deg))
    cos_t = np.cos(thetas) / params.rho_res
    sin_t = np.sin(thetas) / params.rho_res
    n_theta = len(thetas)
    offset = int(math.ceil(math.hypot(h, w) / params.rho_res)) + 1
    acc = np.zeros((n_theta, 2 * offset + 1), dtype=np.int32)
    ang_idx = np.arange(n_theta)
    tol = params.corridor

    ys, xs = np.nonzero(mask)
    rng = np.random.default_rng(params.seed)
    order = rng.permutation(len(xs))
    segments: list[LineSegment] = []

    def rho_idx(x: int, y: int) -> np.ndarray:
        return np.rint(x * cos_t + y * sin_t).astype(np.intp) + offset

    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if not work[y, x]:
            continue
        r = rho_idx(x, y)
        acc[ang_idx, r] += 1
        voted[y, x] = True
        votes = acc[ang_idx, r]
        best = int(np.argmax(votes))
        if votes[best] < params.threshold:
            continue

        theta = thetas[best]
        dirx, diry = -math.sin(theta), math.cos(theta)
        along_x = abs(dirx) >= abs(diry)
        if along_x:
            step = (1.0 if dirx > 0 else -1.0, diry / abs(dirx))
        else:
            step = (dirx / abs(diry), 1.0 if diry > 0 else -1.0)

        hits: list[tuple[int, int]] = []
        for sign in (1.0, -1.0):
            px, py = float(x), float(y)
            gap = 0
            while True:
                px += sign * step[0]
                py += sign * step[1]
                xi, yi = int(round(px)), int(round(py))
                if not (0 <= xi < w and 0 <= yi < h):
                    break
                found = False
                for o in range(-tol, tol + 1):
                    cx, cy = (xi, yi + o) if along_x else (xi + o, yi)
                    if 0 <= cx < w and 0 <= cy < h and work[cy, cx]:
                        hits.append((cx, cy))
                        found = True
                if found:
                    gap = 0
                else:
                    gap += 1
                    if gap > params.max_gap:
                        break
        hits.append((x, y))

        seg, band = _refine(work, hits, tol)
        good = seg is not None and seg.length > min_len
        if good:
            segments.append(seg)
            cleared = band
        else:
            cleared = np.asarray(hits, dtype=np.intp)
        cx, cy = cleared[:, 0], cleared[:, 1]
        live = work[cy, cx]
        cx, cy = cx[live], cy[live]
        if good:
            was_voted = voted[cy, cx]
            vx, vy = cx[was_voted], cy[was_voted]
            if len(vx):
                r = np.rint(np.outer(vx, cos_t) + np.outer(vy, sin_t)).astype(np.intp) + offset
                np.subtract.at(acc, (np.broadcast_to(ang_idx, r.shape), r), 1)
            voted[cy, cx] = False
        work[cy, cx] = False

    return segments


def _fit_line(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    return centroid, vt[0]


def _refine(work: np.ndarray, hits: list[tuple[int, int]], tol: int) -> tuple[LineSegment | None, np.ndarray]:
    """Total-least-squares fit over every live edge point near the followed line.

    Returns the fitted segment and the (x, y) points of the band it covers,
    within ``tol + 1`` px of the line.
    """
    pts = np.asarray(hits, dtype=np.float64)
    if len(pts) < 2:
        return None, np.empty((0, 2), dtype=np.intp)
    h, w = work.shape
    margin = tol + 2
    x0 = max(int(pts[:, 0].min()) - margin, 0)
    x1 = min(int(pts[:, 0].max()) + margin + 1, w)
    y0 = max(int(pts[:, 1].min()) - margin, 0)
    y1 = min(int(pts[:, 1].max()) + margin + 1, h)
    ys, xs = np.nonzero(work[y0:y1, x0:x1])
    cand = np.column_stack([xs + x0, ys + y0]).astype(np.float64)
    centroid, direction = _fit_line(pts)
    t_hits = (pts - centroid) @ direction
    lo, hi = t_hits.min() - 1.0, t_hits.max() + 1.0
    normal = np.array([-direction[1], direction[0]])
    radius = tol + 0.5
    for _ in range(2):
        rel = cand - centroid
        sel = (np.abs(rel @ normal) <= radius) & ((rel @ direction) >= lo) & ((rel @ direction) <= hi)
        if sel.sum() < 2:
            break
        new_c, new_d = _fit_line(cand[sel])
        if new_d @ direction < 0:
            new_d = -new_d
        lo += (centroid - new_c) @ new_d
        hi += (centroid - new_c) @ new_d
        centroid, direction = new_c, new_d
        normal = np.array([-direction[1], direction[0]])
    rel = cand - centroid
    along = rel @ direction
    near = np.abs(rel @ normal) <= radius
    inside = near & (along >= lo) & (along <= hi)
    if inside.sum() < 2:
        return None, np.empty((0, 2), dtype=np.intp)
    t = along[inside]
    p1 = centroid + t.min() * direction
    p2 = centroid + t.max() * direction
    seg = LineSegment(float(p1[0]), float(p1[1]), float(p2[0]), float(p2[1]))
    band = (np.abs(rel @ normal) <= tol + 1) & (along >= lo - 1) & (along <= hi + 1)
    return seg, cand[band].astype(np.intp)


def detect_segments(gray: Raster, min_len: float = 150.0, config: DeskewConfig = DeskewConfig()) -> list[LineSegment]:
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    mask = edge_map(gray, config.edge_threshold)
    if not mask.any():
        return []
    return [s for s in probabilistic_hough(mask, min_len, config.hough) if s.length > min_len]


def estimate_skew(segments: list[LineSegment], gate_deg: float = 1.0, max_dev_deg: float = 45.0) -> SkewEstimate:
    """Rotation that makes the dominant near-vertical structure upright.

    Segments leaning more than ``max_dev_deg`` from vertical are ignored. The
    correction is the negated 80th percentile (linear interpolation) of the
    signed deviations, applied only when their mean absolute value reaches
    ``gate_deg``.
    """
    devs = np.array([s.deviation_deg for s in segments], dtype=np.float64)
    devs = devs[np.abs(devs) <= max_dev_deg]
    if len(devs) == 0:
        return SkewEstimate(0, 0.0, 0.0, 0.0)
    p80 = float(np.percentile(devs, 80, method="linear"))
    mean_abs = float(np.mean(np.abs(devs)))
    rotation = -p80 if mean_abs >= gate_deg else 0.0
    rotation = float(np.clip(rotation, -max_dev_deg, max_dev_deg)) + 0.0
    return SkewEstimate(len(devs), p80, mean_abs, rotation)


def rotate_image(img: Raster, angle_deg: float) -> Raster:
    """Rotate counter-clockwise (as displayed) about the image centre.

    Bilinear resampling; the canvas size is kept and samples falling outside
    the source are taken from the nearest border pixel.
    """
    if abs(angle_deg) > 45:
        raise ValueError(f"rotation must be within +/-45 degrees, got {angle_deg}")
    if angle_deg == 0:
        return img
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    src_x = np.clip(c * dx - s * dy + cx, 0, w - 1)
    src_y = np.clip(s * dx + c * dy + cy, 0, h - 1)
    x0 = np.minimum(np.floor(src_x).astype(np.intp), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(src_y).astype(np.intp), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = src_x - x0
    fy = src_y - y0
    data = img.data.astype(np.float64)
    if img.channels == 3:
        fx = fx[:, :, None]
        fy = fy[:, :, None]
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return Raster(quantize(top * (1 - fy) + bottom * fy))


def deskew(gray: Raster, config: DeskewConfig = DeskewConfig()) -> tuple[SkewEstimate, list[LineSegment]]:
    segments = detect_segments(gray, config.min_len, config)
    return estimate_skew(segments, config.gate_deg, config.max_dev_deg), segments
